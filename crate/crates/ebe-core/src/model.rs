//! Closed-form model solutions u_k on R^2 x R^+, their diagonal metrics and
//! unitary triples, an independent ODE oracle, and the discrete residual of
//! the model equation Delta u + r^(2k) e^(-2u) = 0.

use crate::error::{EbeError, Result};
use crate::grid::{laplacian, Grid3};
use crate::mat2::{c, C64, Mat2};

/// u_k(r, y) = log of ((rho+y)^(k+1) - (rho-y)^(k+1)) / (2(k+1)) with
/// rho = sqrt(r^2 + y^2), evaluated without subtractive cancellation:
/// the bracket is (rho+y)^(k+1) * (1 - t^(k+1)) with t = (rho-y)/(rho+y),
/// and log t = 2 log r - 2 log(rho+y) since (rho-y)(rho+y) = r^2.
pub fn model_u(k: usize, r: f64, y: f64) -> Result<f64> {
    if y <= 0.0 {
        return Err(EbeError::DomainError(format!(
            "model solution needs y > 0, got y = {y}"
        )));
    }
    let m = (k + 1) as f64;
    let rho = r.hypot(y);
    let a = rho + y;
    Ok(m * a.ln() + (-f64::exp_m1(m * log_t(r, y))).ln() - (2.0 * m).ln())
}

/// log of t = (rho-y)/(rho+y). For y <= r use 1 - t = 2y/(rho+y), exact
/// and cancellation-free; for y > r the log-difference form is accurate.
fn log_t(r: f64, y: f64) -> f64 {
    let a = r.hypot(y) + y;
    if y <= r {
        f64::ln_1p(-2.0 * y / a)
    } else {
        2.0 * r.ln() - 2.0 * a.ln()
    }
}

/// (u_k, du/dr, du/dy) by analytic differentiation of the closed form.
pub fn model_u_derivs(k: usize, r: f64, y: f64) -> Result<(f64, f64, f64)> {
    let u = model_u(k, r, y)?;
    let kf = k as f64;
    let m = kf + 1.0;
    let rho = r.hypot(y);
    let a = rho + y;
    let b = rho - y;
    let w = u.exp();
    // d/dy of the bracket: both terms positive, no cancellation
    let w_y = 0.5 * (a.powf(kf) * (1.0 + y / rho) + b.powf(kf) * (1.0 - y / rho));
    // d/dr: a^k - b^k = -a^k expm1(k log t)
    let w_r = (r / (2.0 * rho)) * (-a.powf(kf) * f64::exp_m1(kf * log_t(r, y)));
    let _ = m;
    Ok((u, w_r / w, w_y / w))
}

/// H_k = diag(e^{-u_k}, e^{u_k})
pub fn model_metric(k: usize, r: f64, y: f64) -> Result<Mat2> {
    let u = model_u(k, r, y)?;
    Ok(Mat2::diag(c((-u).exp(), 0.0), c(u.exp(), 0.0)))
}

/// The unitary triple of the model: the angular connection coefficient
/// A = r (du/dr) diag(i/2, -i/2), the Higgs field
/// phi_z = e^{-u} z^k [[0,1],[0,0]], and phi_1 = (du/dy) diag(i/2, -i/2).
pub fn model_unitary_triple(k: usize, r: f64, y: f64, theta: f64) -> Result<(Mat2, Mat2, Mat2)> {
    let (u, u_r, u_y) = model_u_derivs(k, r, y)?;
    let half_i = c(0.0, 0.5);
    let a_coeff = Mat2::diag(half_i, -half_i).scale_re(r * u_r);
    let zk = (c(0.0, theta * k as f64)).exp() * c(r.powi(k as i32), 0.0);
    let phi_z = Mat2::new(C64::ZERO, (-u).exp() * zk, C64::ZERO, C64::ZERO);
    let phi_1 = Mat2::diag(half_i, -half_i).scale_re(u_y);
    Ok((a_coeff, phi_z, phi_1))
}

/// Independent oracle from the ODE reduction: with sigma = y/r,
/// tau = asinh(sigma), u_k = log(sinh((k+1) tau) / (k+1)) + (k+1) log r.
pub fn ode_oracle_u(k: usize, r: f64, y: f64) -> f64 {
    let m = (k + 1) as f64;
    let tau = (y / r).asinh();
    m * r.ln() + log_sinh(m * tau) - m.ln()
}

/// log sinh x for x > 0 without overflow
fn log_sinh(x: f64) -> f64 {
    x - std::f64::consts::LN_2 + (-f64::exp_m1(-2.0 * x)).ln()
}

/// Residual of the ODE form v'' + e^{-2v} = 0 at tau, with
/// v = log(sinh((k+1) tau)/(k+1)), using the differentiated closed form.
pub fn ode_form_residual(k: usize, tau: f64) -> f64 {
    let m = (k + 1) as f64;
    let v = log_sinh(m * tau) - m.ln();
    let sh = (m * tau).sinh();
    let vpp = -m * m / (sh * sh);
    vpp + (-2.0 * v).exp()
}

/// Discrete Delta u_k + r^(2k) e^{-2 u_k} over the grid, r measured from
/// `center` in the z plane.
pub fn model_residual(k: usize, grid: &Grid3, center: C64) -> Result<Vec<f64>> {
    let mut u = vec![0.0; grid.len()];
    for i2 in 0..grid.n2 {
        for i3 in 0..grid.n3 {
            let r = (grid.z_at(i2, i3) - center).norm();
            for iy in 0..grid.ny {
                u[grid.idx(i2, i3, iy)] = model_u(k, r, grid.y_nodes[iy])?;
            }
        }
    }
    let mut res = laplacian(grid, &u);
    for i2 in 0..grid.n2 {
        for i3 in 0..grid.n3 {
            let r = (grid.z_at(i2, i3) - center).norm();
            for iy in 0..grid.ny {
                let i = grid.idx(i2, i3, iy);
                res[i] += r.powi(2 * k as i32) * (-2.0 * u[i]).exp();
            }
        }
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k0_is_log_y() {
        for (r, y) in [(0.5, 0.3), (3.0, 4.0), (10.0, 0.01), (0.0, 2.0)] {
            assert!((model_u(0, r, y).unwrap() - y.ln()).abs() < 1e-13, "({r},{y})");
        }
    }

    #[test]
    fn k1_closed_form_value() {
        // rho = 5, ((5+4)^2 - (5-4)^2)/4 = 20
        assert!((model_u(1, 3.0, 4.0).unwrap() - 20f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn k2_on_axis() {
        // r = 0: e^{u_2} = (2y)^3 / 6, at y=1 -> 4/3
        assert!((model_u(2, 0.0, 1.0).unwrap() - (4.0f64 / 3.0).ln()).abs() < 1e-13);
    }

    #[test]
    fn rejects_nonpositive_y() {
        assert!(matches!(model_u(1, 1.0, 0.0), Err(EbeError::DomainError(_))));
        assert!(matches!(model_u(1, 1.0, -0.5), Err(EbeError::DomainError(_))));
    }

    #[test]
    fn on_axis_closed_form() {
        // e^{u_k}(0, y) = (2y)^{k+1} / (2(k+1))
        for k in 0..5usize {
            for y in [0.1, 1.0, 3.7] {
                let expect = ((2.0f64 * y).powi(k as i32 + 1) / (2.0 * (k as f64 + 1.0))).ln();
                assert!((model_u(k, 0.0, y).unwrap() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cancellation_safe_small_y() {
        // y << r: compare against the ODE oracle which has no subtraction
        for k in 1..4usize {
            for y in [1e-8, 1e-6, 1e-3] {
                let a = model_u(k, 2.0, y).unwrap();
                let b = ode_oracle_u(k, 2.0, y);
                assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "k={k} y={y}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn nahm_pole_profile_bounded() {
        // u_k - log y stays bounded down to tiny y at fixed r = 1
        for k in 0..4usize {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..50 {
                let y = 1e-4 * (1e2f64).powf(i as f64 / 49.0);
                let d = model_u(k, 1.0, y).unwrap() - y.ln();
                lo = lo.min(d);
                hi = hi.max(d);
            }
            assert!(hi.is_finite() && lo.is_finite() && hi - lo < 1.0, "k={k}: [{lo}, {hi}]");
        }
    }

    #[test]
    fn metric_det_one_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let k = rng.gen_range(0..4usize);
            let r = rng.gen_range(0.0..6.0);
            let y = rng.gen_range(0.01..6.0);
            let h = model_metric(k, r, y).unwrap();
            assert!((h.det() - c(1.0, 0.0)).norm() < 1e-12);
            assert!(h.entries()[0].re > 0.0 && h.entries()[3].re > 0.0);
        }
        let h0 = model_metric(0, 2.0, 1.0).unwrap();
        assert!((h0 - Mat2::IDENTITY).norm() < 1e-13);
    }

    #[test]
    fn triple_k0_matches_nahm_pole() {
        let y = 0.8;
        let (a, _phi_z, phi_1) = model_unitary_triple(0, 1.3, y, 0.4).unwrap();
        assert!(a.norm() < 1e-13);
        let expect = Mat2::diag(c(0.0, 0.5 / y), c(0.0, -0.5 / y));
        assert!((phi_1 - expect).norm() < 1e-13);
    }

    #[test]
    fn triple_traceless_and_k1_dy() {
        let (a, _, phi_1) = model_unitary_triple(1, 3.0, 4.0, 0.0).unwrap();
        assert!(a.trace().norm() < 1e-14);
        assert!(phi_1.trace().norm() < 1e-14);
        // du_1/dy at (3,4): y/rho^2 + 1/y = 4/25 + 1/4 = 41/100
        let (_, _, u_y) = model_u_derivs(1, 3.0, 4.0).unwrap();
        assert!((u_y - 0.41).abs() < 1e-13, "{u_y}");
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let eps = 1e-6;
        for k in 0..4usize {
            for (r, y) in [(1.5, 0.7), (0.3, 2.0), (4.0, 0.2)] {
                let (_, u_r, u_y) = model_u_derivs(k, r, y).unwrap();
                let fr = (model_u(k, r + eps, y).unwrap() - model_u(k, r - eps, y).unwrap())
                    / (2.0 * eps);
                let fy = (model_u(k, r, y + eps).unwrap() - model_u(k, r, y - eps).unwrap())
                    / (2.0 * eps);
                assert!((u_r - fr).abs() < 1e-8, "k={k} ({r},{y}): {u_r} vs {fr}");
                assert!((u_y - fy).abs() < 1e-8, "k={k} ({r},{y}): {u_y} vs {fy}");
            }
        }
    }

    #[test]
    fn oracle_agrees_with_closed_form() {
        // 1000 random points with 0.1 < y/r < 10
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let k = rng.gen_range(0..4usize);
            let r = rng.gen_range(0.05..5.0);
            let ratio = rng.gen_range(0.1..10.0);
            let y = ratio * r;
            let a = model_u(k, r, y).unwrap();
            let b = ode_oracle_u(k, r, y);
            assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
        }
        assert!((ode_oracle_u(1, 3.0, 4.0) - 20f64.ln()).abs() < 1e-12);
        assert!((ode_oracle_u(0, 2.0, 0.7) - 0.7f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn ode_form_identity() {
        for k in 0..4usize {
            for tau in [0.1, 0.8, 2.5, 6.0] {
                assert!(ode_form_residual(k, tau).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn far_field_asymptotics_on_rays() {
        // u_k - (k+1) log rho - log sin(psi) bounded along rays from the origin
        for k in 0..4usize {
            for psi in [0.3f64, 0.8, 1.3] {
                let mut vals = vec![];
                for i in 0..30 {
                    let rho = 10.0 * (100f64).powf(i as f64 / 29.0);
                    let r = rho * psi.sin();
                    let y = rho * psi.cos();
                    let u = model_u(k, r, y).unwrap();
                    vals.push(u - (k as f64 + 1.0) * rho.ln() - psi.sin().ln());
                }
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(hi - lo < 1.0 && hi.is_finite(), "k={k} psi={psi}");
            }
        }
    }

    #[test]
    fn residual_k0_small() {
        // u_0 = log y has no x-dependence; residual is pure y-stencil error
        let g = build_grid(2.0, 0.4, 2.0, 9, 9, 65, 1.0).unwrap();
        let res = model_residual(0, &g, C64::ZERO).unwrap();
        let mut sup = 0.0f64;
        for i2 in 0..g.n2 {
            for i3 in 0..g.n3 {
                for iy in 1..g.ny - 1 {
                    sup = sup.max(res[g.idx(i2, i3, iy)].abs());
                }
            }
        }
        assert!(sup < 2e-2, "sup {sup}");
    }

    #[test]
    fn residual_refinement_slope() {
        let mut errs = vec![];
        let mut hs = vec![];
        for lvl in 0..3 {
            let n = 11 * (1 << lvl) + 1;
            let stretch: f64 = 6.0;
            let q = stretch.powf(1.0 / (n as f64 - 2.0));
            let g = build_grid(2.0, 0.3, 2.3, n, n, n, q).unwrap();
            let res = model_residual(1, &g, C64::ZERO).unwrap();
            // sup away from the tip, where the coarsest level is already in
            // the asymptotic regime
            let mut err = 0.0f64;
            for i2 in 1..g.n2 - 1 {
                for i3 in 1..g.n3 - 1 {
                    let r = g.z_at(i2, i3).norm();
                    for iy in 1..g.ny - 1 {
                        let y = g.y_nodes[iy];
                        if r.hypot(y) >= 0.8 {
                            err = err.max(res[g.idx(i2, i3, iy)].abs());
                        }
                    }
                }
            }
            errs.push(err);
            hs.push(1.0 / (n as f64 - 1.0));
        }
        let slope = (errs[0] / errs[2]).ln() / (hs[0] / hs[2]).ln();
        assert!((slope - 2.0).abs() < 0.3, "slope {slope}, errs {errs:?}");
    }

    #[test]
    fn perturbed_model_fails() {
        let g = build_grid(2.0, 0.2, 2.0, 9, 9, 17, 1.1).unwrap();
        // residual of u_1 + 0.1: the nonlinear term is off by e^{-0.2}
        let mut u = vec![0.0; g.len()];
        for i2 in 0..g.n2 {
            for i3 in 0..g.n3 {
                let r = g.z_at(i2, i3).norm();
                for iy in 0..g.ny {
                    u[g.idx(i2, i3, iy)] = model_u(1, r, g.y_nodes[iy]).unwrap() + 0.1;
                }
            }
        }
        let mut res = laplacian(&g, &u);
        let mut sup = 0.0f64;
        for i2 in 1..g.n2 - 1 {
            for i3 in 1..g.n3 - 1 {
                let r = g.z_at(i2, i3).norm();
                for iy in 1..g.ny - 1 {
                    let i = g.idx(i2, i3, iy);
                    res[i] += r.powi(2) * (-2.0 * u[i]).exp();
                    sup = sup.max(res[i].abs());
                }
            }
        }
        assert!(sup > 0.05, "perturbation should leave an O(1) residual, got {sup}");
    }
}
