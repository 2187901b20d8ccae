//! The nonlinear moment map M(H), its exact discrete linearization, the
//! continuation solve from t = 1 down to t = 0, the Donaldson-style energy
//! functional, and extraction of the unitary fields from a converged metric.
//!
//! Conventions: doubled Wirtinger derivatives del = d_x2 - i d_x3 and
//! delbar = d_x2 + i d_x3, so that delbar(del u) is the full planar
//! Laplacian and
//!
//!   M(H) = -delbar(H^{-1} del H) - d_y(H^{-1} d_y H) + [phi, H^{-1} phi^dag H]
//!
//! vanishes on the model metrics diag(e^{-u_k}, e^{u_k}) with phi upper
//! triangular nilpotent.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{EbeError, Result};
use crate::grid::{
    d_y, holo_derivs, sup_norm, weighted_sup_norm, Grid3, WeightFunctions,
};
use crate::krylov::{bicgstab, field_max};
use crate::mat2::{apply_ad_function, c, v_of_s, C64, Mat2};
use crate::poly::{charges, ChargeSet, HolomorphicData, PolyMat2, Polynomial};

/// Allowed deviation of det H from 1 before a metric is rejected.
pub const DET_TOL: f64 = 1e-6;

/// Higgs field [[0, P(z)], [0, 0]] sampled at the grid nodes.
pub fn phi_field(grid: &Grid3, p: &Polynomial) -> Vec<Mat2> {
    let mut out = vec![Mat2::ZERO; grid.len()];
    out.par_chunks_mut(grid.n3 * grid.ny)
        .enumerate()
        .for_each(|(i2, chunk)| {
            for i3 in 0..grid.n3 {
                let v = p.eval(grid.z_at(i2, i3));
                for iy in 0..grid.ny {
                    chunk[i3 * grid.ny + iy] = Mat2([C64::ZERO, v, C64::ZERO, C64::ZERO]);
                }
            }
        });
    out
}

fn check_metric(h: &[Mat2]) -> Result<()> {
    let mut worst = 0.0f64;
    for m in h {
        let dev = (m.det() - c(1.0, 0.0)).norm();
        if dev > worst {
            worst = dev;
        }
    }
    if worst > DET_TOL {
        return Err(EbeError::SingularMetric(worst));
    }
    Ok(())
}

fn map_field(n: usize, f: impl Fn(usize) -> Mat2 + Sync + Send) -> Vec<Mat2> {
    (0..n).into_par_iter().map(f).collect()
}

fn delbar_field(grid: &Grid3, values: &[Mat2]) -> Vec<Mat2> {
    let dx2 = crate::grid::d_x2(grid, values);
    let dx3 = crate::grid::d_x3(grid, values);
    let i = c(0.0, 1.0);
    map_field(values.len(), |k| dx2[k] + dx3[k].scale(i))
}

/// Moment map of a Hermitian det-1 metric field with Higgs polynomial P.
pub fn moment_map(grid: &Grid3, h: &[Mat2], p: &Polynomial) -> Result<Vec<Mat2>> {
    check_metric(h)?;
    let phi = phi_field(grid, p);
    Ok(moment_map_with_phi(grid, h, &phi))
}

/// Moment map with a precomputed (possibly gauge-transformed) Higgs field.
pub fn moment_map_with_phi(grid: &Grid3, h: &[Mat2], phi: &[Mat2]) -> Vec<Mat2> {
    let n = grid.len();
    let hinv: Vec<Mat2> = map_field(n, |k| h[k].inverse());
    let (del_h, _) = holo_derivs(grid, h);
    let dy_h = d_y(grid, h);
    let a: Vec<Mat2> = map_field(n, |k| hinv[k] * del_h[k]);
    let b: Vec<Mat2> = map_field(n, |k| hinv[k] * dy_h[k]);
    let da = delbar_field(grid, &a);
    let db = d_y(grid, &b);
    map_field(n, |k| {
        let x = hinv[k] * phi[k].adjoint() * h[k];
        -da[k] - db[k] + phi[k].commutator(&x)
    })
}

/// Holomorphic gauge action on the data: H -> g^dag H g, phi -> g^{-1} phi g,
/// sampled nodewise for a unimodular polynomial gauge.
pub fn gauge_transform(
    grid: &Grid3,
    h: &[Mat2],
    phi: &[Mat2],
    g: &PolyMat2,
) -> (Vec<Mat2>, Vec<Mat2>) {
    let ginv = g.inverse_unimodular();
    let n = grid.len();
    let mut hg = vec![Mat2::ZERO; n];
    let mut phig = vec![Mat2::ZERO; n];
    for i2 in 0..grid.n2 {
        for i3 in 0..grid.n3 {
            let z = grid.z_at(i2, i3);
            let gm = g.eval(z);
            let gi = ginv.eval(z);
            let ga = gm.adjoint();
            for iy in 0..grid.ny {
                let k = grid.idx(i2, i3, iy);
                hg[k] = ga * h[k] * gm;
                phig[k] = gi * phi[k] * gm;
            }
        }
    }
    (hg, phig)
}

/// Frozen coefficients for applying the exact discrete linearization of the
/// moment map around a metric H.
pub struct LinearizedMap {
    pub grid: Arc<Grid3>,
    pub phi: Vec<Mat2>,
    pub h: Vec<Mat2>,
    hinv: Vec<Mat2>,
    /// H^{-1} del H
    adel: Vec<Mat2>,
    /// H^{-1} d_y H
    ady: Vec<Mat2>,
    /// H^{-1} phi^dag H
    x: Vec<Mat2>,
}

impl LinearizedMap {
    pub fn new(grid: Arc<Grid3>, h: Vec<Mat2>, phi: Vec<Mat2>) -> LinearizedMap {
        let n = grid.len();
        let hinv: Vec<Mat2> = map_field(n, |k| h[k].inverse());
        let (del_h, _) = holo_derivs(&grid, &h);
        let dy_h = d_y(&grid, &h);
        let adel = map_field(n, |k| hinv[k] * del_h[k]);
        let ady = map_field(n, |k| hinv[k] * dy_h[k]);
        let x = map_field(n, |k| hinv[k] * phi[k].adjoint() * h[k]);
        LinearizedMap { grid, phi, h, hinv, adel, ady, x }
    }

    /// Directional derivative of the discrete moment map along the metric
    /// variation delta H = H s', i.e. d/de M(H e^{e s'}) at e = 0. Because
    /// the stencil operators are linear, this is the exact derivative of the
    /// discrete map, not a continuum formula rediscretized.
    pub fn apply(&self, sp: &[Mat2]) -> Vec<Mat2> {
        let grid = &self.grid;
        let n = grid.len();
        let hs: Vec<Mat2> = map_field(n, |k| self.h[k] * sp[k]);
        let (del_hs, _) = holo_derivs(grid, &hs);
        let dy_hs = d_y(grid, &hs);
        // variations of H^{-1} del H and H^{-1} d_y H
        let p1: Vec<Mat2> = map_field(n, |k| self.hinv[k] * del_hs[k] - sp[k] * self.adel[k]);
        let q1: Vec<Mat2> = map_field(n, |k| self.hinv[k] * dy_hs[k] - sp[k] * self.ady[k]);
        let dp1 = delbar_field(grid, &p1);
        let dq1 = d_y(grid, &q1);
        map_field(n, |k| {
            let dx = self.x[k].commutator(&sp[k]); // variation of H^{-1} phi^dag H
            -dp1[k] - dq1[k] + self.phi[k].commutator(&dx)
        })
    }
}

/// Finite-difference fallback for the linearization: the symmetric
/// difference (M(H e^{eps s'}) - M(H e^{-eps s'})) / (2 eps).
pub fn linearize_fd(
    grid: &Grid3,
    h: &[Mat2],
    phi: &[Mat2],
    sp: &[Mat2],
    eps: f64,
) -> Vec<Mat2> {
    let n = grid.len();
    let plus: Vec<Mat2> = map_field(n, |k| h[k] * sp[k].scale_re(eps).exp_traceless_herm());
    let minus: Vec<Mat2> = map_field(n, |k| h[k] * sp[k].scale_re(-eps).exp_traceless_herm());
    let mp = moment_map_with_phi(grid, &plus, phi);
    let mm = moment_map_with_phi(grid, &minus, phi);
    map_field(n, |k| (mp[k] - mm[k]).scale_re(0.5 / eps))
}

// ---------------------------------------------------------------------------
// Continuation solve
// ---------------------------------------------------------------------------

/// Default continuation schedule: t_j = 2^{-j} for 12 steps, then t = 0.
pub fn default_schedule() -> Vec<f64> {
    let mut v: Vec<f64> = (0..=12).map(|j| 0.5f64.powi(j)).collect();
    v.push(0.0);
    v
}

/// Per-t convergence record.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SolveState {
    pub t: f64,
    pub newton_iterations: usize,
    pub residual_sup: f64,
    pub residual_weighted: f64,
    pub krylov_iterations: usize,
    pub max_projection_deviation: f64,
}

/// Final output of the continuation solve.
pub struct SolutionRecord {
    /// correction s in the frame of the initial metric: H = H0 e^s
    pub s: Vec<Mat2>,
    /// converged metric
    pub h: Vec<Mat2>,
    /// residual scale used for tolerances: max(1, sup |M(H0)|)
    pub scale: f64,
    pub final_residual: f64,
    pub states: Vec<SolveState>,
    pub charge_report: ChargeSet,
    /// a priori bound diagnostic sup |rho_hat * s|
    pub sup_rho_hat_s: f64,
    /// weighted norm of s with the standard decay exponents
    pub weighted_s: f64,
}

struct HatState {
    grid: Arc<Grid3>,
    phi: Vec<Mat2>,
    g0: Vec<Mat2>,
    g0_inv: Vec<Mat2>,
    /// current hat-frame correction m: H = g0^dag e^m g0
    m: Vec<Mat2>,
    wf: WeightFunctions,
    max_projection_deviation: f64,
}

impl HatState {
    fn h_field(&self) -> Vec<Mat2> {
        map_field(self.grid.len(), |k| {
            let e = self.m[k].exp_traceless_herm();
            self.g0[k].adjoint() * e * self.g0[k]
        })
    }

    fn ghat(&self) -> (Vec<Mat2>, Vec<Mat2>) {
        let n = self.grid.len();
        let g = map_field(n, |k| {
            self.m[k].scale_re(0.5).exp_traceless_herm() * self.g0[k]
        });
        let gi = map_field(n, |k| {
            self.g0_inv[k] * self.m[k].scale_re(-0.5).exp_traceless_herm()
        });
        (g, gi)
    }

    /// Residual of the continuation operator at parameter t, in the hat
    /// frame: herm(ghat M(H) ghat^{-1}) + t m, zeroed on the domain faces
    /// (Dirichlet condition s = 0 there). Returns (residual, projection
    /// deviation) where the deviation measures how far ghat M ghat^{-1} was
    /// from traceless Hermitian before projection.
    fn residual(&self, t: f64) -> (Vec<Mat2>, f64) {
        let grid = &self.grid;
        let n = grid.len();
        let h = self.h_field();
        let mm = moment_map_with_phi(grid, &h, &self.phi);
        let (g, gi) = self.ghat();
        let raw: Vec<Mat2> = map_field(n, |k| g[k] * mm[k] * gi[k]);
        let mut dev = 0.0f64;
        let mut out = vec![Mat2::ZERO; n];
        for i2 in 0..grid.n2 {
            for i3 in 0..grid.n3 {
                for iy in 0..grid.ny {
                    let k = grid.idx(i2, i3, iy);
                    if grid.is_face(i2, i3, iy) {
                        continue;
                    }
                    let proj = raw[k].herm_part().traceless_part();
                    dev = dev.max((raw[k] - proj).max_abs());
                    out[k] = proj + self.m[k].scale_re(t);
                }
            }
        }
        (out, dev)
    }
}

fn zero_faces(grid: &Grid3, f: &mut [Mat2]) {
    for i2 in 0..grid.n2 {
        for i3 in 0..grid.n3 {
            for iy in 0..grid.ny {
                if grid.is_face(i2, i3, iy) {
                    f[grid.idx(i2, i3, iy)] = Mat2::ZERO;
                }
            }
        }
    }
}

/// Jacobi-style diagonal estimate for the hat-frame Newton operator at
/// parameter t: leading stencil weights of the Laplacian plus the shift.
fn precond_diag(grid: &Grid3, t: f64) -> Vec<f64> {
    let mut d = vec![0.0f64; grid.len()];
    for i2 in 0..grid.n2 {
        for i3 in 0..grid.n3 {
            for iy in 0..grid.ny {
                let ym = grid.y_nodes[iy.saturating_sub(1)];
                let yp = grid.y_nodes[(iy + 1).min(grid.ny - 1)];
                let hm = (grid.y_nodes[iy] - ym).max(grid.hx2 * 1e-3);
                let hp = (yp - grid.y_nodes[iy]).max(grid.hx2 * 1e-3);
                let k = grid.idx(i2, i3, iy);
                d[k] = 2.0 / (grid.hx2 * grid.hx2)
                    + 2.0 / (grid.hx3 * grid.hx3)
                    + 2.0 / (hm * hp)
                    + t;
            }
        }
    }
    d
}

/// Damped-Newton solve of the continuation equation at a single t.
/// Returns (newton_iters, krylov_iters, final residual sup).
fn newton_at_t(state: &mut HatState, t: f64, tol: f64) -> Result<(usize, usize, f64)> {
    let grid = state.grid.clone();
    let n = grid.len();
    let diag = precond_diag(&grid, t);
    let precond = |r: &[Mat2], z: &mut [Mat2]| {
        for k in 0..n {
            z[k] = r[k].scale_re(1.0 / diag[k]);
        }
    };

    let max_newton = 60;
    let mut krylov_total = 0usize;
    let (mut f, dev0) = state.residual(t);
    state.max_projection_deviation = state.max_projection_deviation.max(dev0);
    let mut fnorm = field_max(&f);

    for it in 0..max_newton {
        if fnorm <= tol {
            return Ok((it, krylov_total, fnorm));
        }
        // Exact discrete Jacobian apply in the hat frame: the variation
        // H -> ghat^dag e^{eps d} ghat gives s' = ghat^{-1} d ghat and
        // J d = herm(ghat L_H(s') ghat^{-1}) + t d.
        let h = state.h_field();
        let lin = LinearizedMap::new(grid.clone(), h, state.phi.clone());
        let (g, gi) = state.ghat();
        let apply = |d: &[Mat2], out: &mut [Mat2]| {
            let sp: Vec<Mat2> = map_field(n, |k| gi[k] * d[k] * g[k]);
            let ls = lin.apply(&sp);
            for k in 0..n {
                out[k] = (g[k] * ls[k] * gi[k]).herm_part().traceless_part()
                    + d[k].scale_re(t);
            }
            zero_faces(&grid, out);
        };
        let rhs: Vec<Mat2> = f.iter().map(|m| -*m).collect();
        let mut delta = vec![Mat2::ZERO; n];
        // Inexact Newton: modest relative tolerance for the inner solve.
        let inner_tol = 1e-4;
        let stats = bicgstab(apply, &precond, &rhs, &mut delta, inner_tol)?;
        krylov_total += stats.iterations;
        zero_faces(&grid, &mut delta);

        // Armijo backtracking on the sup-residual.
        let m_save = state.m.clone();
        let mut lambda = 1.0f64;
        let mut accepted = false;
        for halving in 0..=30 {
            for k in 0..n {
                // multiplicative update in the hat frame:
                // e^{m_new} = e^{lam d / 2} e^{m_old} e^{lam d / 2}
                let step = delta[k].scale_re(0.5 * lambda).exp_traceless_herm();
                let e_old = m_save[k].exp_traceless_herm();
                let prod = step * e_old * step;
                state.m[k] = prod.log_det1_herm();
            }
            let (f_new, dev) = state.residual(t);
            let fnorm_new = field_max(&f_new);
            if fnorm_new <= (1.0 - 1e-4 * lambda) * fnorm {
                state.max_projection_deviation = state.max_projection_deviation.max(dev);
                f = f_new;
                fnorm = fnorm_new;
                accepted = true;
                break;
            }
            if halving == 30 {
                state.m = m_save.clone();
                return Err(EbeError::NewtonStall { halvings: 30, residual: fnorm });
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(EbeError::NewtonStall { halvings: 30, residual: fnorm });
        }
    }
    if fnorm <= tol {
        Ok((max_newton, krylov_total, fnorm))
    } else {
        Err(EbeError::NewtonStall { halvings: 0, residual: fnorm })
    }
}

/// Continuation solve: drives N_t(s) = Ad(e^{s/2}) M(H0 e^s) + t s to zero
/// along a decreasing schedule of t values ending at 0, warm-starting each
/// step from the previous solution. `init_s` optionally supplies a nonzero
/// initial correction (in the H0 frame).
pub fn continuity_solve(
    grid: Arc<Grid3>,
    data: &HolomorphicData,
    h0: &[Mat2],
    schedule: &[f64],
    init_s: Option<&[Mat2]>,
) -> Result<SolutionRecord> {
    check_metric(h0)?;
    let n = grid.len();
    let phi = phi_field(&grid, &data.p);

    let mut g0 = Vec::with_capacity(n);
    for m in h0 {
        g0.push(m.cholesky_upper().ok_or(EbeError::FactorizationFailure)?);
    }
    let g0_inv: Vec<Mat2> = map_field(n, |k| g0[k].inverse());

    let m0 = moment_map_with_phi(&grid, h0, &phi);
    let scale = sup_norm(&m0).max(1.0);
    let tol = 1e-8 * scale;

    let charge_report = charges(data)?;
    let points: Vec<C64> = charge_report.points.iter().map(|p| p.position_c()).collect();
    let wf = WeightFunctions::new(points, grid.y_min);

    let mut state = HatState {
        grid: grid.clone(),
        phi,
        g0,
        g0_inv,
        m: vec![Mat2::ZERO; n],
        wf,
        max_projection_deviation: 0.0,
    };
    if let Some(s0) = init_s {
        for k in 0..n {
            let raw = state.g0[k] * s0[k] * state.g0_inv[k];
            state.m[k] = raw.herm_part().traceless_part();
        }
        zero_faces(&grid, &mut state.m);
    }

    let mut states: Vec<SolveState> = vec![];
    let mut t_prev = schedule.first().copied().unwrap_or(1.0);
    let mut first = true;
    for &t_target in schedule {
        // Bisection insertion on stall: up to 5 intermediate t values
        // between the last good t and the target.
        let mut stack = vec![t_target];
        let mut insertions = 0usize;
        while let Some(t) = stack.last().copied() {
            match newton_at_t(&mut state, t, tol) {
                Ok((newton_iterations, krylov_iterations, residual_sup)) => {
                    let residual_weighted = {
                        let (f, _) = state.residual(t);
                        weighted_sup_norm(&grid, &f, &state.wf, -2.0, -1.0, -0.5)
                    };
                    states.push(SolveState {
                        t,
                        newton_iterations,
                        residual_sup,
                        residual_weighted,
                        krylov_iterations,
                        max_projection_deviation: state.max_projection_deviation,
                    });
                    t_prev = t;
                    stack.pop();
                }
                Err(EbeError::NewtonStall { residual, .. })
                | Err(EbeError::KrylovStall { relative_residual: residual, .. }) => {
                    insertions += 1;
                    if insertions > 5 || first {
                        return Err(EbeError::ContinuationStall { t, residual });
                    }
                    stack.push(0.5 * (t_prev + t));
                }
                Err(e) => return Err(e),
            }
        }
        first = false;
    }

    let h = state.h_field();
    let s: Vec<Mat2> = map_field(n, |k| {
        (state.g0_inv[k] * state.m[k] * state.g0[k]).traceless_part()
    });
    let final_residual = states.last().map(|s| s.residual_sup).unwrap_or(f64::NAN);
    let sup_rho_hat_s = weighted_sup_norm(&grid, &s, &state.wf, 0.0, 0.0, -1.0);
    let weighted_s = weighted_sup_norm(&grid, &s, &state.wf, 0.0, 1.0, 1.5);
    Ok(SolutionRecord {
        s,
        h,
        scale,
        final_residual,
        states,
        charge_report,
        sup_rho_hat_s,
        weighted_s,
    })
}

// ---------------------------------------------------------------------------
// Donaldson-style functional
// ---------------------------------------------------------------------------

/// 8-node Gauss-Legendre rule on [0, 1].
const GL8: [(f64, f64); 8] = [
    (0.019855071751231884, 0.05061426814518813),
    (0.10166676129318664, 0.11119051722668724),
    (0.2372337950418355, 0.15685332293894363),
    (0.40828267875217505, 0.18134189168918098),
    (0.5917173212478249, 0.18134189168918098),
    (0.7627662049581645, 0.15685332293894363),
    (0.8983332387068134, 0.11119051722668724),
    (0.9801449282487811, 0.05061426814518813),
];

/// Trapezoid quadrature weights per node (uniform in x2/x3, graded in y).
fn volume_weights(grid: &Grid3) -> Vec<f64> {
    let mut w = vec![0.0f64; grid.len()];
    let wx = |i: usize, n: usize, h: f64| -> f64 {
        if i == 0 || i == n - 1 {
            0.5 * h
        } else {
            h
        }
    };
    let mut wy = vec![0.0f64; grid.ny];
    for iy in 0..grid.ny {
        let lo = if iy == 0 { grid.y_nodes[0] } else { grid.y_nodes[iy - 1] };
        let hi = if iy == grid.ny - 1 {
            grid.y_nodes[grid.ny - 1]
        } else {
            grid.y_nodes[iy + 1]
        };
        wy[iy] = 0.5 * (hi - lo);
    }
    for i2 in 0..grid.n2 {
        for i3 in 0..grid.n3 {
            for iy in 0..grid.ny {
                w[grid.idx(i2, i3, iy)] = wx(i2, grid.n2, grid.hx2)
                    * wx(i3, grid.n3, grid.hx3)
                    * wy[iy];
            }
        }
    }
    w
}

fn integrate(weights: &[f64], f: &[f64]) -> f64 {
    weights.iter().zip(f.iter()).map(|(w, v)| w * v).sum()
}

/// Report of the energy functional between two metrics H = K e^s.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DonaldsonReport {
    pub f_value: f64,
    /// (t, dF/dt) samples along H_t = K e^{t s}
    pub df_dt: Vec<(f64, f64)>,
    /// (t, sum_i \int |D_i s|^2 at H_t) samples: the manifestly nonnegative
    /// part of the second derivative
    pub d2f_dt2: Vec<(f64, f64)>,
    /// boundary flux integrals (z-part, y-part) reported separately at the
    /// same t samples
    pub flux: Vec<(f64, f64, f64)>,
}

/// Energy functional F(H, K) for H = K e^s and its t-derivatives along
/// H_t = K e^{t s}.
pub fn donaldson(
    grid: &Grid3,
    p: &Polynomial,
    h: &[Mat2],
    k_metric: &[Mat2],
    t_samples: &[f64],
) -> Result<DonaldsonReport> {
    check_metric(h)?;
    check_metric(k_metric)?;
    let n = grid.len();
    let phi = phi_field(grid, p);
    let weights = volume_weights(grid);

    // factor K = k0^dag k0 and represent e^s through the plain Hermitian
    // log m of k0^{-dag} H k0^{-1}; then K e^{t s} = k0^dag e^{t m} k0.
    let mut k0 = Vec::with_capacity(n);
    for mm in k_metric {
        k0.push(mm.cholesky_upper().ok_or(EbeError::FactorizationFailure)?);
    }
    let k0_inv: Vec<Mat2> = map_field(n, |kk| k0[kk].inverse());
    let mut m = vec![Mat2::ZERO; n];
    for kk in 0..n {
        let a = k0_inv[kk].adjoint() * h[kk] * k0_inv[kk];
        let (l1, l2, _, _) = a.eig_herm();
        if l1 <= 0.0 || l2 <= 0.0 {
            return Err(EbeError::LogBranch);
        }
        m[kk] = a.log_det1_herm();
    }
    let s: Vec<Mat2> = map_field(n, |kk| k0_inv[kk] * m[kk] * k0[kk]);

    let h_at = |t: f64| -> Vec<Mat2> {
        map_field(n, |kk| {
            let e = m[kk].scale_re(t).exp_traceless_herm();
            k0[kk].adjoint() * e * k0[kk]
        })
    };
    // integrand of both F and dF/dt: <s, M(H_u)>_K = Re tr(M(H_u) s)
    let pairing = |hu: &[Mat2]| -> f64 {
        let mu = moment_map_with_phi(grid, hu, &phi);
        let f: Vec<f64> = (0..n).map(|kk| mu[kk].dot(&s[kk].adjoint())).collect();
        integrate(&weights, &f)
    };

    let mut f_value = 0.0;
    for (node, w) in GL8 {
        f_value += w * pairing(&h_at(node));
    }

    let mut df_dt = vec![];
    let mut d2f_dt2 = vec![];
    let mut flux = vec![];
    // operator derivative fields of s (holomorphic frame)
    let (del_s, delbar_s) = holo_derivs(grid, &s);
    let dy_s = d_y(grid, &s);
    for &t in t_samples {
        let ht = h_at(t);
        df_dt.push((t, pairing(&ht)));

        let hinv: Vec<Mat2> = map_field(n, |kk| ht[kk].inverse());
        // |X|^2 at the metric H_t: Re tr(X H^{-1} X^dag H)
        let nrm = |x: &Mat2, kk: usize| -> f64 {
            (*x * hinv[kk] * x.adjoint() * ht[kk]).trace().re
        };
        let mut quad = vec![0.0f64; n];
        let mut f1 = vec![Mat2::ZERO; n]; // placeholder for flux densities
        let mut f3 = vec![Mat2::ZERO; n];
        let (del_ht, _) = holo_derivs(grid, &ht);
        let dy_ht = d_y(grid, &ht);
        for kk in 0..n {
            let d2s = phi[kk].commutator(&s[kk]);
            quad[kk] = nrm(&delbar_s[kk], kk) + nrm(&d2s, kk) + nrm(&dy_s[kk], kk);
            // covariant (1,0) and y derivatives at H_t for the flux terms
            let a1 = hinv[kk] * del_ht[kk];
            let a3 = hinv[kk] * dy_ht[kk];
            let d1d = del_s[kk] + a1.commutator(&s[kk]);
            let d3d = dy_s[kk] + a3.commutator(&s[kk]);
            f1[kk] = Mat2([(d1d * s[kk]).trace(), C64::ZERO, C64::ZERO, C64::ZERO]);
            f3[kk] = Mat2([(d3d * s[kk]).trace(), C64::ZERO, C64::ZERO, C64::ZERO]);
        }
        d2f_dt2.push((t, integrate(&weights, &quad)));
        // total-derivative flux integrals, evaluated with the same stencils
        let df1 = delbar_field(grid, &f1);
        let df3 = d_y(grid, &f3);
        let g1: Vec<f64> = (0..n).map(|kk| df1[kk].0[0].re).collect();
        let g3: Vec<f64> = (0..n).map(|kk| df3[kk].0[0].re).collect();
        flux.push((t, integrate(&weights, &g1), integrate(&weights, &g3)));
    }

    Ok(DonaldsonReport { f_value, df_dt, d2f_dt2, flux })
}

// ---------------------------------------------------------------------------
// Extraction of the unitary fields
// ---------------------------------------------------------------------------

/// Unitary fields extracted from a metric through the nodewise factorization
/// H = g^dag g.
pub struct UnitaryTriple {
    pub a_zbar: Vec<Mat2>,
    pub a_z: Vec<Mat2>,
    pub phi_z: Vec<Mat2>,
    pub phi_1: Vec<Mat2>,
    /// sup of |A_zbar^dag + A_z| (should vanish for a unitary connection)
    pub anti_hermiticity: f64,
}

pub fn extract_triple(grid: &Grid3, h: &[Mat2], p: &Polynomial) -> Result<UnitaryTriple> {
    check_metric(h)?;
    let n = grid.len();
    let phi = phi_field(grid, p);
    let mut g = Vec::with_capacity(n);
    for m in h {
        g.push(m.cholesky_upper().ok_or(EbeError::FactorizationFailure)?);
    }
    let ginv: Vec<Mat2> = map_field(n, |k| g[k].inverse());
    let (_, delbar_g) = holo_derivs(grid, &g);
    let dy_g = d_y(grid, &g);
    let a_zbar: Vec<Mat2> = map_field(n, |k| -(delbar_g[k] * ginv[k]));
    // del(g^dag) is the adjoint of delbar(g) entrywise
    let a_z: Vec<Mat2> = map_field(n, |k| {
        ginv[k].adjoint() * delbar_g[k].adjoint()
    });
    let phi_z: Vec<Mat2> = map_field(n, |k| g[k] * phi[k] * ginv[k]);
    let phi_1: Vec<Mat2> = map_field(n, |k| {
        let x = -(dy_g[k] * ginv[k]);
        (x + x.adjoint()).scale(c(0.0, 0.5))
    });
    let mut anti = 0.0f64;
    for k in 0..n {
        anti = anti.max((a_zbar[k].adjoint() + a_z[k]).max_abs());
    }
    Ok(UnitaryTriple { a_zbar, a_z, phi_z, phi_1, anti_hermiticity: anti })
}

// ---------------------------------------------------------------------------
// Small-section boundary diagnostic
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct SmallSectionReport {
    /// (x2 transect value, fitted y-exponent of |g (Q,R)^T| on the lowest
    /// four layers)
    pub exponents: Vec<(f64, f64)>,
    pub median_exponent: f64,
}

/// Fit the vanishing rate in y of |g v(z)| on the lowest four y layers,
/// where H = g^dag g and v is a polynomial section. Samples a transect
/// along the x2 axis, skipping points within unit distance of a charge
/// point.
pub fn section_exponents(
    grid: &Grid3,
    h: &[Mat2],
    section: impl Fn(C64) -> (C64, C64),
    avoid: &[C64],
) -> Result<SmallSectionReport> {
    let i3 = grid.n3 / 2;
    let layers = 4.min(grid.ny);
    let mut exponents = vec![];
    for i2 in 0..grid.n2 {
        let z = grid.z_at(i2, i3);
        if avoid.iter().any(|&pq| (z - pq).norm() < 1.0) {
            continue;
        }
        // least squares slope of log|gv| against log y
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        let mut ok = true;
        for iy in 0..layers {
            let k = grid.idx(i2, i3, iy);
            let gm = h[k].cholesky_upper().ok_or(EbeError::FactorizationFailure)?;
            let (q, r) = section(z);
            let w1 = gm.0[0] * q + gm.0[1] * r;
            let w2 = gm.0[2] * q + gm.0[3] * r;
            let mag = (w1.norm_sqr() + w2.norm_sqr()).sqrt();
            if mag <= 0.0 {
                ok = false;
                break;
            }
            let lx = grid.y_nodes[iy].ln();
            let ly = mag.ln();
            sx += lx;
            sy += ly;
            sxx += lx * lx;
            sxy += lx * ly;
        }
        if !ok {
            continue;
        }
        let nn = layers as f64;
        let slope = (nn * sxy - sx * sy) / (nn * sxx - sx * sx);
        exponents.push((z.re, slope));
    }
    let mut vals: Vec<f64> = exponents.iter().map(|e| e.1).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_exponent = if vals.is_empty() {
        f64::NAN
    } else {
        vals[vals.len() / 2]
    };
    Ok(SmallSectionReport { exponents, median_exponent })
}

/// Vanishing-rate check for the distinguished section (Q, R)^T of the data.
pub fn small_section_check(
    grid: &Grid3,
    h: &[Mat2],
    data: &HolomorphicData,
) -> Result<SmallSectionReport> {
    let cs = charges(data)?;
    let avoid: Vec<C64> = cs.points.iter().map(|p| p.position_c()).collect();
    let q = data.q.clone();
    let r = data.r.clone();
    section_exponents(grid, h, move |z| (q.eval(z), r.eval(z)), &avoid)
}

// ---------------------------------------------------------------------------
// Pointwise energy identity check
// ---------------------------------------------------------------------------

/// Pointwise two-sided evaluation of the energy identity relating the
/// moment-map increment to a Laplacian of |s|^2 plus weighted first-order
/// squares:
///
///   <M(H0 e^s) - M(H0), s>_{H0}
///     = -1/2 lap |s|^2 + 1/2 (|v D1 s|^2 + |v D1' s|^2 + |v D3 s|^2
///       + |v D3' s|^2) + <gamma(ad) [phi, s], [phi, s]>
///
/// with v = sqrt((1 - e^{-ad})/ad) and gamma(d) = (e^d - 1)/d acting in the
/// eigenbasis of ad_s, primes denoting metric adjoints at H0. The Higgs
/// square is algebraically exact in s; the derivative squares are exact
/// through second order (and exact on commuting families), so for small s
/// the returned difference is dominated by stencil error.
///
/// `s_herm` is given in the "hat" frame of H0 = g0^dag g0 as a plain
/// traceless Hermitian field m; the H0-frame correction is s = g0^{-1} m g0
/// and H = g0^dag e^m g0. Returns the field LHS - RHS (faces zeroed).
pub fn inner_product_identity_check(
    grid: &Grid3,
    h0: &[Mat2],
    p: &Polynomial,
    m: &[Mat2],
) -> Result<Vec<f64>> {
    check_metric(h0)?;
    let n = grid.len();
    let phi = phi_field(grid, p);
    let mut g0 = Vec::with_capacity(n);
    for hm in h0 {
        g0.push(hm.cholesky_upper().ok_or(EbeError::FactorizationFailure)?);
    }
    let g0_inv: Vec<Mat2> = map_field(n, |k| g0[k].inverse());
    let h: Vec<Mat2> = map_field(n, |k| {
        g0[k].adjoint() * m[k].exp_traceless_herm() * g0[k]
    });
    let s: Vec<Mat2> = map_field(n, |k| g0_inv[k] * m[k] * g0[k]);

    let mm_h = moment_map_with_phi(grid, &h, &phi);
    let mm_h0 = moment_map_with_phi(grid, h0, &phi);

    // LHS: <M(H) - M(H0), s>_{H0} = Re tr((M(H)-M(H0)) s) since the metric
    // adjoint of s at H0 is s itself.
    let lhs: Vec<f64> = (0..n)
        .map(|k| ((mm_h[k] - mm_h0[k]) * s[k]).trace().re)
        .collect();

    // RHS pieces. |s|^2_{H0} = Re tr(s^2) = |m|^2 Frobenius.
    let ns: Vec<f64> = (0..n).map(|k| m[k].dot(&m[k])).collect();
    let lap_ns = crate::grid::laplacian(grid, &ns);

    let h0_inv: Vec<Mat2> = map_field(n, |k| h0[k].inverse());
    let (del_h0, _) = holo_derivs(grid, h0);
    let dy_h0 = d_y(grid, h0);
    let (del_s, delbar_s) = holo_derivs(grid, &s);
    let dy_s = d_y(grid, &s);

    let gamma_plus = |d: f64| -> f64 {
        if d.abs() < 1e-7 {
            1.0 + d / 2.0 + d * d / 6.0
        } else {
            (d.exp() - 1.0) / d
        }
    };

    let rhs: Vec<f64> = (0..n)
        .map(|k| {
            // transport H0-frame first-order pieces to the hat frame, where
            // the metric pairing is the plain Frobenius one and ad acts by
            // the Hermitian matrix m.
            let hat = |x: &Mat2| g0[k] * *x * g0_inv[k];
            let d1 = hat(&delbar_s[k]);
            let a1 = h0_inv[k] * del_h0[k];
            let d1p = hat(&(del_s[k] + a1.commutator(&s[k])));
            let d3 = hat(&dy_s[k]);
            let a3 = h0_inv[k] * dy_h0[k];
            let d3p = hat(&(dy_s[k] + a3.commutator(&s[k])));
            let d2 = hat(&phi[k].commutator(&s[k]));

            let vsq = |x: &Mat2| {
                let vx = v_of_s(&m[k], x);
                vx.dot(&vx)
            };
            let higgs = {
                let gx = apply_ad_function(&m[k], &d2, gamma_plus);
                gx.dot(&d2)
            };
            -0.5 * lap_ns[k]
                + 0.5 * (vsq(&d1) + vsq(&d1p) + vsq(&d3) + vsq(&d3p))
                + higgs
        })
        .collect();

    let mut out: Vec<f64> = (0..n).map(|k| lhs[k] - rhs[k]).collect();
    for i2 in 0..grid.n2 {
        for i3 in 0..grid.n3 {
            for iy in 0..grid.ny {
                if grid.is_face(i2, i3, iy) {
                    out[grid.idx(i2, i3, iy)] = 0.0;
                }
            }
        }
    }
    Ok(out)
}
