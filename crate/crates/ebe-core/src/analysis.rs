//! Independent verification oracles: the half-space Green's function for
//! Δ − t with the image-charge correction, a quadrature solver built on it,
//! log-log decay-rate fitting along rays, and the indicial-root table that
//! fixes the admissible boundary growth rates of the linearized operator.

use rayon::prelude::*;

use crate::error::{EbeError, Result};
use crate::grid::Grid3;

/// Indicial roots: the formal growth rates y^λ (resp. ρ^λ) admitted by the
/// normal operators of the linearization at boundary points.
#[derive(Clone, Copy, Debug)]
pub struct IndicialTable {
    /// roots at a zero-charge boundary point
    pub zero_charge_roots: [f64; 2],
    /// lower bound for the smallest spherical eigenvalue γ entering the
    /// charged-point root formula (the exact value is not pinned down here,
    /// only the bound)
    pub gamma_lower_bound: f64,
}

impl IndicialTable {
    pub fn standard() -> Self {
        IndicialTable {
            zero_charge_roots: [-1.0, 2.0],
            gamma_lower_bound: 2.0,
        }
    }

    /// Roots at a charged boundary point for spherical eigenvalue γ:
    /// −1/2 ± √(γ + 1/4), returned as (lower, upper).
    pub fn charged_roots(gamma: f64) -> (f64, f64) {
        let s = (gamma + 0.25).sqrt();
        (-0.5 - s, -0.5 + s)
    }

    /// The guaranteed-safe exponent window at a charged point, obtained by
    /// evaluating the root formula at the eigenvalue lower bound: any decay
    /// rate strictly inside this interval avoids all indicial roots.
    pub fn safe_window(&self) -> (f64, f64) {
        Self::charged_roots(self.gamma_lower_bound)
    }
}

/// Green's function of Δ − t on the half space y > 0 with Dirichlet
/// boundary: the free-space kernel minus its image across y = 0,
/// G_t(x,x') = e^{−√t|x−x'|}/(4π|x−x'|) − e^{−√t|x−x̄'|}/(4π|x−x̄'|).
pub fn greens_kernel(t: f64, x: [f64; 3], xp: [f64; 3]) -> Result<f64> {
    if t < 0.0 {
        return Err(EbeError::DomainError("t must be nonnegative".into()));
    }
    let scale = x.iter().chain(xp.iter()).fold(1.0f64, |m, v| m.max(v.abs()));
    let d = dist(x, xp);
    if d <= 1e-14 * scale {
        return Err(EbeError::CoincidentPoints);
    }
    let xbar = [xp[0], xp[1], -xp[2]];
    let db = dist(x, xbar);
    let st = t.sqrt();
    Ok(point_kernel(st, d) - point_kernel(st, db))
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn point_kernel(sqrt_t: f64, d: f64) -> f64 {
    (-sqrt_t * d).exp() / (4.0 * std::f64::consts::PI * d)
}

/// Trapezoid weights of the grid in each coordinate (half weight on the two
/// faces; the y spacing may be graded).
fn quad_weights(grid: &Grid3) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let edge = |nodes: &[f64]| -> Vec<f64> {
        let n = nodes.len();
        (0..n)
            .map(|i| {
                let lo = if i == 0 { nodes[0] } else { nodes[i - 1] };
                let hi = if i == n - 1 { nodes[n - 1] } else { nodes[i + 1] };
                0.5 * (hi - lo)
            })
            .collect()
    };
    (edge(&grid.x2_nodes), edge(&grid.x2_nodes), edge(&grid.y_nodes))
}

/// Trapezoid cell boxes per axis: node i owns [midpoint to previous node,
/// midpoint to next node], clipped at the outer faces.
fn axis_cells(nodes: &[f64]) -> Vec<(f64, f64)> {
    let n = nodes.len();
    (0..n)
        .map(|i| {
            let lo = if i == 0 { nodes[0] } else { 0.5 * (nodes[i - 1] + nodes[i]) };
            let hi = if i == n - 1 { nodes[n - 1] } else { 0.5 * (nodes[i] + nodes[i + 1]) };
            (lo, hi)
        })
        .collect()
}

// near-field refinement parameters for the t = 0 quadrature: source cells
// within this index distance of the target are subdivided this many times
// per axis and summed by the midpoint rule
const NEAR_CELLS: usize = 2;
const SUBDIV: usize = 4;

/// Quadrature solution of (t − Δ) u = f on the half space with u = 0 at
/// y = 0 and decay at infinity (the kernel is the fundamental solution of
/// t − Δ with Dirichlet image): u(x) = Σ f(x') G_t(x,x') w(x') over the grid
/// nodes. For t > 0 the singularity is removed by subtraction against the
/// exact identity ∫ G_t(x,·) = (1 − e^{−√t y})/t; for t = 0 that integral
/// diverges, so cells near the target are instead subdivided and summed by
/// the midpoint rule, which also controls the 1/r curvature error on the
/// neighbouring cells. `f` must be compactly supported well inside the grid
/// for the truncated sum to be meaningful.
pub fn greens_solve(grid: &Grid3, t: f64, f: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(f.len(), grid.len());
    if t < 0.0 {
        return Err(EbeError::DomainError("t must be nonnegative".into()));
    }
    let (w2, w3, wy) = quad_weights(grid);
    let st = t.sqrt();
    let subtract = t > 0.0;
    let cells2 = axis_cells(&grid.x2_nodes);
    let cellsy = axis_cells(&grid.y_nodes);

    // flattened source list with weights and positions, in fixed order
    let mut src = Vec::with_capacity(grid.len());
    for i2 in 0..grid.n2 {
        for i3 in 0..grid.n3 {
            for iy in 0..grid.ny {
                let k = grid.idx(i2, i3, iy);
                let (x2, x3, y) = grid.node(i2, i3, iy);
                src.push(([x2, x3, y], f[k] * w2[i2] * w3[i3] * wy[iy], w2[i2] * w3[i3] * wy[iy]));
            }
        }
    }

    let u: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let tiy = k % grid.ny;
            let ti3 = (k / grid.ny) % grid.n3;
            let ti2 = k / (grid.ny * grid.n3);
            let (x2, x3, y) = grid.node(ti2, ti3, tiy);
            let xt = [x2, x3, y];
            let fk = f[k];
            // u(x) = f(x) I(y) + Σ w (f(x') − f(x)) G_t: the integrand
            // vanishes at the singular point and the linear vanishing in y
            // is carried by the analytic part I(y) = (1 − e^{−√t y})/t
            let mut acc = if subtract {
                fk * (1.0 - (-st * y).exp()) / t
            } else {
                0.0
            };
            for (j, &(xs, fw, vol)) in src.iter().enumerate() {
                let jiy = j % grid.ny;
                let ji3 = (j / grid.ny) % grid.n3;
                let ji2 = j / (grid.ny * grid.n3);
                let near = ji2.abs_diff(ti2) <= NEAR_CELLS
                    && ji3.abs_diff(ti3) <= NEAR_CELLS
                    && jiy.abs_diff(tiy) <= NEAR_CELLS;
                if subtract {
                    if j == k {
                        continue;
                    }
                    let d = dist(xt, xs);
                    let db = dist(xt, [xs[0], xs[1], -xs[2]]);
                    acc += (fw - fk * vol) * (point_kernel(st, d) - point_kernel(st, db));
                } else if near {
                    // midpoint rule over SUBDIV³ subcells of the trapezoid
                    // cell box; subcell centers never hit the target node
                    let b2 = cells2[ji2];
                    let b3 = cells2[ji3];
                    let by = cellsy[jiy];
                    let h2 = (b2.1 - b2.0) / SUBDIV as f64;
                    let h3 = (b3.1 - b3.0) / SUBDIV as f64;
                    let hy = (by.1 - by.0) / SUBDIV as f64;
                    let fj = if vol > 0.0 { fw / vol } else { 0.0 };
                    let mut cell = 0.0;
                    for a in 0..SUBDIV {
                        let sx = b2.0 + (a as f64 + 0.5) * h2;
                        for bq in 0..SUBDIV {
                            let sy3 = b3.0 + (bq as f64 + 0.5) * h3;
                            for cq in 0..SUBDIV {
                                let syy = by.0 + (cq as f64 + 0.5) * hy;
                                let d = dist(xt, [sx, sy3, syy]);
                                let db = dist(xt, [sx, sy3, -syy]);
                                cell += point_kernel(st, d) - point_kernel(st, db);
                            }
                        }
                    }
                    acc += fj * cell * h2 * h3 * hy;
                } else {
                    let d = dist(xt, xs);
                    let db = dist(xt, [xs[0], xs[1], -xs[2]]);
                    acc += fw * (point_kernel(st, d) - point_kernel(st, db));
                }
            }
            acc
        })
        .collect();
    Ok(u)
}

/// Which coordinate a decay fit uses as abscissa.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RayVariable {
    /// distance ρ along a straight ray from the origin (outer log-third)
    Radial,
    /// height y along a vertical line (lower log-third)
    Height,
}

/// Result of a log-log decay fit along a ray.
#[derive(Clone, Copy, Debug)]
pub struct DecayFit {
    /// fitted slope of log|field| against log ρ (or log y)
    pub exponent: f64,
    /// root-mean-square residual of the fit
    pub fit_residual: f64,
    /// decades of field magnitude spanned by the fitted samples
    pub decades: f64,
}

const RAY_SAMPLES: usize = 24;

/// Least-squares slope of log|field| versus log of the ray parameter.
/// `Radial`: samples t·dir for a direction `dir` pointing into the domain,
/// fitting the outer log-third of the reachable range. `Height`: samples a
/// vertical line above (dir[0], dir[1]), fitting the lower log-third.
pub fn decay_fit(
    grid: &Grid3,
    field: &[f64],
    dir: [f64; 3],
    variable: RayVariable,
) -> Result<DecayFit> {
    assert_eq!(field.len(), grid.len());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    match variable {
        RayVariable::Radial => {
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            if norm == 0.0 || dir[2] <= 0.0 {
                return Err(EbeError::DomainError(
                    "ray direction must point into y > 0".into(),
                ));
            }
            let d = [dir[0] / norm, dir[1] / norm, dir[2] / norm];
            // largest and smallest parameters keeping the point in the grid
            let mut t_max = (grid.y_max / d[2]).min(f64::INFINITY);
            for i in 0..2 {
                if d[i].abs() > 0.0 {
                    t_max = t_max.min(grid.l / d[i].abs());
                }
            }
            let t_min = grid.y_min / d[2];
            if !(t_max > t_min && t_min > 0.0) {
                return Err(EbeError::DomainError("empty ray range".into()));
            }
            // outer log-third
            let lo = t_min.powf(1.0 / 3.0) * t_max.powf(2.0 / 3.0);
            for j in 0..RAY_SAMPLES {
                let s = j as f64 / (RAY_SAMPLES - 1) as f64;
                let t = lo * (t_max / lo).powf(s);
                let v = crate::grid::sample_trilinear(grid, field, t * d[0], t * d[1], t * d[2]);
                if v.abs() > 0.0 {
                    xs.push(t.ln());
                    ys.push(v.abs().ln());
                }
            }
        }
        RayVariable::Height => {
            let (x2, x3) = (dir[0], dir[1]);
            if x2.abs() > grid.l || x3.abs() > grid.l {
                return Err(EbeError::DomainError("base point outside grid".into()));
            }
            // lower log-third
            let hi = grid.y_max.powf(1.0 / 3.0) * grid.y_min.powf(2.0 / 3.0);
            for j in 0..RAY_SAMPLES {
                let s = j as f64 / (RAY_SAMPLES - 1) as f64;
                let y = grid.y_min * (hi / grid.y_min).powf(s);
                let v = crate::grid::sample_trilinear(grid, field, x2, x3, y);
                if v.abs() > 0.0 {
                    xs.push(y.ln());
                    ys.push(v.abs().ln());
                }
            }
        }
    }
    let range = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let decades = range / std::f64::consts::LN_10;
    if xs.len() < 4 || !decades.is_finite() || decades < 1.0 {
        return Err(EbeError::InsufficientDynamicRange {
            decades: if decades.is_finite() { decades } else { 0.0 },
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    let slope = num / den;
    let mut ss = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let r = y - my - slope * (x - mx);
        ss += r * r;
    }
    Ok(DecayFit {
        exponent: slope,
        fit_residual: (ss / n).sqrt(),
        decades,
    })
}

/// Report of the a priori decay bound for the quadrature solution of
/// (t − Δ) u = f: if f decays
/// like ρ^{−(4+2β)} then u decays like ρ^{−2} for t = 0 and like
/// ρ^{−(2+2β')} for every β' < β when t > 0, vanishing linearly in y at the
/// boundary.
#[derive(Clone, Copy, Debug)]
pub struct AprioriReport {
    /// fitted log-log slope of |f| along a 45-degree ray
    pub f_exponent: f64,
    /// fitted log-log slope of |u| along the same ray
    pub u_exponent: f64,
    /// decay rate the bound promises (2 for t = 0, else 2 + 2β)
    pub claimed_exponent: f64,
    /// fitted slope of log|u| against log y near the boundary
    pub boundary_slope: f64,
    /// sup over interior nodes of |u| · (1 + ρ²)^{claimed/2}
    pub constant: f64,
    /// claimed rate met within 0.3 and boundary slope within 0.2 of linear
    pub satisfied: bool,
}

/// Measure the decay of a quadrature solution `u` of (t − Δ) u = f against
/// the rate promised by the half-space a priori bound.
pub fn apriori_decay_check(
    grid: &Grid3,
    t: f64,
    f: &[f64],
    u: &[f64],
) -> Result<AprioriReport> {
    let ray = [std::f64::consts::FRAC_1_SQRT_2, 0.0, std::f64::consts::FRAC_1_SQRT_2];
    let f_fit = decay_fit(grid, f, ray, RayVariable::Radial)?;
    let u_fit = decay_fit(grid, u, ray, RayVariable::Radial)?;
    let beta = ((-f_fit.exponent - 4.0) / 2.0).max(0.0);
    let claimed = if t > 0.0 { 2.0 + 2.0 * beta } else { 2.0 };
    let b_fit = decay_fit(grid, u, [0.5 * grid.l, 0.0, 0.0], RayVariable::Height)?;

    let mut constant = 0.0f64;
    for i2 in 1..grid.n2 - 1 {
        for i3 in 1..grid.n3 - 1 {
            for iy in 1..grid.ny - 1 {
                let (x2, x3, y) = grid.node(i2, i3, iy);
                let rho2 = x2 * x2 + x3 * x3 + y * y;
                let v = u[grid.idx(i2, i3, iy)].abs();
                constant = constant.max(v * (1.0 + rho2).powf(0.5 * claimed));
            }
        }
    }
    let satisfied =
        -u_fit.exponent >= claimed - 0.3 && (b_fit.exponent - 1.0).abs() <= 0.2;
    Ok(AprioriReport {
        f_exponent: f_fit.exponent,
        u_exponent: u_fit.exponent,
        claimed_exponent: claimed,
        boundary_slope: b_fit.exponent,
        constant,
        satisfied,
    })
}
