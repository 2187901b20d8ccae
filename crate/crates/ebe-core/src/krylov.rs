//! Matrix-free Krylov solvers over grid fields.
//!
//! The solvers are generic over the node value type (`f64`, complex, or 2x2
//! matrices) through the [`LinVal`](crate::grid::LinVal) trait. All reductions
//! are serial left-to-right sums so that iteration counts and results are
//! bit-reproducible for fixed inputs regardless of thread count.

use crate::error::{EbeError, Result};
use crate::grid::LinVal;

/// Serial inner product of two fields.
pub fn field_dot<T: LinVal>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.dot(y)).sum()
}

/// Euclidean norm of a field.
pub fn field_norm<T: LinVal>(a: &[T]) -> f64 {
    field_dot(a, a).max(0.0).sqrt()
}

/// Sup of `abs_size` over a field.
pub fn field_max<T: LinVal>(a: &[T]) -> f64 {
    a.iter().map(|x| x.abs_size()).fold(0.0, f64::max)
}

/// y <- y + w * x
pub fn field_axpy<T: LinVal>(y: &mut [T], w: f64, x: &[T]) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        yi.axpy(w, *xi);
    }
}

/// Iteration cap used by all Krylov loops: generous for small systems,
/// sublinear in the unknown count for large ones.
pub fn iteration_cap(n_unknowns: usize) -> usize {
    (10.0 * (n_unknowns as f64).cbrt()).ceil().max(500.0) as usize
}

/// Outcome of a converged Krylov solve.
#[derive(Debug, Clone, Copy)]
pub struct KrylovStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Preconditioned conjugate gradients for a symmetric positive definite
/// operator given as a closure `apply(x, out)`. The preconditioner is a
/// pointwise positive scale `precond` (Jacobi-style): `z = precond .* r`.
///
/// Solves to `|A x - b| <= tol * |b|`. Returns the solution in `x` (which also
/// provides the initial guess).
pub fn pcg<T, A, P>(apply: A, precond: P, b: &[T], x: &mut [T], tol: f64) -> Result<KrylovStats>
where
    T: LinVal,
    A: Fn(&[T], &mut [T]),
    P: Fn(&[T], &mut [T]),
{
    let n = b.len();
    let bnorm = field_norm(b);
    if bnorm == 0.0 {
        for xi in x.iter_mut() {
            *xi = T::zero();
        }
        return Ok(KrylovStats { iterations: 0, relative_residual: 0.0 });
    }
    let cap = iteration_cap(n);

    let mut r = vec![T::zero(); n];
    let mut z = vec![T::zero(); n];
    let mut p = vec![T::zero(); n];
    let mut ap = vec![T::zero(); n];

    apply(x, &mut r);
    for i in 0..n {
        let mut ri = b[i];
        ri.axpy(-1.0, r[i]);
        r[i] = ri;
    }
    precond(&r, &mut z);
    p.copy_from_slice(&z);
    let mut rz = field_dot(&r, &z);
    let mut rnorm = field_norm(&r);

    for it in 0..cap {
        if rnorm <= tol * bnorm {
            return Ok(KrylovStats { iterations: it, relative_residual: rnorm / bnorm });
        }
        apply(&p, &mut ap);
        let pap = field_dot(&p, &ap);
        if !(pap > 0.0) {
            // Loss of positive-definiteness (or stagnation); report a stall
            // so the caller can switch to the least-squares fallback.
            return Err(EbeError::KrylovStall {
                iterations: it,
                relative_residual: rnorm / bnorm,
            });
        }
        let alpha = rz / pap;
        field_axpy(x, alpha, &p);
        field_axpy(&mut r, -alpha, &ap);
        precond(&r, &mut z);
        let rz_new = field_dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            let mut pi = z[i];
            pi.axpy(beta, p[i]);
            p[i] = pi;
        }
        rnorm = field_norm(&r);
    }
    if rnorm <= tol * bnorm {
        return Ok(KrylovStats { iterations: cap, relative_residual: rnorm / bnorm });
    }
    Err(EbeError::KrylovStall { iterations: cap, relative_residual: rnorm / bnorm })
}

/// Right-preconditioned BiCGStab for a general (possibly nonsymmetric or
/// indefinite) operator. Used as the fallback when plain PCG detects loss of
/// positive-definiteness: second-order face stencils break the symmetry of
/// the discrete linearized operator near the boundary.
pub fn bicgstab<T, A, P>(apply: A, precond: P, b: &[T], x: &mut [T], tol: f64) -> Result<KrylovStats>
where
    T: LinVal,
    A: Fn(&[T], &mut [T]),
    P: Fn(&[T], &mut [T]),
{
    let n = b.len();
    let bnorm = field_norm(b);
    if bnorm == 0.0 {
        for xi in x.iter_mut() {
            *xi = T::zero();
        }
        return Ok(KrylovStats { iterations: 0, relative_residual: 0.0 });
    }
    let cap = 4 * iteration_cap(n);

    let mut r = vec![T::zero(); n];
    apply(x, &mut r);
    for i in 0..n {
        let mut ri = b[i];
        ri.axpy(-1.0, r[i]);
        r[i] = ri;
    }
    let r_shadow = r.clone();
    let mut rho = 1.0f64;
    let mut alpha = 1.0f64;
    let mut omega = 1.0f64;
    let mut p = vec![T::zero(); n];
    let mut v = vec![T::zero(); n];
    let mut phat = vec![T::zero(); n];
    let mut shat = vec![T::zero(); n];
    let mut t = vec![T::zero(); n];
    let mut rnorm = field_norm(&r);

    for it in 0..cap {
        if rnorm <= tol * bnorm {
            return Ok(KrylovStats { iterations: it, relative_residual: rnorm / bnorm });
        }
        let rho_new = field_dot(&r_shadow, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return Err(EbeError::KrylovStall {
                iterations: it,
                relative_residual: rnorm / bnorm,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            let mut pi = r[i];
            let mut pv = p[i];
            pv.axpy(-omega, v[i]);
            pi.axpy(beta, pv);
            p[i] = pi;
        }
        precond(&p, &mut phat);
        apply(&phat, &mut v);
        let denom = field_dot(&r_shadow, &v);
        if denom == 0.0 {
            return Err(EbeError::KrylovStall {
                iterations: it,
                relative_residual: rnorm / bnorm,
            });
        }
        alpha = rho / denom;
        // s = r - alpha v (reuse r)
        field_axpy(&mut r, -alpha, &v);
        let snorm = field_norm(&r);
        if snorm <= tol * bnorm {
            field_axpy(x, alpha, &phat);
            return Ok(KrylovStats { iterations: it + 1, relative_residual: snorm / bnorm });
        }
        precond(&r, &mut shat);
        apply(&shat, &mut t);
        let tt = field_dot(&t, &t);
        if tt == 0.0 {
            return Err(EbeError::KrylovStall {
                iterations: it,
                relative_residual: rnorm / bnorm,
            });
        }
        omega = field_dot(&t, &r) / tt;
        field_axpy(x, alpha, &phat);
        field_axpy(x, omega, &shat);
        field_axpy(&mut r, -omega, &t);
        rnorm = field_norm(&r);
    }
    if rnorm <= tol * bnorm {
        return Ok(KrylovStats { iterations: cap, relative_residual: rnorm / bnorm });
    }
    Err(EbeError::KrylovStall { iterations: cap, relative_residual: rnorm / bnorm })
}

/// PCG with automatic BiCGStab fallback on indefiniteness.
pub fn solve_spd_or_fallback<T, A, P>(
    apply: A,
    precond: P,
    b: &[T],
    x: &mut [T],
    tol: f64,
) -> Result<KrylovStats>
where
    T: LinVal,
    A: Fn(&[T], &mut [T]),
    P: Fn(&[T], &mut [T]),
{
    let x0: Vec<T> = x.to_vec();
    match pcg(&apply, &precond, b, x, tol) {
        Ok(stats) => Ok(stats),
        Err(EbeError::KrylovStall { .. }) => {
            x.copy_from_slice(&x0);
            bicgstab(&apply, &precond, b, x, tol)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Dense symmetric apply for fabricated test instances.
    fn dense_apply(m: &[Vec<f64>]) -> impl Fn(&[f64], &mut [f64]) + '_ {
        move |x: &[f64], out: &mut [f64]| {
            for (i, row) in m.iter().enumerate() {
                out[i] = row.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            }
        }
    }

    fn identity_precond(r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }

    fn spd_instance(n: usize, seed: u64) -> Vec<Vec<f64>> {
        // A = B^T B + n I from a deterministic pseudo-random B.
        let mut state = seed;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state as f64 / u64::MAX as f64) - 0.5
        };
        let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| next()).collect()).collect();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = (0..n).map(|k| b[k][i] * b[k][j]).sum::<f64>();
            }
            a[i][i] += n as f64;
        }
        a
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let a = spd_instance(8, 3);
        let mut x = vec![1.0; 8];
        let stats = pcg(dense_apply(&a), identity_precond, &vec![0.0; 8], &mut x, 1e-12).unwrap();
        assert_eq!(stats.iterations, 0);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_operator_returns_rhs() {
        let apply = |x: &[f64], out: &mut [f64]| out.copy_from_slice(x);
        let b: Vec<f64> = (0..17).map(|i| (i as f64).sin()).collect();
        let mut x = vec![0.0; 17];
        let stats = pcg(apply, identity_precond, &b, &mut x, 1e-14).unwrap();
        assert!(stats.iterations <= 2);
        for (xi, bi) in x.iter().zip(b.iter()) {
            assert!((xi - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn spd_solve_monotone_residual() {
        // Monotone decrease of the residual in the preconditioned norm is a
        // structural property of CG; check it on a fabricated SPD instance by
        // re-running with increasing iteration budgets.
        let n = 24;
        let a = spd_instance(n, 11);
        let b: Vec<f64> = (0..n).map(|i| ((3 * i + 1) as f64).cos()).collect();
        let apply = dense_apply(&a);
        let jacobi = |r: &[f64], z: &mut [f64]| {
            for i in 0..r.len() {
                z[i] = r[i] / a[i][i];
            }
        };

        // Full solve first.
        let mut x = vec![0.0; n];
        let stats = pcg(&apply, &jacobi, &b, &mut x, 1e-10).unwrap();
        assert!(stats.relative_residual <= 1e-10);

        // Track residuals across a manual CG run (identity preconditioner so
        // preconditioned norm = Euclidean norm).
        let mut x = vec![0.0; n];
        let mut r = b.clone();
        let mut p = r.clone();
        let mut norms = vec![field_norm(&r)];
        let mut ap = vec![0.0; n];
        let mut rr = field_dot(&r, &r);
        for _ in 0..n {
            apply(&p, &mut ap);
            let alpha = rr / field_dot(&p, &ap);
            field_axpy(&mut x, alpha, &p);
            field_axpy(&mut r, -alpha, &ap);
            let rr_new = field_dot(&r, &r);
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            norms.push(field_norm(&r));
        }
        for w in norms.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "residual increased: {:?}", w);
        }
    }

    #[test]
    fn indefinite_falls_back_to_bicgstab() {
        // Symmetric indefinite diagonal operator.
        let n = 12;
        let d: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 2.0 } else { -3.0 }).collect();
        let apply = |x: &[f64], out: &mut [f64]| {
            for i in 0..n {
                out[i] = d[i] * x[i];
            }
        };
        let b: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0).sqrt()).collect();
        let mut x = vec![0.0; n];
        let stats =
            solve_spd_or_fallback(apply, identity_precond, &b, &mut x, 1e-12).unwrap();
        assert!(stats.relative_residual <= 1e-12);
        for i in 0..n {
            assert!((x[i] - b[i] / d[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn bicgstab_solves_nonsymmetric() {
        // Upper bidiagonal operator: nonsymmetric, well conditioned.
        let n = 16;
        let apply = |x: &[f64], out: &mut [f64]| {
            for i in 0..n {
                out[i] = 3.0 * x[i] + if i + 1 < n { x[i + 1] } else { 0.0 };
            }
        };
        let x_true: Vec<f64> = (0..n).map(|i| ((2 * i) as f64).sin()).collect();
        let mut b = vec![0.0; n];
        apply(&x_true, &mut b);
        let mut x = vec![0.0; n];
        let stats = bicgstab(apply, identity_precond, &b, &mut x, 1e-12).unwrap();
        assert!(stats.relative_residual <= 1e-12);
        for i in 0..n {
            assert!((x[i] - x_true[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn stall_reports_iteration_cap() {
        // An operator that annihilates most of the space cannot reduce the
        // residual below the component it kills.
        let n = 10;
        let apply = |x: &[f64], out: &mut [f64]| {
            out.copy_from_slice(x);
            out[0] = 0.0;
        };
        let mut b = vec![0.0; n];
        b[0] = 1.0;
        let mut x = vec![0.0; n];
        let err = pcg(apply, identity_precond, &b, &mut x, 1e-10).unwrap_err();
        match err {
            EbeError::KrylovStall { relative_residual, .. } => {
                assert!(relative_residual > 0.5);
            }
            other => panic!("unexpected error: {other}"),
        }
    }
}
