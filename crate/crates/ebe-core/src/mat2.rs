//! 2x2 complex matrices with the closed forms needed for su(2)-bundle metrics:
//! Hermitian exponentials/logarithms, Cholesky factors and the gamma operator
//! of the linearization.

use num_complex::Complex64;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

pub type C64 = Complex64;

pub const fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Row-major 2x2 complex matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat2(pub [C64; 4]);

impl Mat2 {
    pub const ZERO: Mat2 = Mat2([c(0.0, 0.0); 4]);
    pub const IDENTITY: Mat2 = Mat2([c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);

    pub fn new(a: C64, b: C64, cc: C64, d: C64) -> Mat2 {
        Mat2([a, b, cc, d])
    }

    pub fn diag(a: C64, d: C64) -> Mat2 {
        Mat2([a, C64::ZERO, C64::ZERO, d])
    }

    pub fn entries(&self) -> &[C64; 4] {
        &self.0
    }

    pub fn trace(&self) -> C64 {
        self.0[0] + self.0[3]
    }

    pub fn det(&self) -> C64 {
        self.0[0] * self.0[3] - self.0[1] * self.0[2]
    }

    pub fn adjoint(&self) -> Mat2 {
        Mat2([
            self.0[0].conj(),
            self.0[2].conj(),
            self.0[1].conj(),
            self.0[3].conj(),
        ])
    }

    pub fn inverse(&self) -> Mat2 {
        let d = self.det();
        Mat2([
            self.0[3] / d,
            -self.0[1] / d,
            -self.0[2] / d,
            self.0[0] / d,
        ])
    }

    pub fn scale(&self, s: C64) -> Mat2 {
        Mat2([self.0[0] * s, self.0[1] * s, self.0[2] * s, self.0[3] * s])
    }

    pub fn scale_re(&self, s: f64) -> Mat2 {
        self.scale(c(s, 0.0))
    }

    pub fn commutator(&self, other: &Mat2) -> Mat2 {
        *self * *other - *other * *self
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Hermitian part (A + A^dag)/2.
    pub fn herm_part(&self) -> Mat2 {
        (*self + self.adjoint()).scale_re(0.5)
    }

    /// Remove the trace: A - tr(A)/2 I.
    pub fn traceless_part(&self) -> Mat2 {
        let t = self.trace() * c(0.5, 0.0);
        Mat2([self.0[0] - t, self.0[1], self.0[2], self.0[3] - t])
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        (*self - self.adjoint()).max_abs() <= tol
    }

    /// exp of a traceless Hermitian matrix, via s^2 = m^2 I.
    pub fn exp_traceless_herm(&self) -> Mat2 {
        let m2 = (self.0[0] * self.0[0] + self.0[1] * self.0[2]).re.max(0.0);
        let m = m2.sqrt();
        let (ch, shc) = if m < 1e-8 {
            (1.0 + m2 / 2.0 + m2 * m2 / 24.0, 1.0 + m2 / 6.0)
        } else {
            (m.cosh(), m.sinh() / m)
        };
        Mat2::IDENTITY.scale_re(ch) + self.scale_re(shc)
    }

    /// Principal log of a Hermitian positive-definite matrix with det = 1.
    /// Result is traceless Hermitian.
    pub fn log_det1_herm(&self) -> Mat2 {
        let half_tr = (self.trace().re) / 2.0;
        let s = self.traceless_part();
        let m2 = (s.0[0] * s.0[0] + s.0[1] * s.0[2]).re.max(0.0);
        let m = m2.sqrt();
        // eigenvalues half_tr +- m, product 1; log eigenvalues +- theta
        let f = if m < 1e-8 {
            // theta/m with theta = arccosh(half_tr), half_tr = sqrt(1+m^2)
            1.0 - m2 / 6.0
        } else {
            let theta = (half_tr + m).ln();
            theta / m
        };
        s.scale_re(f)
    }

    /// Upper-triangular Cholesky-type factor g with positive diagonal such
    /// that H = g^dag g, for Hermitian positive definite H.
    pub fn cholesky_upper(&self) -> Option<Mat2> {
        let h11 = self.0[0].re;
        if h11 <= 0.0 {
            return None;
        }
        let a = h11.sqrt();
        let b = self.0[1] / a;
        let c22 = self.0[3].re - b.norm_sqr();
        if c22 <= 0.0 {
            return None;
        }
        Some(Mat2([c(a, 0.0), b, C64::ZERO, c(c22.sqrt(), 0.0)]))
    }

    /// Eigen-decomposition of a Hermitian matrix: returns (λ1, λ2, v1, v2)
    /// with orthonormal eigenvectors.
    pub fn eig_herm(&self) -> (f64, f64, [C64; 2], [C64; 2]) {
        let a = self.0[0].re;
        let b = self.0[1];
        let d = self.0[3].re;
        let half = (a + d) / 2.0;
        let q = ((a - d) / 2.0).hypot(b.norm());
        let l1 = half + q;
        let l2 = half - q;
        if b.norm() < 1e-300 {
            if a >= d {
                return (l1, l2, [c(1.0, 0.0), C64::ZERO], [C64::ZERO, c(1.0, 0.0)]);
            } else {
                return (l1, l2, [C64::ZERO, c(1.0, 0.0)], [c(1.0, 0.0), C64::ZERO]);
            }
        }
        // eigenvector for l1: (b, l1 - a)
        let v1 = [b, c(l1 - a, 0.0)];
        let n1 = (v1[0].norm_sqr() + v1[1].norm_sqr()).sqrt();
        let v1 = [v1[0] / n1, v1[1] / n1];
        // orthogonal complement
        let v2 = [-v1[1].conj(), v1[0].conj()];
        (l1, l2, v1, v2)
    }

    /// Fractional power H^w of a Hermitian positive-definite matrix.
    pub fn powf_herm(&self, w: f64) -> Mat2 {
        let (l1, l2, v1, v2) = self.eig_herm();
        let p1 = l1.powf(w);
        let p2 = l2.powf(w);
        let mut out = Mat2::ZERO;
        for (p, v) in [(p1, v1), (p2, v2)] {
            out.0[0] += v[0] * v[0].conj() * p;
            out.0[1] += v[0] * v[1].conj() * p;
            out.0[2] += v[1] * v[0].conj() * p;
            out.0[3] += v[1] * v[1].conj() * p;
        }
        out
    }

    /// Real Frobenius pairing Re tr(A B^dag).
    pub fn dot(&self, other: &Mat2) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(x, y)| (x * y.conj()).re)
            .sum()
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    fn add(self, rhs: Mat2) -> Mat2 {
        Mat2([
            self.0[0] + rhs.0[0],
            self.0[1] + rhs.0[1],
            self.0[2] + rhs.0[2],
            self.0[3] + rhs.0[3],
        ])
    }
}

impl AddAssign for Mat2 {
    fn add_assign(&mut self, rhs: Mat2) {
        for i in 0..4 {
            self.0[i] += rhs.0[i];
        }
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, rhs: Mat2) -> Mat2 {
        Mat2([
            self.0[0] - rhs.0[0],
            self.0[1] - rhs.0[1],
            self.0[2] - rhs.0[2],
            self.0[3] - rhs.0[3],
        ])
    }
}

impl Neg for Mat2 {
    type Output = Mat2;
    fn neg(self) -> Mat2 {
        self.scale_re(-1.0)
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, rhs: Mat2) -> Mat2 {
        let a = &self.0;
        let b = &rhs.0;
        Mat2([
            a[0] * b[0] + a[1] * b[2],
            a[0] * b[1] + a[1] * b[3],
            a[2] * b[0] + a[3] * b[2],
            a[2] * b[1] + a[3] * b[3],
        ])
    }
}

/// Apply the operator gamma(-s) = (1 - e^{-ad_s})/ad_s to u, for traceless
/// Hermitian s. Acts diagonally in the eigenbasis of ad_s.
pub fn gamma_minus(s: &Mat2, u: &Mat2) -> Mat2 {
    apply_ad_function(s, u, |d| {
        if d.abs() < 1e-7 {
            1.0 - d / 2.0 + d * d / 6.0
        } else {
            (1.0 - (-d).exp()) / d
        }
    })
}

/// Apply v(s) = sqrt(gamma(-s)) to u.
pub fn v_of_s(s: &Mat2, u: &Mat2) -> Mat2 {
    apply_ad_function(s, u, |d| {
        let g = if d.abs() < 1e-7 {
            1.0 - d / 2.0 + d * d / 6.0
        } else {
            (1.0 - (-d).exp()) / d
        };
        g.sqrt()
    })
}

/// Apply f(ad_s) to u where s is Hermitian: in the eigenbasis {v_i} of s, the
/// elementary endomorphisms v_i v_j^dag are eigenvectors of ad_s with
/// eigenvalue lambda_i - lambda_j.
pub fn apply_ad_function(s: &Mat2, u: &Mat2, f: impl Fn(f64) -> f64) -> Mat2 {
    let (l1, l2, v1, v2) = s.eig_herm();
    let vs = [v1, v2];
    let ls = [l1, l2];
    let mut out = Mat2::ZERO;
    for i in 0..2 {
        for j in 0..2 {
            // coefficient <v_i, u v_j>
            let uv = [
                u.0[0] * vs[j][0] + u.0[1] * vs[j][1],
                u.0[2] * vs[j][0] + u.0[3] * vs[j][1],
            ];
            let coef = vs[i][0].conj() * uv[0] + vs[i][1].conj() * uv[1];
            let w = coef * f(ls[i] - ls[j]);
            out.0[0] += w * vs[i][0] * vs[j][0].conj();
            out.0[1] += w * vs[i][0] * vs[j][1].conj();
            out.0[2] += w * vs[i][1] * vs[j][0].conj();
            out.0[3] += w * vs[i][1] * vs[j][1].conj();
        }
    }
    out
}
