//! Polynomial algebra over C, validation of the holomorphic input triple
//! (P, Q, R) and extraction of boundary charge points from zeros of P R^2.

use crate::error::{EbeError, Result};
use crate::mat2::{c, Mat2, C64};
use num_bigint::BigInt;
use serde::{Deserialize, Serialize};

/// Relative tolerance for declaring a resultant zero.
pub const COPRIME_TOL: f64 = 1e-9;
/// Root clustering tolerance factor: tol = 1e-6 * (1 + |root|).
pub const CLUSTER_TOL: f64 = 1e-6;

/// Complex polynomial, coefficients lowest degree first, trailing
/// coefficient nonzero unless identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    coeffs: Vec<C64>,
}

impl Polynomial {
    pub fn new(mut coeffs: Vec<C64>) -> Polynomial {
        while coeffs.last().map_or(false, |z| z.norm() == 0.0) {
            coeffs.pop();
        }
        Polynomial { coeffs }
    }

    pub fn zero() -> Polynomial {
        Polynomial { coeffs: vec![] }
    }

    pub fn constant(a: C64) -> Polynomial {
        Polynomial::new(vec![a])
    }

    pub fn one() -> Polynomial {
        Polynomial::constant(c(1.0, 0.0))
    }

    /// z^k
    pub fn monomial(k: usize) -> Polynomial {
        let mut coeffs = vec![C64::ZERO; k + 1];
        coeffs[k] = c(1.0, 0.0);
        Polynomial { coeffs }
    }

    pub fn from_real(coeffs: &[f64]) -> Polynomial {
        Polynomial::new(coeffs.iter().map(|&x| c(x, 0.0)).collect())
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// None for the zero polynomial.
    pub fn degree(&self) -> Option<usize> {
        if self.coeffs.is_empty() {
            None
        } else {
            Some(self.coeffs.len() - 1)
        }
    }

    pub fn leading(&self) -> C64 {
        self.coeffs.last().copied().unwrap_or(C64::ZERO)
    }

    pub fn coeff_scale(&self) -> f64 {
        self.coeffs.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Horner evaluation.
    pub fn eval(&self, z: C64) -> C64 {
        let mut acc = C64::ZERO;
        for &a in self.coeffs.iter().rev() {
            acc = acc * z + a;
        }
        acc
    }

    pub fn derivative(&self) -> Polynomial {
        if self.coeffs.len() <= 1 {
            return Polynomial::zero();
        }
        Polynomial::new(
            self.coeffs[1..]
                .iter()
                .enumerate()
                .map(|(i, &a)| a * c((i + 1) as f64, 0.0))
                .collect(),
        )
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let n = self.coeffs.len().max(other.coeffs.len());
        let mut out = vec![C64::ZERO; n];
        for (i, &a) in self.coeffs.iter().enumerate() {
            out[i] += a;
        }
        for (i, &a) in other.coeffs.iter().enumerate() {
            out[i] += a;
        }
        Polynomial::new(out)
    }

    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        self.add(&other.scale(c(-1.0, 0.0)))
    }

    pub fn scale(&self, s: C64) -> Polynomial {
        Polynomial::new(self.coeffs.iter().map(|&a| a * s).collect())
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        if self.is_zero() || other.is_zero() {
            return Polynomial::zero();
        }
        let mut out = vec![C64::ZERO; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            for (j, &b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Polynomial::new(out)
    }

    /// Euclidean division self = q * div + r with deg r < deg div.
    pub fn divmod(&self, div: &Polynomial) -> (Polynomial, Polynomial) {
        let d = div.degree().expect("division by zero polynomial");
        let lead = div.leading();
        let mut rem = self.coeffs.clone();
        if rem.len() <= d {
            return (Polynomial::zero(), self.clone());
        }
        let mut quot = vec![C64::ZERO; rem.len() - d];
        for i in (d..rem.len()).rev() {
            let f = rem[i] / lead;
            quot[i - d] = f;
            for j in 0..=d {
                rem[i - d + j] -= f * div.coeffs[j];
            }
            rem[i] = C64::ZERO;
        }
        rem.truncate(d);
        (Polynomial::new(quot), trim_rel(Polynomial::new(rem), self.coeff_scale()))
    }

    /// Trim coefficients that are negligible relative to `scale`.
    fn trimmed(mut self, tol: f64) -> Polynomial {
        while self.coeffs.last().map_or(false, |z| z.norm() <= tol) {
            self.coeffs.pop();
        }
        self
    }
}

fn trim_rel(p: Polynomial, scale: f64) -> Polynomial {
    p.trimmed(1e-12 * (1.0 + scale))
}

/// Extended Euclid: returns (S, T) with Q S + R T = 1, or NotCoprime if the
/// gcd is nonconstant. Pre: not both zero.
pub fn bezout(q: &Polynomial, r: &Polynomial) -> Result<(Polynomial, Polynomial)> {
    let scale = q.coeff_scale().max(r.coeff_scale());
    let tol = 1e-10 * (1.0 + scale);
    // invariant: a = q*sa + r*ta ; b = q*sb + r*tb
    let mut a = q.clone();
    let mut b = r.clone();
    let mut sa = Polynomial::one();
    let mut ta = Polynomial::zero();
    let mut sb = Polynomial::zero();
    let mut tb = Polynomial::one();
    while !b.is_zero() && b.coeff_scale() > tol {
        let (quot, rem) = a.divmod(&b);
        let rem = rem.trimmed(tol * (1.0 + a.coeff_scale() / (1.0 + scale)));
        let nsa = sa.sub(&quot.mul(&sb));
        let nta = ta.sub(&quot.mul(&tb));
        a = b;
        b = rem;
        sa = sb;
        ta = tb;
        sb = nsa;
        tb = nta;
    }
    match a.degree() {
        None => Err(EbeError::NotCoprime { resultant: 0.0 }),
        Some(0) => {
            let g = a.coeffs[0];
            Ok((sa.scale(c(1.0, 0.0) / g), ta.scale(c(1.0, 0.0) / g)))
        }
        Some(_) => Err(EbeError::NotCoprime { resultant: 0.0 }),
    }
}

/// Resultant of two polynomials via the Sylvester matrix. Uses exact
/// Gaussian-integer elimination when all coefficients are Gaussian integers,
/// complex LU otherwise.
pub fn resultant(p: &Polynomial, q: &Polynomial) -> C64 {
    let (n, m) = match (p.degree(), q.degree()) {
        (Some(n), Some(m)) => (n, m),
        _ => return C64::ZERO,
    };
    if n == 0 {
        return p.coeffs[0].powu(m as u32);
    }
    if m == 0 {
        return q.coeffs[0].powu(n as u32);
    }
    if let (Some(pi), Some(qi)) = (as_gaussian_ints(p), as_gaussian_ints(q)) {
        return gaussian_resultant(&pi, &qi);
    }
    let dim = n + m;
    let mut a = vec![vec![C64::ZERO; dim]; dim];
    for row in 0..m {
        for (k, &cf) in p.coeffs.iter().enumerate() {
            a[row][row + n - k] = cf;
        }
    }
    for row in 0..n {
        for (k, &cf) in q.coeffs.iter().enumerate() {
            a[m + row][row + m - k] = cf;
        }
    }
    complex_det(&mut a)
}

fn complex_det(a: &mut [Vec<C64>]) -> C64 {
    let n = a.len();
    let mut det = c(1.0, 0.0);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].norm().total_cmp(&a[j][col].norm()))
            .unwrap();
        if a[piv][col].norm() == 0.0 {
            return C64::ZERO;
        }
        if piv != col {
            a.swap(piv, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                let v = a[col][k];
                a[row][k] -= f * v;
            }
        }
    }
    det
}

#[derive(Clone, Debug, PartialEq)]
struct GInt {
    re: BigInt,
    im: BigInt,
}

impl GInt {
    fn zero() -> GInt {
        GInt {
            re: BigInt::from(0),
            im: BigInt::from(0),
        }
    }
    fn is_zero(&self) -> bool {
        self.re.sign() == num_bigint::Sign::NoSign && self.im.sign() == num_bigint::Sign::NoSign
    }
    fn mul(&self, o: &GInt) -> GInt {
        GInt {
            re: &self.re * &o.re - &self.im * &o.im,
            im: &self.re * &o.im + &self.im * &o.re,
        }
    }
    fn sub(&self, o: &GInt) -> GInt {
        GInt {
            re: &self.re - &o.re,
            im: &self.im - &o.im,
        }
    }
    /// Exact division (caller guarantees divisibility, as in Bareiss).
    fn div_exact(&self, o: &GInt) -> GInt {
        let nrm = &o.re * &o.re + &o.im * &o.im;
        let re = &self.re * &o.re + &self.im * &o.im;
        let im = &self.im * &o.re - &self.re * &o.im;
        GInt {
            re: re / &nrm,
            im: im / nrm,
        }
    }
}

fn as_gaussian_ints(p: &Polynomial) -> Option<Vec<GInt>> {
    let mut out = Vec::with_capacity(p.coeffs.len());
    for z in &p.coeffs {
        for part in [z.re, z.im] {
            if part.fract() != 0.0 || part.abs() > 2f64.powi(52) {
                return None;
            }
        }
        out.push(GInt {
            re: BigInt::from(z.re as i64),
            im: BigInt::from(z.im as i64),
        });
    }
    Some(out)
}

/// Fraction-free Bareiss determinant of the Sylvester matrix over Z[i].
fn gaussian_resultant(p: &[GInt], q: &[GInt]) -> C64 {
    let n = p.len() - 1;
    let m = q.len() - 1;
    let dim = n + m;
    let mut a = vec![vec![GInt::zero(); dim]; dim];
    for row in 0..m {
        for (k, cf) in p.iter().enumerate() {
            a[row][row + n - k] = cf.clone();
        }
    }
    for row in 0..n {
        for (k, cf) in q.iter().enumerate() {
            a[m + row][row + m - k] = cf.clone();
        }
    }
    let mut sign = 1i32;
    let mut prev = GInt {
        re: BigInt::from(1),
        im: BigInt::from(0),
    };
    for col in 0..dim {
        if a[col][col].is_zero() {
            let Some(piv) = (col + 1..dim).find(|&i| !a[i][col].is_zero()) else {
                return C64::ZERO;
            };
            a.swap(piv, col);
            sign = -sign;
        }
        for row in col + 1..dim {
            for k in col + 1..dim {
                let v = a[col][col].mul(&a[row][k]).sub(&a[row][col].mul(&a[col][k]));
                a[row][k] = v.div_exact(&prev);
            }
            a[row][col] = GInt::zero();
        }
        prev = a[col][col].clone();
    }
    let d = &a[dim - 1][dim - 1];
    let re: f64 = bigint_to_f64(&d.re);
    let im: f64 = bigint_to_f64(&d.im);
    c(re * sign as f64, im * sign as f64)
}

fn bigint_to_f64(x: &BigInt) -> f64 {
    use num_traits::ToPrimitive;
    x.to_f64().unwrap_or(f64::INFINITY)
}

/// All complex roots (with repetition) via companion-matrix eigenvalues.
pub fn roots(p: &Polynomial) -> Vec<C64> {
    let n = match p.degree() {
        None | Some(0) => return vec![],
        Some(n) => n,
    };
    let lead = p.leading();
    // companion matrix (upper Hessenberg)
    let mut h = vec![vec![C64::ZERO; n]; n];
    for i in 0..n {
        h[i][n - 1] = -p.coeffs[i] / lead;
    }
    for i in 1..n {
        h[i][i - 1] = c(1.0, 0.0);
    }
    hessenberg_eigenvalues(h)
}

/// Eigenvalues of a complex upper Hessenberg matrix by explicit
/// single-shift QR with Givens rotations.
fn hessenberg_eigenvalues(mut h: Vec<Vec<C64>>) -> Vec<C64> {
    let n = h.len();
    let mut eigs = Vec::with_capacity(n);
    let mut hi = n - 1;
    let mut iters_since_deflation = 0usize;
    let eps = 1e-14;
    loop {
        // deflate trailing 1x1 blocks
        loop {
            if hi == 0 {
                eigs.push(h[0][0]);
                eigs.reverse();
                return eigs;
            }
            let sub = h[hi][hi - 1].norm();
            let diag = h[hi][hi].norm() + h[hi - 1][hi - 1].norm();
            if sub <= eps * (diag + 1e-300) {
                eigs.push(h[hi][hi]);
                hi -= 1;
                iters_since_deflation = 0;
            } else {
                break;
            }
        }
        // find the start of the active block
        let mut lo = hi;
        while lo > 0 {
            let sub = h[lo][lo - 1].norm();
            let diag = h[lo][lo].norm() + h[lo - 1][lo - 1].norm();
            if sub <= eps * (diag + 1e-300) {
                break;
            }
            lo -= 1;
        }
        // Wilkinson shift from the trailing 2x2 of the active block
        let shift = if iters_since_deflation > 0 && iters_since_deflation % 12 == 0 {
            // exceptional shift to break cycles
            h[hi][hi] + h[hi][hi - 1] * c(1.5, 0.5)
        } else {
            let a = h[hi - 1][hi - 1];
            let b = h[hi - 1][hi];
            let cv = h[hi][hi - 1];
            let d = h[hi][hi];
            let tr = a + d;
            let disc = ((a - d) * (a - d) + cv * b * c(4.0, 0.0)).sqrt();
            let l1 = (tr + disc) * c(0.5, 0.0);
            let l2 = (tr - disc) * c(0.5, 0.0);
            if (l1 - d).norm() < (l2 - d).norm() {
                l1
            } else {
                l2
            }
        };
        iters_since_deflation += 1;
        // explicit QR step on the active block: H - sI = QR, H <- RQ + sI
        for i in lo..=hi {
            h[i][i] -= shift;
        }
        let mut rot = Vec::with_capacity(hi - lo);
        for i in lo..hi {
            let (a, b) = (h[i][i], h[i + 1][i]);
            let r = (a.norm_sqr() + b.norm_sqr()).sqrt();
            let (cs, sn) = if r == 0.0 {
                (c(1.0, 0.0), C64::ZERO)
            } else {
                (a.conj() / r, b.conj() / r)
            };
            rot.push((cs, sn));
            for k in i..=hi {
                let x = h[i][k];
                let y = h[i + 1][k];
                h[i][k] = cs * x + sn * y;
                h[i + 1][k] = -sn.conj() * x + cs.conj() * y;
            }
        }
        for (i, (cs, sn)) in rot.iter().enumerate() {
            let i = lo + i;
            for k in lo..=hi.min(i + 1) {
                let x = h[k][i];
                let y = h[k][i + 1];
                h[k][i] = x * cs.conj() + y * sn.conj();
                h[k][i + 1] = -x * *sn + y * *cs;
            }
        }
        for i in lo..=hi {
            h[i][i] += shift;
        }
    }
}

/// A root with its integer multiplicity from eigenvalue clustering.
#[derive(Clone, Debug)]
pub struct ClusteredRoot {
    pub position: C64,
    pub multiplicity: usize,
}

/// Cluster companion-matrix eigenvalues into multiplicity groups and
/// cross-check each group's multiplicity against vanishing orders of the
/// derivatives at the cluster centroid.
pub fn clustered_roots(p: &Polynomial) -> Result<Vec<ClusteredRoot>> {
    let mut rts = roots(p);
    if rts.is_empty() {
        return Ok(vec![]);
    }
    rts.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
    let mut clusters: Vec<Vec<C64>> = vec![];
    'outer: for z in rts {
        for cl in clusters.iter_mut() {
            let center: C64 = cl.iter().sum::<C64>() / c(cl.len() as f64, 0.0);
            let tol = CLUSTER_TOL * (1.0 + center.norm());
            // multiple eigenvalues of a defective companion matrix scatter at
            // O(eps^(1/m)); widen the cluster window accordingly
            let window = tol.powf(1.0 / (cl.len() as f64 + 1.0)).max(tol);
            if (z - center).norm() <= window {
                cl.push(z);
                continue 'outer;
            }
        }
        clusters.push(vec![z]);
    }
    let mut out = Vec::with_capacity(clusters.len());
    for cl in clusters {
        let m = cl.len();
        let center: C64 = cl.iter().sum::<C64>() / c(m as f64, 0.0);
        let deriv_mult = derivative_multiplicity(p, center);
        if deriv_mult != m {
            return Err(EbeError::RootClusterAmbiguity {
                position: center,
                cluster: m,
                derivative: deriv_mult,
            });
        }
        out.push(ClusteredRoot {
            position: center,
            multiplicity: m,
        });
    }
    Ok(out)
}

/// Vanishing order at z0: smallest j with |p^(j)(z0)/j!| above the noise
/// floor set by the larger Taylor coefficients.
fn derivative_multiplicity(p: &Polynomial, z0: C64) -> usize {
    let n = p.degree().unwrap_or(0);
    let mut taylor = Vec::with_capacity(n + 1);
    let mut d = p.clone();
    let mut fact = 1.0;
    for j in 0..=n {
        if j > 0 {
            d = d.derivative();
            fact *= j as f64;
        }
        taylor.push(d.eval(z0).norm() / fact);
    }
    let scale = taylor.iter().fold(0.0f64, |a, &b| a.max(b));
    let local = 1.0 + z0.norm();
    for (j, &t) in taylor.iter().enumerate() {
        // compare coefficient contributions at the cluster radius
        if t * local.powi(j as i32) > 1e-4 * scale {
            return j;
        }
    }
    n
}

/// Validated input triple. R is monic; Q is reduced mod R.
#[derive(Clone, Debug)]
pub struct HolomorphicData {
    pub p: Polynomial,
    pub q: Polynomial,
    pub r: Polynomial,
}

impl HolomorphicData {
    pub fn validate(p: Polynomial, q: Polynomial, r: Polynomial) -> Result<HolomorphicData> {
        if p.is_zero() {
            return Err(EbeError::ZeroP);
        }
        if r.is_zero() {
            return Err(EbeError::InvalidInput("R must be nonzero".into()));
        }
        let r = r.scale(c(1.0, 0.0) / r.leading());
        let q = if r.degree() == Some(0) {
            // R constant (= 1 after normalization): Q must reduce to 0
            Polynomial::zero()
        } else {
            q.divmod(&r).1
        };
        if q.is_zero() {
            if r.degree() != Some(0) {
                return Err(EbeError::NotCoprime { resultant: 0.0 });
            }
            return Ok(HolomorphicData { p, q, r });
        }
        let res = resultant(&q, &r);
        let scale = q.coeff_scale().max(r.coeff_scale()).max(1.0);
        let deg_sum = (q.degree().unwrap_or(0) + r.degree().unwrap_or(0)) as i32;
        if res.norm() <= COPRIME_TOL * scale.powi(deg_sum) {
            return Err(EbeError::NotCoprime {
                resultant: res.norm(),
            });
        }
        Ok(HolomorphicData { p, q, r })
    }

    /// Model charge N = deg P, governing the rho -> infinity asymptotics.
    pub fn asymptotic_charge(&self) -> usize {
        self.p.degree().unwrap()
    }

    /// Total charge K = deg P + 2 deg R.
    pub fn total_charge(&self) -> usize {
        self.p.degree().unwrap() + 2 * self.r.degree().unwrap()
    }
}

/// Boundary knot point with its charge split into vanishing orders of P and R.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChargePoint {
    pub position: (f64, f64),
    pub charge: usize,
    pub k_part: usize,
    pub p_part: usize,
}

impl ChargePoint {
    pub fn position_c(&self) -> C64 {
        c(self.position.0, self.position.1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChargeSet {
    pub points: Vec<ChargePoint>,
    pub total_charge: usize,
    pub asymptotic_charge: usize,
}

/// Extract positions and charges from the zeros of P R^2: the charge at a
/// zero is its multiplicity k + 2p, with k the order in P and p the order
/// in R.
pub fn charges(data: &HolomorphicData) -> Result<ChargeSet> {
    let p_roots = clustered_roots(&data.p)?;
    let r_roots = clustered_roots(&data.r)?;
    let mut points: Vec<ChargePoint> = vec![];
    for rt in &p_roots {
        points.push(ChargePoint {
            position: (rt.position.re, rt.position.im),
            charge: rt.multiplicity,
            k_part: rt.multiplicity,
            p_part: 0,
        });
    }
    'outer: for rt in &r_roots {
        for pt in points.iter_mut() {
            let tol = CLUSTER_TOL * (1.0 + rt.position.norm());
            if (pt.position_c() - rt.position).norm() <= tol.max(1e-6) {
                pt.charge += 2 * rt.multiplicity;
                pt.p_part = rt.multiplicity;
                continue 'outer;
            }
        }
        points.push(ChargePoint {
            position: (rt.position.re, rt.position.im),
            charge: 2 * rt.multiplicity,
            k_part: 0,
            p_part: rt.multiplicity,
        });
    }
    points.sort_by(|a, b| a.position.partial_cmp(&b.position).unwrap());
    let total: usize = points.iter().map(|p| p.charge).sum();
    let expected = data.total_charge();
    debug_assert_eq!(total, expected);
    Ok(ChargeSet {
        points,
        total_charge: total,
        asymptotic_charge: data.asymptotic_charge(),
    })
}

/// 2x2 matrix with polynomial entries (row major), used for holomorphic
/// gauge transformations.
#[derive(Clone, Debug)]
pub struct PolyMat2 {
    pub entries: [Polynomial; 4],
}

impl PolyMat2 {
    pub fn new(a: Polynomial, b: Polynomial, c: Polynomial, d: Polynomial) -> PolyMat2 {
        PolyMat2 { entries: [a, b, c, d] }
    }

    pub fn identity() -> PolyMat2 {
        PolyMat2::new(
            Polynomial::one(),
            Polynomial::zero(),
            Polynomial::zero(),
            Polynomial::one(),
        )
    }

    pub fn eval(&self, z: C64) -> Mat2 {
        Mat2([
            self.entries[0].eval(z),
            self.entries[1].eval(z),
            self.entries[2].eval(z),
            self.entries[3].eval(z),
        ])
    }

    /// det as a polynomial: ad - bc.
    pub fn det(&self) -> Polynomial {
        self.entries[0]
            .mul(&self.entries[3])
            .sub(&self.entries[1].mul(&self.entries[2]))
    }

    /// Inverse for unimodular (det = 1) matrices: [[d, -b], [-c, a]].
    pub fn inverse_unimodular(&self) -> PolyMat2 {
        PolyMat2::new(
            self.entries[3].clone(),
            self.entries[1].scale(c(-1.0, 0.0)),
            self.entries[2].scale(c(-1.0, 0.0)),
            self.entries[0].clone(),
        )
    }
}
