//! Truncated graded grid on R^2 x R^+, finite-difference stencils, weighted
//! norms, and field I/O.
//!
//! Node layout: index = ((i2 * n3) + i3) * ny + iy, so y is fastest and x2
//! slowest. x2, x3 are uniform on [-L, L]; y is geometrically graded on
//! [y_min, Y] with ratio q.

use crate::error::{EbeError, Result};
use crate::mat2::{c, C64, Mat2};
use rayon::prelude::*;
use std::io::Write as IoWrite;
use std::sync::Arc;

#[derive(Clone, Debug)]
pub struct Grid3 {
    pub x2_nodes: Vec<f64>,
    pub x3_nodes: Vec<f64>,
    pub y_nodes: Vec<f64>,
    pub n2: usize,
    pub n3: usize,
    pub ny: usize,
    pub l: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub q: f64,
    pub hx2: f64,
    pub hx3: f64,
    /// per-node (first offset, weights) for d_y and d_yy on the graded axis
    dy_stencils: Vec<(usize, Vec<f64>)>,
    dyy_stencils: Vec<(usize, Vec<f64>)>,
}

/// Fornberg's algorithm: weights at point z for derivatives 0..=m from the
/// nodes x. Returns w[d][i] for derivative order d.
pub fn fornberg_weights(z: f64, x: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut w = vec![vec![0.0; n]; m + 1];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    w[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    w[k][i] = c1 * (k as f64 * w[k - 1][i - 1] - c5 * w[k][i - 1]) / c2;
                }
                w[0][i] = -c1 * c5 * w[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                w[k][j] = (c4 * w[k][j] - k as f64 * w[k - 1][j]) / c3;
            }
            w[0][j] = c4 * w[0][j] / c3;
        }
        c1 = c2;
    }
    w
}

pub fn build_grid(
    l: f64,
    y_min: f64,
    y_max: f64,
    n2: usize,
    n3: usize,
    ny: usize,
    q: f64,
) -> Result<Arc<Grid3>> {
    if n2 < 8 || n3 < 8 || ny < 8 {
        return Err(EbeError::InvalidInput(format!(
            "grid counts must be >= 8, got ({n2}, {n3}, {ny})"
        )));
    }
    if !(l > 0.0) || !(y_max > y_min) {
        return Err(EbeError::InvalidInput(format!(
            "need L > 0 and Y > y_min, got L={l} y_min={y_min} Y={y_max}"
        )));
    }
    if !(y_min > 0.0) {
        return Err(EbeError::BadGrading(format!(
            "y_min must be positive (Nahm pole at y=0), got {y_min}"
        )));
    }
    if !(q >= 1.0) || !q.is_finite() {
        return Err(EbeError::BadGrading(format!("grading ratio q={q} < 1")));
    }
    let x2_nodes: Vec<f64> = (0..n2)
        .map(|i| -l + 2.0 * l * i as f64 / (n2 - 1) as f64)
        .collect();
    let x3_nodes: Vec<f64> = (0..n3)
        .map(|i| -l + 2.0 * l * i as f64 / (n3 - 1) as f64)
        .collect();
    let span = y_max - y_min;
    let h0 = if q == 1.0 {
        span / (ny - 1) as f64
    } else {
        span * (q - 1.0) / (q.powi(ny as i32 - 1) - 1.0)
    };
    let mut y_nodes = Vec::with_capacity(ny);
    let mut h = h0;
    let mut y = y_min;
    for j in 0..ny {
        y_nodes.push(y);
        if j + 1 < ny {
            y += h;
            h *= q;
        }
    }
    y_nodes[ny - 1] = y_max;
    // resolution check: at least 3 nodes inside the first decade of y,
    // when the domain actually spans a decade
    if y_max > 10.0 * y_min {
        let in_decade = y_nodes.iter().filter(|&&v| v < 10.0 * y_min).count();
        if in_decade < 3 {
            return Err(EbeError::BadGrading(format!(
                "only {in_decade} nodes in [y_min, 10 y_min); refine or lower q={q}"
            )));
        }
    }
    let mut dy_stencils = Vec::with_capacity(ny);
    let mut dyy_stencils = Vec::with_capacity(ny);
    for j in 0..ny {
        // First derivative: 3-point central in the interior; 4-point
        // one-sided at the faces. The extra face order keeps composed
        // first-derivative operators (as in the moment map) second-order
        // accurate at face-adjacent nodes.
        let (dy_start, count_dy) = if j == 0 {
            (0, 4)
        } else if j == ny - 1 {
            (ny - 4, 4)
        } else {
            (j - 1, 3)
        };
        let (start, count_dyy) = if j == 0 {
            (0, 4)
        } else if j == ny - 1 {
            (ny - 4, 4)
        } else {
            (j - 1, 3)
        };
        let w1 = fornberg_weights(y_nodes[j], &y_nodes[dy_start..dy_start + count_dy], 1);
        dy_stencils.push((dy_start, w1[1].clone()));
        let w2 = fornberg_weights(y_nodes[j], &y_nodes[start..start + count_dyy], 2);
        dyy_stencils.push((start, w2[2].clone()));
    }
    Ok(Arc::new(Grid3 {
        x2_nodes,
        x3_nodes,
        y_nodes,
        n2,
        n3,
        ny,
        l,
        y_min,
        y_max,
        q,
        hx2: 2.0 * l / (n2 - 1) as f64,
        hx3: 2.0 * l / (n3 - 1) as f64,
        dy_stencils,
        dyy_stencils,
    }))
}

impl Grid3 {
    #[inline]
    pub fn idx(&self, i2: usize, i3: usize, iy: usize) -> usize {
        ((i2 * self.n3) + i3) * self.ny + iy
    }

    pub fn len(&self) -> usize {
        self.n2 * self.n3 * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// z = x2 + i x3 at a node
    #[inline]
    pub fn z_at(&self, i2: usize, i3: usize) -> C64 {
        c(self.x2_nodes[i2], self.x3_nodes[i3])
    }

    pub fn node(&self, i2: usize, i3: usize, iy: usize) -> (f64, f64, f64) {
        (self.x2_nodes[i2], self.x3_nodes[i3], self.y_nodes[iy])
    }

    pub fn is_face(&self, i2: usize, i3: usize, iy: usize) -> bool {
        i2 == 0
            || i2 == self.n2 - 1
            || i3 == 0
            || i3 == self.n3 - 1
            || iy == 0
            || iy == self.ny - 1
    }

    /// faces excluding the bottom y = y_min (where the solver keeps Dirichlet
    /// data but residuals are still meaningful)
    pub fn is_side_or_top(&self, i2: usize, i3: usize, iy: usize) -> bool {
        i2 == 0 || i2 == self.n2 - 1 || i3 == 0 || i3 == self.n3 - 1 || iy == self.ny - 1
    }
}

/// Values that finite-difference stencils can combine linearly.
pub trait LinVal: Copy + Send + Sync {
    fn zero() -> Self;
    fn axpy(&mut self, w: f64, v: Self);
    fn abs_size(&self) -> f64;
    /// Real inner product compatible with `abs_size` (dot(v, v) = abs_size(v)^2).
    fn dot(&self, other: &Self) -> f64;
}

impl LinVal for f64 {
    fn zero() -> f64 {
        0.0
    }
    fn axpy(&mut self, w: f64, v: f64) {
        *self += w * v;
    }
    fn abs_size(&self) -> f64 {
        self.abs()
    }
    fn dot(&self, other: &f64) -> f64 {
        self * other
    }
}

impl LinVal for C64 {
    fn zero() -> C64 {
        C64::ZERO
    }
    fn axpy(&mut self, w: f64, v: C64) {
        *self += v * w;
    }
    fn abs_size(&self) -> f64 {
        self.norm()
    }
    fn dot(&self, other: &C64) -> f64 {
        (self.conj() * other).re
    }
}

impl LinVal for Mat2 {
    fn zero() -> Mat2 {
        Mat2::ZERO
    }
    fn axpy(&mut self, w: f64, v: Mat2) {
        *self += v.scale_re(w);
    }
    fn abs_size(&self) -> f64 {
        self.norm()
    }
    fn dot(&self, other: &Mat2) -> f64 {
        Mat2::dot(self, other)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X2,
    X3,
    Y,
}

fn first_central<T: LinVal>(vm: T, vp: T, h: f64) -> T {
    let mut out = T::zero();
    out.axpy(-0.5 / h, vm);
    out.axpy(0.5 / h, vp);
    out
}

// One-sided 4-point first derivative at the face node (third order, so that
// compositions of first derivatives stay second order up to the boundary).
fn first_onesided<T: LinVal>(v0: T, v1: T, v2: T, v3: T, h: f64) -> T {
    let mut out = T::zero();
    out.axpy(-11.0 / (6.0 * h), v0);
    out.axpy(3.0 / h, v1);
    out.axpy(-1.5 / h, v2);
    out.axpy(1.0 / (3.0 * h), v3);
    out
}

/// First derivative along an axis (central in the interior, one-sided
/// four-point at the faces; Fornberg weights on the graded y axis).
pub fn d_axis<T: LinVal>(grid: &Grid3, values: &[T], axis: Axis) -> Vec<T> {
    assert_eq!(values.len(), grid.len());
    let (n2, n3, ny) = (grid.n2, grid.n3, grid.ny);
    let plane = n3 * ny;
    let mut out = vec![T::zero(); values.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(i2, slab)| {
        for i3 in 0..n3 {
            for iy in 0..ny {
                let j = i3 * ny + iy;
                let g = grid.idx(i2, i3, iy);
                slab[j] = match axis {
                    Axis::X2 => {
                        let h = grid.hx2;
                        if i2 == 0 {
                            first_onesided(
                                values[g],
                                values[g + plane],
                                values[g + 2 * plane],
                                values[g + 3 * plane],
                                h,
                            )
                        } else if i2 == n2 - 1 {
                            first_onesided(
                                values[g],
                                values[g - plane],
                                values[g - 2 * plane],
                                values[g - 3 * plane],
                                -h,
                            )
                        } else {
                            first_central(values[g - plane], values[g + plane], h)
                        }
                    }
                    Axis::X3 => {
                        let h = grid.hx3;
                        if i3 == 0 {
                            first_onesided(
                                values[g],
                                values[g + ny],
                                values[g + 2 * ny],
                                values[g + 3 * ny],
                                h,
                            )
                        } else if i3 == n3 - 1 {
                            first_onesided(
                                values[g],
                                values[g - ny],
                                values[g - 2 * ny],
                                values[g - 3 * ny],
                                -h,
                            )
                        } else {
                            first_central(values[g - ny], values[g + ny], h)
                        }
                    }
                    Axis::Y => {
                        let (start, w) = &grid.dy_stencils[iy];
                        let base = grid.idx(i2, i3, *start);
                        let mut acc = T::zero();
                        for (k, &wk) in w.iter().enumerate() {
                            acc.axpy(wk, values[base + k]);
                        }
                        acc
                    }
                };
            }
        }
    });
    out
}

/// Second derivative along an axis (three-point compact in the interior;
/// one-sided at faces, four-point on the graded axis).
pub fn d2_axis<T: LinVal>(grid: &Grid3, values: &[T], axis: Axis) -> Vec<T> {
    assert_eq!(values.len(), grid.len());
    let (n2, n3, ny) = (grid.n2, grid.n3, grid.ny);
    let plane = n3 * ny;
    let second_uniform = |vm: T, v0: T, vp: T, h: f64| {
        let mut acc = T::zero();
        acc.axpy(1.0 / (h * h), vm);
        acc.axpy(-2.0 / (h * h), v0);
        acc.axpy(1.0 / (h * h), vp);
        acc
    };
    // one-sided 4-point second derivative on a uniform axis
    let second_onesided = |v0: T, v1: T, v2: T, v3: T, h: f64| {
        let hh = h * h;
        let mut acc = T::zero();
        acc.axpy(2.0 / hh, v0);
        acc.axpy(-5.0 / hh, v1);
        acc.axpy(4.0 / hh, v2);
        acc.axpy(-1.0 / hh, v3);
        acc
    };
    let mut out = vec![T::zero(); values.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(i2, slab)| {
        for i3 in 0..n3 {
            for iy in 0..ny {
                let j = i3 * ny + iy;
                let g = grid.idx(i2, i3, iy);
                slab[j] = match axis {
                    Axis::X2 => {
                        let h = grid.hx2;
                        if i2 == 0 {
                            second_onesided(
                                values[g],
                                values[g + plane],
                                values[g + 2 * plane],
                                values[g + 3 * plane],
                                h,
                            )
                        } else if i2 == n2 - 1 {
                            second_onesided(
                                values[g],
                                values[g - plane],
                                values[g - 2 * plane],
                                values[g - 3 * plane],
                                h,
                            )
                        } else {
                            second_uniform(values[g - plane], values[g], values[g + plane], h)
                        }
                    }
                    Axis::X3 => {
                        let h = grid.hx3;
                        if i3 == 0 {
                            second_onesided(
                                values[g],
                                values[g + ny],
                                values[g + 2 * ny],
                                values[g + 3 * ny],
                                h,
                            )
                        } else if i3 == n3 - 1 {
                            second_onesided(
                                values[g],
                                values[g - ny],
                                values[g - 2 * ny],
                                values[g - 3 * ny],
                                h,
                            )
                        } else {
                            second_uniform(values[g - ny], values[g], values[g + ny], h)
                        }
                    }
                    Axis::Y => {
                        let (start, w) = &grid.dyy_stencils[iy];
                        let base = grid.idx(i2, i3, *start);
                        let mut acc = T::zero();
                        for (k, &wk) in w.iter().enumerate() {
                            acc.axpy(wk, values[base + k]);
                        }
                        acc
                    }
                };
            }
        }
    });
    out
}

pub fn d_x2<T: LinVal>(grid: &Grid3, values: &[T]) -> Vec<T> {
    d_axis(grid, values, Axis::X2)
}
pub fn d_x3<T: LinVal>(grid: &Grid3, values: &[T]) -> Vec<T> {
    d_axis(grid, values, Axis::X3)
}
pub fn d_y<T: LinVal>(grid: &Grid3, values: &[T]) -> Vec<T> {
    d_axis(grid, values, Axis::Y)
}
pub fn d_yy<T: LinVal>(grid: &Grid3, values: &[T]) -> Vec<T> {
    d2_axis(grid, values, Axis::Y)
}

/// Discrete Laplacian d_x2^2 + d_x3^2 + d_yy with compact second-derivative
/// stencils on each axis.
pub fn laplacian<T: LinVal>(grid: &Grid3, values: &[T]) -> Vec<T> {
    let a = d2_axis(grid, values, Axis::X2);
    let b = d2_axis(grid, values, Axis::X3);
    let mut out = d2_axis(grid, values, Axis::Y);
    for i in 0..out.len() {
        out[i].axpy(1.0, a[i]);
        out[i].axpy(1.0, b[i]);
    }
    out
}

/// Holomorphic derivatives in the doubled Wirtinger convention:
/// del = d_x2 - i d_x3, delbar = d_x2 + i d_x3. With this normalization
/// delbar(del u) is the full two-dimensional Laplacian.
pub fn holo_derivs(grid: &Grid3, values: &[Mat2]) -> (Vec<Mat2>, Vec<Mat2>) {
    let dx2 = d_axis(grid, values, Axis::X2);
    let dx3 = d_axis(grid, values, Axis::X3);
    let mut del = Vec::with_capacity(values.len());
    let mut delbar = Vec::with_capacity(values.len());
    let i = c(0.0, 1.0);
    for k in 0..values.len() {
        del.push(dx2[k] - dx3[k].scale(i));
        delbar.push(dx2[k] + dx3[k].scale(i));
    }
    (del, delbar)
}

pub fn holo_derivs_c(grid: &Grid3, values: &[C64]) -> (Vec<C64>, Vec<C64>) {
    let dx2 = d_axis(grid, values, Axis::X2);
    let dx3 = d_axis(grid, values, Axis::X3);
    let i = c(0.0, 1.0);
    let del = (0..values.len()).map(|k| dx2[k] - i * dx3[k]).collect();
    let delbar = (0..values.len()).map(|k| dx2[k] + i * dx3[k]).collect();
    (del, delbar)
}

/// Evaluators for the weight functions used in the paper-style weighted
/// norms: psi (boundary angle), R_w (regularized distance to the charge
/// points), rho (centered radius), rho_hat, y_hat.
#[derive(Clone, Debug)]
pub struct WeightFunctions {
    /// charge point positions in the z plane
    pub points: Vec<C64>,
    /// center for the radial coordinate (charge centroid, or 0)
    pub center: C64,
    /// lower clip for R_w
    pub clip: f64,
}

impl WeightFunctions {
    pub fn new(points: Vec<C64>, y_min: f64) -> WeightFunctions {
        let center = if points.is_empty() {
            C64::ZERO
        } else {
            points.iter().sum::<C64>() / c(points.len() as f64, 0.0)
        };
        WeightFunctions {
            points,
            center,
            clip: (y_min / 2.0).max(1e-12),
        }
    }

    /// distance in the z plane to the nearest charge point (or the center)
    pub fn r(&self, z: C64) -> f64 {
        if self.points.is_empty() {
            (z - self.center).norm()
        } else {
            self.points
                .iter()
                .map(|&p| (z - p).norm())
                .fold(f64::INFINITY, f64::min)
        }
    }

    pub fn psi(&self, z: C64, y: f64) -> f64 {
        (self.r(z) / y).atan()
    }

    /// product of clipped distances to the charge points; O(1) at infinity
    pub fn r_w(&self, z: C64, y: f64) -> f64 {
        let mut prod = 1.0;
        for &p in &self.points {
            let d = ((z - p).norm_sqr() + y * y).sqrt();
            prod *= d.min(1.0);
        }
        prod.max(self.clip)
    }

    pub fn rho(&self, z: C64, y: f64) -> f64 {
        ((z - self.center).norm_sqr() + y * y).sqrt()
    }

    pub fn rho_hat(&self, z: C64, y: f64) -> f64 {
        let rho = self.rho(z, y);
        (rho * rho + 1.0).sqrt()
    }

    pub fn y_hat(y: f64) -> f64 {
        y / (1.0 + y * y).sqrt()
    }
}

/// sup over the grid of |f| * psi^(-mu) * R_w^(-nu) * rho_hat^(-beta):
/// the norm for which f comparable to psi^mu R_w^nu rho_hat^beta has size 1
pub fn weighted_sup_norm<T: LinVal>(
    grid: &Grid3,
    values: &[T],
    wf: &WeightFunctions,
    mu: f64,
    nu: f64,
    beta: f64,
) -> f64 {
    let mut sup = 0.0f64;
    for i2 in 0..grid.n2 {
        for i3 in 0..grid.n3 {
            let z = grid.z_at(i2, i3);
            for iy in 0..grid.ny {
                let y = grid.y_nodes[iy];
                let w =
                    wf.psi(z, y).powf(-mu) * wf.r_w(z, y).powf(-nu) * wf.rho_hat(z, y).powf(-beta);
                let v = values[grid.idx(i2, i3, iy)].abs_size() * w;
                sup = sup.max(v);
            }
        }
    }
    sup
}

pub fn sup_norm<T: LinVal>(values: &[T]) -> f64 {
    values.iter().map(|v| v.abs_size()).fold(0.0, f64::max)
}

/// Hermitian within tol and det within det_tol of 1, everywhere.
pub fn check_hermitian_det1(values: &[Mat2], tol: f64, det_tol: f64) -> bool {
    values
        .iter()
        .all(|m| m.is_hermitian(tol) && (m.det() - c(1.0, 0.0)).norm() <= det_tol)
}

pub fn check_traceless_hermitian(values: &[Mat2], tol: f64) -> bool {
    values
        .iter()
        .all(|m| m.is_hermitian(tol) && m.trace().norm() <= tol)
}

/// Binary dump: "EBEFIELD v1 n2 n3 ny ncomp\n", the three coordinate arrays,
/// then values as little-endian f64, component fastest, then y, x3, x2.
pub fn write_field_dump<W: IoWrite>(
    w: &mut W,
    grid: &Grid3,
    ncomp: usize,
    node_components: impl Fn(usize) -> Vec<f64>,
) -> std::io::Result<()> {
    writeln!(w, "EBEFIELD v1 {} {} {} {}", grid.n2, grid.n3, grid.ny, ncomp)?;
    for arr in [&grid.x2_nodes, &grid.x3_nodes, &grid.y_nodes] {
        for &v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for i2 in 0..grid.n2 {
        for i3 in 0..grid.n3 {
            for iy in 0..grid.ny {
                let comps = node_components(grid.idx(i2, i3, iy));
                debug_assert_eq!(comps.len(), ncomp);
                for v in comps {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn write_scalar_dump<W: IoWrite>(w: &mut W, grid: &Grid3, f: &[f64]) -> std::io::Result<()> {
    write_field_dump(w, grid, 1, |i| vec![f[i]])
}

pub fn write_matrix_dump<W: IoWrite>(w: &mut W, grid: &Grid3, f: &[Mat2]) -> std::io::Result<()> {
    write_field_dump(w, grid, 8, |i| {
        let e = f[i].entries();
        vec![
            e[0].re, e[0].im, e[1].re, e[1].im, e[2].re, e[2].im, e[3].re, e[3].im,
        ]
    })
}

/// Parse a dump written by write_field_dump.
pub fn read_field_dump(bytes: &[u8]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, usize, Vec<f64>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| EbeError::InvalidInput("missing dump header".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| EbeError::InvalidInput("bad dump header".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 6 || parts[0] != "EBEFIELD" || parts[1] != "v1" {
        return Err(EbeError::InvalidInput(format!("bad dump header: {header}")));
    }
    let dims: Vec<usize> = parts[2..]
        .iter()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| EbeError::InvalidInput("bad dump dims".into()))?;
    let (n2, n3, ny, ncomp) = (dims[0], dims[1], dims[2], dims[3]);
    let body = &bytes[nl + 1..];
    let need = (n2 + n3 + ny + n2 * n3 * ny * ncomp) * 8;
    if body.len() < need {
        return Err(EbeError::InvalidInput("truncated dump".into()));
    }
    let read = |off: usize, n: usize| -> Vec<f64> {
        (0..n)
            .map(|k| f64::from_le_bytes(body[off + 8 * k..off + 8 * k + 8].try_into().unwrap()))
            .collect()
    };
    let x2 = read(0, n2);
    let x3 = read(8 * n2, n3);
    let y = read(8 * (n2 + n3), ny);
    let vals = read(8 * (n2 + n3 + ny), n2 * n3 * ny * ncomp);
    Ok((x2, x3, y, ncomp, vals))
}

/// CSV export of a 1D slice: coordinate column then one column per series.
pub fn write_csv_slice<W: IoWrite>(
    w: &mut W,
    coord_name: &str,
    coords: &[f64],
    series: &[(&str, Vec<f64>)],
) -> std::io::Result<()> {
    write!(w, "{coord_name}")?;
    for (name, _) in series {
        write!(w, ",{name}")?;
    }
    writeln!(w)?;
    for (i, &x) in coords.iter().enumerate() {
        write!(w, "{x:.17e}")?;
        for (_, vals) in series {
            write!(w, ",{:.17e}", vals[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn locate(nodes: &[f64], x: f64) -> (usize, f64) {
    let n = nodes.len();
    if x <= nodes[0] {
        return (0, 0.0);
    }
    if x >= nodes[n - 1] {
        return (n - 2, 1.0);
    }
    let mut lo = 0;
    let mut hi = n - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if nodes[mid] <= x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    ((lo), (x - nodes[lo]) / (nodes[lo + 1] - nodes[lo]))
}

/// Trilinear interpolation of a node field at an arbitrary point (clamped to
/// the domain box).
pub fn sample_trilinear<T: LinVal>(grid: &Grid3, values: &[T], x2: f64, x3: f64, y: f64) -> T {
    let (i2, t2) = locate(&grid.x2_nodes, x2);
    let (i3, t3) = locate(&grid.x3_nodes, x3);
    let (iy, ty) = locate(&grid.y_nodes, y);
    let mut out = T::zero();
    for (d2, w2) in [(0, 1.0 - t2), (1, t2)] {
        for (d3, w3) in [(0, 1.0 - t3), (1, t3)] {
            for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                let w = w2 * w3 * wy;
                if w != 0.0 {
                    out.axpy(w, values[grid.idx(i2 + d2, i3 + d3, iy + dy)]);
                }
            }
        }
    }
    out
}

/// Evaluate a scalar function of (z, y) at every node.
pub fn eval_scalar(grid: &Grid3, f: impl Fn(C64, f64) -> f64 + Sync) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    let plane = grid.n3 * grid.ny;
    out.par_chunks_mut(plane).enumerate().for_each(|(i2, slab)| {
        for i3 in 0..grid.n3 {
            let z = grid.z_at(i2, i3);
            for iy in 0..grid.ny {
                slab[i3 * grid.ny + iy] = f(z, grid.y_nodes[iy]);
            }
        }
    });
    out
}

/// Evaluate a matrix function of (z, y) at every node.
pub fn eval_matrix(grid: &Grid3, f: impl Fn(C64, f64) -> Mat2 + Sync) -> Vec<Mat2> {
    let mut out = vec![Mat2::ZERO; grid.len()];
    let plane = grid.n3 * grid.ny;
    out.par_chunks_mut(plane).enumerate().for_each(|(i2, slab)| {
        for i3 in 0..grid.n3 {
            let z = grid.z_at(i2, i3);
            for iy in 0..grid.ny {
                slab[i3 * grid.ny + iy] = f(z, grid.y_nodes[iy]);
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> Arc<Grid3> {
        build_grid(8.0, 0.05, 8.0, 9, 9, 17, 1.12).unwrap()
    }

    #[test]
    fn constructor_echo() {
        let g = build_grid(8.0, 0.05, 8.0, 33, 33, 33, 1.12).unwrap();
        assert_eq!(g.y_nodes[0], 0.05);
        assert!((g.y_nodes[32] - 8.0).abs() < 1e-12);
        assert_eq!(g.x2_nodes[0], -8.0);
        assert_eq!(*g.x2_nodes.last().unwrap(), 8.0);
    }

    #[test]
    fn uniform_when_q_is_one() {
        let g = build_grid(4.0, 0.1, 4.0, 9, 9, 14, 1.0).unwrap();
        let h = g.y_nodes[1] - g.y_nodes[0];
        for j in 1..g.ny - 1 {
            assert!((g.y_nodes[j + 1] - g.y_nodes[j] - h).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_zero_ymin() {
        assert!(matches!(
            build_grid(8.0, 0.0, 8.0, 9, 9, 9, 1.1),
            Err(EbeError::BadGrading(_))
        ));
    }

    #[test]
    fn rejects_coarse_grading() {
        // uniform spacing over a wide y range: first decade underresolved
        assert!(matches!(
            build_grid(8.0, 0.001, 8.0, 9, 9, 9, 1.0),
            Err(EbeError::BadGrading(_))
        ));
    }

    #[test]
    fn grading_ratio_constant() {
        let g = build_grid(8.0, 0.02, 8.0, 9, 9, 25, 1.17).unwrap();
        for j in 1..g.ny - 1 {
            let ratio = (g.y_nodes[j + 1] - g.y_nodes[j]) / (g.y_nodes[j] - g.y_nodes[j - 1]);
            assert!((ratio - 1.17).abs() < 1e-10, "j={j} ratio={ratio}");
        }
    }

    #[test]
    fn stencils_kill_constants_and_affine() {
        let g = small_grid();
        let ones = vec![1.0f64; g.len()];
        for ax in [Axis::X2, Axis::X3, Axis::Y] {
            assert!(sup_norm(&d_axis(&g, &ones, ax)) < 1e-12);
            assert!(sup_norm(&d2_axis(&g, &ones, ax)) < 1e-11);
        }
        let affine = eval_scalar(&g, |z, y| 2.0 * z.re - 3.0 * z.im + 0.5 * y + 1.0);
        let dx2 = d_x2(&g, &affine);
        let dx3 = d_x3(&g, &affine);
        let dy = d_y(&g, &affine);
        for i in 0..g.len() {
            assert!((dx2[i] - 2.0).abs() < 1e-10);
            assert!((dx3[i] + 3.0).abs() < 1e-10);
            assert!((dy[i] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn dyy_exact_on_quadratics() {
        let g = small_grid();
        let f = eval_scalar(&g, |_, y| y * y);
        let dyy = d_yy(&g, &f);
        for i in 0..g.len() {
            assert!((dyy[i] - 2.0).abs() < 1e-8, "{}", dyy[i]);
        }
    }

    #[test]
    fn dy_log_refinement_slope() {
        // d_y log y vs 1/y, graded grid, interior nodes; constant total
        // stretch so the refinement is uniform in the graded coordinate
        let mut errs = vec![];
        let mut hs = vec![];
        for lvl in 0..3 {
            let ny = 17 * (1 << lvl) + 1;
            let stretch: f64 = 40.0;
            let q = stretch.powf(1.0 / (ny as f64 - 2.0));
            let g = build_grid(2.0, 0.05, 4.0, 9, 9, ny, q).unwrap();
            let f = eval_scalar(&g, |_, y| y.ln());
            let dy = d_y(&g, &f);
            let mut err = 0.0f64;
            for iy in 1..g.ny - 1 {
                let i = g.idx(4, 4, iy);
                let y = g.y_nodes[iy];
                err = err.max(((dy[i] - 1.0 / y) * y).abs());
            }
            errs.push(err);
            hs.push(1.0 / (ny as f64 - 1.0));
        }
        let slope = (errs[0] / errs[2]).ln() / (hs[0] / hs[2]).ln();
        assert!((slope - 2.0).abs() < 0.3, "slope {slope}, errs {errs:?}");
    }

    #[test]
    fn laplacian_refinement_slope() {
        let mut errs = vec![];
        let mut hs = vec![];
        for lvl in 0..3 {
            let n = 9 * (1 << lvl) + 1;
            let stretch: f64 = 10.0;
            let q = stretch.powf(1.0 / (n as f64 - 2.0));
            let g = build_grid(1.0, 0.2, 1.2, n, n, n, q).unwrap();
            let f = eval_scalar(&g, |z, y| (z.re + 0.3 * z.im).sin() * (-y).exp());
            let lap = laplacian(&g, &f);
            let exact = eval_scalar(&g, |z, y| {
                (z.re + 0.3 * z.im).sin() * (-y).exp() * (-1.0 - 0.09 + 1.0)
            });
            let mut err = 0.0f64;
            for i2 in 1..g.n2 - 1 {
                for i3 in 1..g.n3 - 1 {
                    for iy in 1..g.ny - 1 {
                        let i = g.idx(i2, i3, iy);
                        err = err.max((lap[i] - exact[i]).abs());
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
    fn holo_derivative_conventions() {
        let g = small_grid();
        let zf: Vec<C64> = {
            let mut v = vec![C64::ZERO; g.len()];
            for i2 in 0..g.n2 {
                for i3 in 0..g.n3 {
                    for iy in 0..g.ny {
                        v[g.idx(i2, i3, iy)] = g.z_at(i2, i3);
                    }
                }
            }
            v
        };
        let (del, delbar) = holo_derivs_c(&g, &zf);
        let zbar: Vec<C64> = zf.iter().map(|z| z.conj()).collect();
        let (del_b, delbar_b) = holo_derivs_c(&g, &zbar);
        for i in 0..g.len() {
            assert!(delbar[i].norm() < 1e-10); // delbar z = 0
            assert!((del[i] - c(2.0, 0.0)).norm() < 1e-10); // del z = 2
            assert!((delbar_b[i] - c(2.0, 0.0)).norm() < 1e-10); // delbar zbar = 2
            assert!(del_b[i].norm() < 1e-10);
        }
    }

    #[test]
    fn weighted_norm_identities() {
        let g = small_grid();
        let wf = WeightFunctions::new(vec![], g.y_min);
        let psi2 = eval_scalar(&g, |z, y| wf.psi(z, y).powi(2));
        assert!((weighted_sup_norm(&g, &psi2, &wf, 2.0, 0.0, 0.0) - 1.0).abs() < 1e-12);
        let zero = vec![0.0; g.len()];
        assert_eq!(weighted_sup_norm(&g, &zero, &wf, 1.0, 1.0, 1.0), 0.0);
        let rh = eval_scalar(&g, |z, y| wf.rho_hat(z, y).powi(-2));
        assert!((weighted_sup_norm(&g, &rh, &wf, 0.0, 0.0, -2.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_evaluators_match_formulas() {
        let wf = WeightFunctions::new(vec![c(1.0, 0.0)], 0.05);
        let (z, y) = (c(0.3, -0.7), 0.9);
        let r = (z - c(1.0, 0.0)).norm();
        assert!((wf.psi(z, y) - (r / y).atan()).abs() < 1e-14);
        let rho = ((z - c(1.0, 0.0)).norm_sqr() + y * y).sqrt();
        assert!((wf.rho(z, y) - rho).abs() < 1e-14);
        assert!((wf.rho_hat(z, y) - (rho * rho + 1.0).sqrt()).abs() < 1e-14);
        assert!((WeightFunctions::y_hat(y) - y / (1.0 + y * y).sqrt()).abs() < 1e-14);
        assert!(wf.r_w(c(1.0, 0.0), 0.001) >= 0.025);
    }

    #[test]
    fn dump_roundtrip() {
        let g = build_grid(2.0, 0.1, 2.0, 8, 8, 8, 1.1).unwrap();
        let f = eval_scalar(&g, |z, y| z.re + 10.0 * z.im + 100.0 * y);
        let mut buf = Vec::new();
        write_scalar_dump(&mut buf, &g, &f).unwrap();
        let (x2, _x3, yv, ncomp, vals) = read_field_dump(&buf).unwrap();
        assert_eq!(ncomp, 1);
        assert_eq!(x2, g.x2_nodes);
        assert_eq!(yv, g.y_nodes);
        // layout check: value at (i2, i3, iy) = (1, 2, 3)
        let i = g.idx(1, 2, 3);
        assert_eq!(vals[i], f[i]);
    }

    #[test]
    fn trilinear_exact_on_affine() {
        let g = small_grid();
        let f = eval_scalar(&g, |z, y| 1.0 + z.re - 2.0 * z.im + 3.0 * y);
        let v = sample_trilinear(&g, &f, 0.37, -1.21, 0.778);
        assert!((v - (1.0 + 0.37 + 2.42 + 3.0 * 0.778)).abs() < 1e-10);
    }

    #[test]
    fn slab_partition_independence() {
        // stencil results must not depend on the rayon thread count
        let g = small_grid();
        let f = eval_scalar(&g, |z, y| (z.re * z.im).sin() + y.cos());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| laplacian(&g, &f));
        let parallel = laplacian(&g, &f);
        assert_eq!(serial, parallel);
    }
}
