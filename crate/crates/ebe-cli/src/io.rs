//! Input decoding and artifact I/O: the polynomial-triple JSON schema,
//! matrix-field dumps, and reconstruction of a grid from a dump's
//! coordinate arrays.

use ebe_core::grid::{build_grid, read_field_dump, write_matrix_dump, Grid3};
use ebe_core::mat2::{c, Mat2};
use ebe_core::poly::{HolomorphicData, Polynomial};
use ebe_core::{EbeError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// JSON schema of the input triple: coefficient lists, lowest degree
/// first, each coefficient as [re, im].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataFile {
    #[serde(rename = "P")]
    pub p: Vec<[f64; 2]>,
    #[serde(rename = "Q")]
    pub q: Vec<[f64; 2]>,
    #[serde(rename = "R")]
    pub r: Vec<[f64; 2]>,
}

fn poly_of(coeffs: &[[f64; 2]]) -> Polynomial {
    Polynomial::new(coeffs.iter().map(|&[re, im]| c(re, im)).collect())
}

impl DataFile {
    pub fn decode(&self) -> Result<HolomorphicData> {
        HolomorphicData::validate(poly_of(&self.p), poly_of(&self.q), poly_of(&self.r))
    }

    pub fn from_data(data: &HolomorphicData) -> DataFile {
        let enc = |p: &Polynomial| p.coeffs().iter().map(|&v| [v.re, v.im]).collect();
        DataFile {
            p: enc(&data.p),
            q: enc(&data.q),
            r: enc(&data.r),
        }
    }
}

pub fn read_data(path: &Path) -> Result<HolomorphicData> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EbeError::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    let file: DataFile = serde_json::from_str(&text)
        .map_err(|e| EbeError::InvalidInput(format!("bad data JSON {}: {e}", path.display())))?;
    file.decode()
}

/// Rebuild the grid a dump was written on from its coordinate arrays
/// (uniform transverse axes, geometrically graded vertical axis).
pub fn grid_from_coords(x2: &[f64], x3: &[f64], y: &[f64]) -> Result<Arc<Grid3>> {
    if x2.len() < 2 || y.len() < 3 {
        return Err(EbeError::InvalidInput("dump grid too small".into()));
    }
    let l = x2.last().unwrap().max(-x2[0]);
    let q = (y[2] - y[1]) / (y[1] - y[0]);
    let grid = build_grid(l, y[0], *y.last().unwrap(), x2.len(), x3.len(), y.len(), q)?;
    let close = |a: &[f64], b: &[f64]| {
        a.len() == b.len()
            && a.iter()
                .zip(b)
                .all(|(u, v)| (u - v).abs() <= 1e-9 * (1.0 + v.abs()))
    };
    if !close(&grid.x2_nodes, x2) || !close(&grid.x3_nodes, x3) || !close(&grid.y_nodes, y) {
        return Err(EbeError::InvalidInput(
            "dump coordinates do not match a supported grid".into(),
        ));
    }
    Ok(grid)
}

/// Read a matrix-field dump (8 components per node) with its grid.
pub fn read_matrix_field(path: &Path) -> Result<(Arc<Grid3>, Vec<Mat2>)> {
    let bytes = std::fs::read(path)
        .map_err(|e| EbeError::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    let (x2, x3, y, ncomp, vals) = read_field_dump(&bytes)?;
    if ncomp != 8 {
        return Err(EbeError::InvalidInput(format!(
            "expected 8 components per node, got {ncomp}"
        )));
    }
    let grid = grid_from_coords(&x2, &x3, &y)?;
    let mut field = vec![Mat2::ZERO; grid.len()];
    let mut pos = 0;
    for i2 in 0..grid.n2 {
        for i3 in 0..grid.n3 {
            for iy in 0..grid.ny {
                let v = &vals[pos..pos + 8];
                field[grid.idx(i2, i3, iy)] = Mat2::new(
                    c(v[0], v[1]),
                    c(v[2], v[3]),
                    c(v[4], v[5]),
                    c(v[6], v[7]),
                );
                pos += 8;
            }
        }
    }
    Ok((grid, field))
}

/// Read a scalar-field dump (1 component per node) with its grid.
pub fn read_scalar_field(path: &Path) -> Result<(Arc<Grid3>, Vec<f64>)> {
    let bytes = std::fs::read(path)
        .map_err(|e| EbeError::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    let (x2, x3, y, ncomp, vals) = read_field_dump(&bytes)?;
    if ncomp != 1 {
        return Err(EbeError::InvalidInput(format!(
            "expected 1 component per node, got {ncomp}"
        )));
    }
    let grid = grid_from_coords(&x2, &x3, &y)?;
    let mut field = vec![0.0; grid.len()];
    let mut pos = 0;
    for i2 in 0..grid.n2 {
        for i3 in 0..grid.n3 {
            for iy in 0..grid.ny {
                field[grid.idx(i2, i3, iy)] = vals[pos];
                pos += 1;
            }
        }
    }
    Ok((grid, field))
}

pub fn write_matrix_file(path: &Path, grid: &Grid3, field: &[Mat2]) -> Result<()> {
    let mut buf = Vec::new();
    write_matrix_dump(&mut buf, grid, field)
        .map_err(|e| EbeError::InvalidInput(format!("dump write failed: {e}")))?;
    std::fs::write(path, buf)
        .map_err(|e| EbeError::InvalidInput(format!("cannot write {}: {e}", path.display())))
}

pub fn write_scalar_file(path: &Path, grid: &Grid3, field: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    ebe_core::grid::write_scalar_dump(&mut buf, grid, field)
        .map_err(|e| EbeError::InvalidInput(format!("dump write failed: {e}")))?;
    std::fs::write(path, buf)
        .map_err(|e| EbeError::InvalidInput(format!("cannot write {}: {e}", path.display())))
}
