//! Run configuration: grid geometry, continuation schedule, tolerances,
//! and output plumbing. Serialized alongside every solve so that reports
//! are reproducible from the artifact alone.

use ebe_core::grid::{build_grid, Grid3};
use ebe_core::{EbeError, Result};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// half-width of the square cross-section in x2 and x3
    pub l: f64,
    /// height of the first grid layer (the boundary cutoff)
    pub y_min: f64,
    pub y_max: f64,
    pub n2: usize,
    pub n3: usize,
    pub ny: usize,
    /// geometric grading ratio of the vertical spacing
    pub q: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            l: 6.0,
            y_min: 0.4,
            y_max: 12.4,
            n2: 33,
            n3: 33,
            ny: 33,
            q: 1.1,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<Arc<Grid3>> {
        build_grid(
            self.l, self.y_min, self.y_max, self.n2, self.n3, self.ny, self.q,
        )
    }

    /// Parse "default" or "L,y_min,y_max,n2,n3,ny,q".
    pub fn parse(spec: &str) -> Result<GridConfig> {
        if spec == "default" {
            return Ok(GridConfig::default());
        }
        let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
        if parts.len() != 7 {
            return Err(EbeError::InvalidInput(format!(
                "grid spec must be 'default' or 'L,y_min,y_max,n2,n3,ny,q', got '{spec}'"
            )));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| EbeError::InvalidInput(format!("bad grid number '{s}'")))
        };
        let u = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| EbeError::InvalidInput(format!("bad grid count '{s}'")))
        };
        Ok(GridConfig {
            l: f(parts[0])?,
            y_min: f(parts[1])?,
            y_max: f(parts[2])?,
            n2: u(parts[3])?,
            n3: u(parts[4])?,
            ny: u(parts[5])?,
            q: f(parts[6])?,
        })
    }
}

/// Parse "default" or a comma-separated decreasing list of t values.
pub fn parse_schedule(spec: &str) -> Result<Vec<f64>> {
    if spec == "default" {
        return Ok(ebe_core::solver::default_schedule());
    }
    let mut out = vec![];
    for part in spec.split(',') {
        let t: f64 = part
            .trim()
            .parse()
            .map_err(|_| EbeError::InvalidInput(format!("bad schedule value '{part}'")))?;
        if !(t >= 0.0) {
            return Err(EbeError::InvalidInput(format!(
                "schedule values must be >= 0, got {t}"
            )));
        }
        out.push(t);
    }
    if out.is_empty() || *out.last().unwrap() != 0.0 {
        return Err(EbeError::InvalidInput(
            "schedule must end at 0".into(),
        ));
    }
    Ok(out)
}

/// Everything needed to reproduce a solve run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// path of the input data JSON
    pub data: String,
    pub grid: GridConfig,
    pub schedule: Vec<f64>,
    /// residual tolerance as a multiple of the problem scale
    pub tol: f64,
    pub out: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: String::new(),
            grid: GridConfig::default(),
            schedule: ebe_core::solver::default_schedule(),
            tol: 1e-6,
            out: ".".into(),
            seed: 7,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips_through_json() {
        let cfg = RunConfig {
            data: "data/charge2.json".into(),
            grid: GridConfig {
                l: 8.0,
                y_min: 0.25,
                y_max: 16.25,
                n2: 17,
                n3: 19,
                ny: 21,
                q: 1.15,
            },
            schedule: vec![1.0, 0.25, 0.0],
            tol: 1e-7,
            out: "out".into(),
            seed: 42,
        };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        // and the serialization itself is stable
        assert_eq!(text, serde_json::to_string_pretty(&back).unwrap());
    }

    #[test]
    fn grid_spec_parsing() {
        assert_eq!(GridConfig::parse("default").unwrap(), GridConfig::default());
        let g = GridConfig::parse("5.0, 0.5, 10.5, 9, 11, 13, 1.2").unwrap();
        assert_eq!(g.n2, 9);
        assert_eq!(g.ny, 13);
        assert!(GridConfig::parse("1,2,3").is_err());
    }

    #[test]
    fn schedule_parsing() {
        assert_eq!(
            parse_schedule("default").unwrap(),
            ebe_core::solver::default_schedule()
        );
        assert_eq!(parse_schedule("1, 0.1, 0").unwrap(), vec![1.0, 0.1, 0.0]);
        assert!(parse_schedule("1, 0.1").is_err());
        assert!(parse_schedule("-1, 0").is_err());
    }
}
