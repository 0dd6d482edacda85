//! Empirical displacement CDFs per axis over `[-100, 100]`.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Result};
use occflow_core::flow::FlowField;

use crate::viz::write_png;

pub const RANGE: f64 = 100.0;
/// Grid spacing of the CSV.
pub const GRID_STEP: f64 = 0.5;
/// `|median(v)|` above this is reported as asymmetric.
pub const ASYMMETRY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementCdf {
    /// Sorted inlier values per axis.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Values outside `[-RANGE, RANGE]`, per axis.
    pub outliers: (usize, usize),
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Fraction of `sorted` that is `<= x`.
fn cdf_at(sorted: &[f64], x: f64) -> f64 {
    sorted.partition_point(|&s| s <= x) as f64 / sorted.len() as f64
}

/// Gathers every displacement of `fields`, excluding values outside the
/// range on each axis independently.
pub fn displacement_cdf(fields: &[FlowField]) -> Result<DisplacementCdf> {
    if fields.is_empty() {
        bail!("no flow fields given");
    }
    let mut u = Vec::new();
    let mut v = Vec::new();
    let mut outliers = (0, 0);
    for f in fields {
        for (&a, &b) in f.u().iter().zip(f.v()) {
            let (a, b) = (a as f64, b as f64);
            if a.abs() <= RANGE {
                u.push(a);
            } else {
                outliers.0 += 1;
            }
            if b.abs() <= RANGE {
                v.push(b);
            } else {
                outliers.1 += 1;
            }
        }
    }
    if u.is_empty() || v.is_empty() {
        bail!("every displacement lies outside [-{RANGE}, {RANGE}]");
    }
    u.sort_by(f64::total_cmp);
    v.sort_by(f64::total_cmp);
    Ok(DisplacementCdf { u, v, outliers })
}

impl DisplacementCdf {
    pub fn cdf_u(&self, x: f64) -> f64 {
        cdf_at(&self.u, x)
    }

    pub fn cdf_v(&self, x: f64) -> f64 {
        cdf_at(&self.v, x)
    }

    pub fn median_u(&self) -> f64 {
        median(&self.u)
    }

    pub fn median_v(&self) -> f64 {
        median(&self.v)
    }

    pub fn asymmetric(&self) -> bool {
        self.median_v().abs() > ASYMMETRY_THRESHOLD
    }

    pub fn grid() -> impl Iterator<Item = f64> {
        let n = (2.0 * RANGE / GRID_STEP).round() as usize;
        (0..=n).map(|i| -RANGE + i as f64 * GRID_STEP)
    }

    /// `value,cdf_u,cdf_v` on the grid.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("value,cdf_u,cdf_v\n");
        for x in Self::grid() {
            let _ = writeln!(s, "{x},{:.8},{:.8}", self.cdf_u(x), self.cdf_v(x));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "samples_u={} samples_v={} outliers_u={} outliers_v={} median_u={:.4} median_v={:.4} asymmetric={}\n",
            self.u.len(),
            self.v.len(),
            self.outliers.0,
            self.outliers.1,
            self.median_u(),
            self.median_v(),
            self.asymmetric()
        )
    }

    /// Both curves on a white canvas: `u` red, `v` blue, the zero
    /// displacement and the 0.5 level in grey.
    pub fn plot_png(&self, path: &Path) -> Result<()> {
        let (w, h, pad) = (420usize, 240usize, 10usize);
        let mut px = vec![[255u8; 3]; w * h];
        let (pw, ph) = (w - 2 * pad, h - 2 * pad);
        let to_x = |x: f64| pad + ((x + RANGE) / (2.0 * RANGE) * (pw - 1) as f64).round() as usize;
        let to_y = |c: f64| pad + ((1.0 - c) * (ph - 1) as f64).round() as usize;
        let grey = [180, 180, 180];
        for y in pad..pad + ph {
            px[y * w + to_x(0.0)] = grey;
            px[y * w + pad] = [0, 0, 0];
        }
        for x in pad..pad + pw {
            px[to_y(0.5) * w + x] = grey;
            px[to_y(0.0) * w + x] = [0, 0, 0];
        }
        for (curve, colour) in [(&self.u, [220, 30, 30]), (&self.v, [30, 30, 220])] {
            let mut prev = None;
            for i in 0..pw {
                let x = -RANGE + 2.0 * RANGE * i as f64 / (pw - 1) as f64;
                let y = to_y(cdf_at(curve, x));
                let (lo, hi) = match prev {
                    Some(p) if p < y => (p, y),
                    Some(p) => (y, p),
                    None => (y, y),
                };
                for yy in lo..=hi {
                    px[yy * w + pad + i] = colour;
                }
                prev = Some(y);
            }
        }
        write_png(path, w, h, &px)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_steps_at_zero() {
        let c = displacement_cdf(&[FlowField::zeros(4, 4)]).unwrap();
        assert_eq!(c.cdf_u(-0.5), 0.0);
        assert_eq!(c.cdf_u(0.0), 1.0);
        assert_eq!(c.cdf_v(0.0), 1.0);
        assert!(!c.asymmetric());
    }

    #[test]
    fn constant_vertical_motion() {
        let c = displacement_cdf(&[FlowField::constant(3, 3, 0.0, 5.0)]).unwrap();
        assert_eq!(c.cdf_v(4.5), 0.0);
        assert_eq!(c.cdf_v(5.0), 1.0);
        assert_eq!(c.median_v(), 5.0);
        assert!(c.asymmetric());
    }

    #[test]
    fn outliers_are_excluded_per_axis() {
        let f = FlowField::new(2, 1, vec![150.0, 1.0, -2.0, -101.0]).unwrap();
        let c = displacement_cdf(&[f]).unwrap();
        assert_eq!(c.u, vec![1.0]);
        assert_eq!(c.v, vec![-2.0]);
        assert_eq!(c.outliers, (1, 1));
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(displacement_cdf(&[]).is_err());
        assert!(displacement_cdf(&[FlowField::constant(1, 1, 200.0, 0.0)]).is_err());
    }

    #[test]
    fn csv_covers_the_grid() {
        let c = displacement_cdf(&[FlowField::constant(2, 2, 1.0, -1.0)]).unwrap();
        let csv = c.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "value,cdf_u,cdf_v");
        assert_eq!(lines.len(), 1 + 401);
        assert_eq!(lines[1], "-100,0.00000000,0.00000000");
        assert_eq!(lines[401], "100,1.00000000,1.00000000");
    }
}
