//! Flow fields, occlusion masks, geometric transforms and metrics.

mod metrics;
mod transform;

pub use metrics::{epe, fl_outlier_rate};
pub use transform::{
    restore_flow, transform_flow, transform_image, transform_mask, GeoTransform, TransformKind,
};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Dense displacement field. `u` points right (+x), `v` points down (+y).
/// Stored as two planes, `u` first, matching a `1 x 2 x H x W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("flow extent {width}x{height}")));
        }
        if data.len() != 2 * width * height {
            return Err(invalid(format!(
                "{width}x{height} flow needs {} values, got {}",
                2 * width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "FlowField::new",
                detail: format!("non-finite component at flat index {i}"),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        Self::from_fn(width, height, |_, _| (u, v))
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let n = width * height;
        let mut data = vec![0.0; 2 * n];
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(x, y);
                data[y * width + x] = u;
                data[n + y * width + x] = v;
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Builds a field from a `1 x 2 x H x W` (or `2 x H x W`) buffer.
    pub fn from_tensor_data<T: Scalar>(shape: &[usize], data: &[T]) -> Result<Self> {
        let (h, w) = match shape {
            [1, 2, h, w] | [2, h, w] => (*h, *w),
            _ => {
                return Err(Error::Shape {
                    op: "FlowField::from_tensor_data",
                    lhs: shape.to_vec(),
                    rhs: vec![1, 2, 0, 0],
                })
            }
        };
        Self::new(w, h, data.iter().map(|v| v.into_f64() as f32).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn u(&self) -> &[f32] {
        &self.data[..self.width * self.height]
    }

    pub fn v(&self) -> &[f32] {
        &self.data[self.width * self.height..]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.data[i], self.data[self.width * self.height + i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, u: f32, v: f32) {
        let i = y * self.width + x;
        let n = self.width * self.height;
        self.data[i] = u;
        self.data[n + i] = v;
    }

    /// Bilinear lookup at a continuous position, clamped to the border.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let n = self.width * self.height;
        let (u, v) = (&self.data[..n], &self.data[n..]);
        (
            bilinear(u, self.width, self.height, x, y),
            bilinear(v, self.width, self.height, x, y),
        )
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, 2, self.height, self.width],
            self.data.iter().map(|&v| T::of_f64(v as f64)).collect(),
        )
        .expect("flow extent is consistent")
    }

    /// Per-pixel Euclidean magnitude.
    pub fn magnitudes(&self) -> Vec<f64> {
        let (u, v) = (self.u(), self.v());
        u.iter()
            .zip(v)
            .map(|(&a, &b)| ((a as f64).powi(2) + (b as f64).powi(2)).sqrt())
            .collect()
    }
}

fn bilinear(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = (xc.floor() as usize).min(w.saturating_sub(2));
    let y0 = (yc.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = if w > 1 { xc - x0 as f64 } else { 0.0 };
    let fy = if h > 1 { yc - y0 as f64 } else { 0.0 };
    let p = |xx: usize, yy: usize| plane[yy * w + xx] as f64;
    (1.0 - fx) * (1.0 - fy) * p(x0, y0)
        + fx * (1.0 - fy) * p(x1, y0)
        + (1.0 - fx) * fy * p(x0, y1)
        + fx * fy * p(x1, y1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Ground truth, values in {0, 1}.
    Binary,
    /// Prediction, values strictly inside (0, 1).
    Soft,
}

/// Per-pixel occlusion indicator: 1 = visible, 0 = occluded.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask {
    width: usize,
    height: usize,
    values: Vec<f32>,
    kind: MaskKind,
}

impl OcclusionMask {
    pub fn binary(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        Self::checked_extent(width, height, values.len())?;
        if let Some(i) = values.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain {
                op: "OcclusionMask::binary",
                detail: format!("value {} at pixel {i} is not 0 or 1", values[i]),
            });
        }
        Ok(Self {
            width,
            height,
            values,
            kind: MaskKind::Binary,
        })
    }

    pub fn soft(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        Self::checked_extent(width, height, values.len())?;
        if let Some(i) = values.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Domain {
                op: "OcclusionMask::soft",
                detail: format!("value {} at pixel {i} is outside (0, 1)", values[i]),
            });
        }
        Ok(Self {
            width,
            height,
            values,
            kind: MaskKind::Soft,
        })
    }

    pub fn from_visibility(width: usize, height: usize, visible: &[bool]) -> Result<Self> {
        Self::binary(
            width,
            height,
            visible.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![1.0; width * height],
            kind: MaskKind::Binary,
        }
    }

    fn checked_extent(width: usize, height: usize, len: usize) -> Result<()> {
        if width == 0 || height == 0 || len != width * height {
            return Err(invalid(format!(
                "{width}x{height} mask with {len} values"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_visible(&self, x: usize, y: usize) -> bool {
        self.get(x, y) >= 0.5
    }

    /// Fraction of pixels below 0.5, i.e. occluded.
    pub fn occluded_fraction(&self) -> f64 {
        self.values.iter().filter(|&&v| v < 0.5).count() as f64 / self.values.len() as f64
    }

    /// Binary mask obtained by thresholding at 0.5.
    pub fn thresholded(&self) -> OcclusionMask {
        OcclusionMask {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
                .collect(),
            kind: MaskKind::Binary,
        }
    }
}

/// Per-pixel gate of the transformation-consistency loss: `true` where the
/// consistency error stayed below the threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdentifierMask {
    width: usize,
    height: usize,
    alpha: Vec<bool>,
}

impl IdentifierMask {
    pub fn new(width: usize, height: usize, alpha: Vec<bool>) -> Result<Self> {
        if alpha.len() != width * height {
            return Err(invalid(format!(
                "{width}x{height} identifier mask with {} values",
                alpha.len()
            )));
        }
        Ok(Self {
            width,
            height,
            alpha,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn alpha(&self) -> &[bool] {
        &self.alpha
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.alpha[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.alpha.iter().filter(|&&a| a).count()
    }

    pub fn all(&self) -> bool {
        self.alpha.iter().all(|&a| a)
    }
}
