use std::fmt;
use std::str::FromStr;

use super::{FlowField, OcclusionMask};
use crate::error::{invalid, Error, Result};
use crate::image::Image;

/// Exact whole-image transforms: flips and quarter turns. Every kind is a
/// bijection of the pixel lattice, so transformed flow can be restored
/// without interpolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
    Identity,
    HFlip,
    VFlip,
    Rot90Cw,
    Rot180,
    Rot270Cw,
}

impl TransformKind {
    pub const ALL: [TransformKind; 6] = [
        TransformKind::Identity,
        TransformKind::HFlip,
        TransformKind::VFlip,
        TransformKind::Rot90Cw,
        TransformKind::Rot180,
        TransformKind::Rot270Cw,
    ];

    /// The kind that undoes this one.
    pub fn inverse(self) -> TransformKind {
        match self {
            TransformKind::Rot90Cw => TransformKind::Rot270Cw,
            TransformKind::Rot270Cw => TransformKind::Rot90Cw,
            k => k,
        }
    }

    pub fn swaps_axes(self) -> bool {
        matches!(self, TransformKind::Rot90Cw | TransformKind::Rot270Cw)
    }

    /// Signed permutation acting on flow vectors `(u, v)` (image axes, y down).
    pub fn jacobian(self) -> [[i8; 2]; 2] {
        match self {
            TransformKind::Identity => [[1, 0], [0, 1]],
            TransformKind::HFlip => [[-1, 0], [0, 1]],
            TransformKind::VFlip => [[1, 0], [0, -1]],
            // (u, v) -> (-v, u)
            TransformKind::Rot90Cw => [[0, -1], [1, 0]],
            TransformKind::Rot180 => [[-1, 0], [0, -1]],
            // (u, v) -> (v, -u)
            TransformKind::Rot270Cw => [[0, 1], [-1, 0]],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::HFlip => "hflip",
            TransformKind::VFlip => "vflip",
            TransformKind::Rot90Cw => "rot90cw",
            TransformKind::Rot180 => "rot180",
            TransformKind::Rot270Cw => "rot270cw",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown transform `{s}`")))
    }
}

/// A transform bound to a source extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeoTransform {
    kind: TransformKind,
    width: usize,
    height: usize,
}

impl GeoTransform {
    pub fn new(kind: TransformKind, width: usize, height: usize) -> Self {
        Self {
            kind,
            width,
            height,
        }
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn source_extent(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn output_extent(&self) -> (usize, usize) {
        if self.kind.swaps_axes() {
            (self.height, self.width)
        } else {
            (self.width, self.height)
        }
    }

    /// Pixel map `P`: where source pixel `(x, y)` lands.
    #[inline]
    pub fn map_pixel(&self, x: usize, y: usize) -> (usize, usize) {
        let (w, h) = (self.width, self.height);
        match self.kind {
            TransformKind::Identity => (x, y),
            TransformKind::HFlip => (w - 1 - x, y),
            TransformKind::VFlip => (x, h - 1 - y),
            TransformKind::Rot90Cw => (h - 1 - y, x),
            TransformKind::Rot180 => (w - 1 - x, h - 1 - y),
            TransformKind::Rot270Cw => (y, w - 1 - x),
        }
    }

    #[inline]
    pub fn map_vector(&self, u: f32, v: f32) -> (f32, f32) {
        let j = self.kind.jacobian();
        (
            j[0][0] as f32 * u + j[0][1] as f32 * v,
            j[1][0] as f32 * u + j[1][1] as f32 * v,
        )
    }

    /// The restoring transform `R`, bound to this transform's output extent.
    pub fn inverse(&self) -> GeoTransform {
        let (w, h) = self.output_extent();
        GeoTransform::new(self.kind.inverse(), w, h)
    }

    fn check(&self, w: usize, h: usize, what: &str) -> Result<()> {
        if (w, h) != (self.width, self.height) {
            return Err(invalid(format!(
                "{} transform built for {}x{} applied to {what} of {w}x{h}",
                self.kind, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Gather plan for a `2 x H x W` flow buffer: output element `i` equals
    /// `sign[i] * input[index[i]]`. Used to apply the transform inside a
    /// differentiable graph.
    pub fn flow_gather_plan(&self) -> (Vec<usize>, Vec<f32>) {
        let (w, h) = (self.width, self.height);
        let (ow, oh) = self.output_extent();
        let n = w * h;
        let j = self.kind.jacobian();
        let mut index = vec![0; 2 * n];
        let mut sign = vec![0.0; 2 * n];
        for y in 0..h {
            for x in 0..w {
                let (xo, yo) = self.map_pixel(x, y);
                let src = y * w + x;
                let dst = yo * ow + xo;
                debug_assert!(dst < ow * oh);
                for (row, jr) in j.iter().enumerate() {
                    // exactly one non-zero entry per row
                    let col = if jr[0] != 0 { 0 } else { 1 };
                    index[row * n + dst] = col * n + src;
                    sign[row * n + dst] = jr[col] as f32;
                }
            }
        }
        (index, sign)
    }
}

/// Moves every pixel `(x, y)` of `img` to `P(x, y)`.
pub fn transform_image(img: &Image, t: &GeoTransform) -> Result<Image> {
    t.check(img.width(), img.height(), "image")?;
    let (ow, oh) = t.output_extent();
    let mut out = Image::zeros(ow, oh, img.channels())?;
    for c in 0..img.channels() {
        for y in 0..img.height() {
            for x in 0..img.width() {
                let (xo, yo) = t.map_pixel(x, y);
                out.set(c, xo, yo, img.get(c, x, y));
            }
        }
    }
    Ok(out)
}

/// `g(P(p)) = J f(p)` for every pixel `p`.
pub fn transform_flow(f: &FlowField, t: &GeoTransform) -> Result<FlowField> {
    t.check(f.width(), f.height(), "flow")?;
    let (ow, oh) = t.output_extent();
    let mut out = FlowField::zeros(ow, oh);
    for y in 0..f.height() {
        for x in 0..f.width() {
            let (u, v) = f.get(x, y);
            let (xo, yo) = t.map_pixel(x, y);
            let (uo, vo) = t.map_vector(u, v);
            out.set(xo, yo, uo, vo);
        }
    }
    Ok(out)
}

/// Brings a flow estimated in the frame of `t` back to the source frame.
pub fn restore_flow(f: &FlowField, t: &GeoTransform) -> Result<FlowField> {
    transform_flow(f, &t.inverse())
}

pub fn transform_mask(m: &OcclusionMask, t: &GeoTransform) -> Result<OcclusionMask> {
    t.check(m.width(), m.height(), "mask")?;
    let (ow, oh) = t.output_extent();
    let mut values = vec![0.0; ow * oh];
    for y in 0..m.height() {
        for x in 0..m.width() {
            let (xo, yo) = t.map_pixel(x, y);
            values[yo * ow + xo] = m.get(x, y);
        }
    }
    match m.kind() {
        super::MaskKind::Binary => OcclusionMask::binary(ow, oh, values),
        super::MaskKind::Soft => OcclusionMask::soft(ow, oh, values),
    }
}
