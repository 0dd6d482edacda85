//! Colour-wheel flow rendering: hue encodes direction, saturation encodes
//! magnitude relative to a percentile of the field's magnitudes.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use occflow_core::flow::FlowField;

pub const DEFAULT_PERCENTILE: f64 = 99.0;

/// Nearest-rank percentile of the flow magnitudes.
pub fn magnitude_percentile(flow: &FlowField, percentile: f64) -> f64 {
    let mut m = flow.magnitudes();
    if m.is_empty() {
        return 0.0;
    }
    m.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * m.len() as f64).ceil() as usize;
    m[rank.clamp(1, m.len()) - 1]
}

/// Hue in degrees `[0, 360)` of the vector `(u, v)`.
pub fn flow_hue(u: f64, v: f64) -> f64 {
    v.atan2(u).to_degrees().rem_euclid(360.0)
}

/// `h` in degrees, `s` and `v` in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Row-major RGB pixels. Zero flow is white; a magnitude at or above the
/// percentile is fully saturated.
pub fn flow_to_rgb(flow: &FlowField, percentile: f64) -> Vec<[u8; 3]> {
    let norm = magnitude_percentile(flow, percentile);
    let norm = if norm > 0.0 { norm } else { 1.0 };
    flow.u()
        .iter()
        .zip(flow.v())
        .map(|(&u, &v)| {
            let (u, v) = (u as f64, v as f64);
            let s = ((u * u + v * v).sqrt() / norm).min(1.0);
            hsv_to_rgb(flow_hue(u, v), s, 1.0).map(to_u8)
        })
        .collect()
}

/// Darkens pixels by visibility: fully occluded pixels keep a quarter of
/// their brightness.
pub fn overlay_visibility(rgb: &mut [[u8; 3]], visibility: &[f32]) -> Result<()> {
    if rgb.len() != visibility.len() {
        bail!("{} pixels but {} visibility values", rgb.len(), visibility.len());
    }
    for (p, &o) in rgb.iter_mut().zip(visibility) {
        let f = 0.25 + 0.75 * o.clamp(0.0, 1.0) as f64;
        *p = p.map(|c| to_u8(c as f64 / 255.0 * f));
    }
    Ok(())
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    if rgb.len() != width * height {
        bail!("{} pixels for a {width}x{height} image", rgb.len());
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(&rgb.concat())?;
    Ok(())
}

pub fn render_flow_png(
    path: &Path,
    flow: &FlowField,
    visibility: Option<&[f32]>,
    percentile: f64,
) -> Result<()> {
    let mut rgb = flow_to_rgb(flow, percentile);
    if let Some(vis) = visibility {
        overlay_visibility(&mut rgb, vis)?;
    }
    write_png(path, flow.width(), flow.height(), &rgb)
}
