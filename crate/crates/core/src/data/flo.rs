//! Middlebury `.flo`: the float `202021.25` (bytes `PIEH`), `i32` width,
//! `i32` height, then interleaved `(u, v)` `f32` pairs in row-major order,
//! all little-endian.

use std::fs;
use std::path::Path;

use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::flow::FlowField;

pub const FLO_MAGIC: f32 = 202021.25;

pub fn encode_flo(f: &FlowField) -> Vec<u8> {
    let (w, h) = f.extent();
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    let (u, v) = (f.u(), f.v());
    for i in 0..w * h {
        out.extend_from_slice(&u[i].to_le_bytes());
        out.extend_from_slice(&v[i].to_le_bytes());
    }
    out
}

pub fn decode_flo(buf: &[u8]) -> Result<FlowField> {
    let mut r = ByteReader::new(buf, "flo");
    let magic = r.f32("magic")?;
    if magic.to_bits() != FLO_MAGIC.to_bits() {
        return Err(r.error(
            0,
            format!("bad magic {magic} (bytes {:02x?}), expected {FLO_MAGIC}", &buf[..4]),
        ));
    }
    let w = r.i32("width")?;
    let h = r.i32("height")?;
    if w <= 0 || h <= 0 {
        return Err(r.error(4, format!("non-positive extent {w}x{h}")));
    }
    let n = w as usize * h as usize;
    let need = 8 * n;
    if r.remaining() < need {
        return Err(r.error(
            buf.len(),
            format!("truncated payload: {w}x{h} needs {need} bytes, found {}", r.remaining()),
        ));
    }
    let mut data = vec![0f32; 2 * n];
    for i in 0..n {
        data[i] = r.f32("u")?;
        data[n + i] = r.f32("v")?;
    }
    if r.remaining() != 0 {
        return Err(r.error(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    FlowField::new(w as usize, h as usize, data).map_err(|e| match e {
        Error::Domain { detail, .. } => r.error(12, detail),
        e => e,
    })
}

pub fn write_flo(path: impl AsRef<Path>, f: &FlowField) -> Result<()> {
    fs::write(path, encode_flo(f))?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&fs::read(path)?)
}
