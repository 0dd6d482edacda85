//! Binary 8-bit PPM (`P6`, maxval 255). Pixel values map to `[0, 1]` as
//! `byte / 255`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        format: "ppm",
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token(buf: &[u8], pos: &mut usize) -> Result<(usize, String)> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err(start, "header ended early"));
    }
    Ok((start, String::from_utf8_lossy(&buf[start..*pos]).into_owned()))
}

fn number(buf: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let (at, t) = token(buf, pos)?;
    t.parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| format_err(at, format!("{what} `{t}` is not a positive integer")))
}

pub fn decode_ppm(buf: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let (_, magic) = token(buf, &mut pos)?;
    match magic.as_str() {
        "P6" => {}
        "P3" => {
            return Err(Error::Unsupported {
                format: "ppm",
                detail: "ASCII P3 images are not supported, use binary P6".into(),
            })
        }
        m => return Err(format_err(0, format!("unknown magic `{m}`"))),
    }
    let w = number(buf, &mut pos, "width")?;
    let h = number(buf, &mut pos, "height")?;
    let maxval = number(buf, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Unsupported {
            format: "ppm",
            detail: format!("maxval {maxval}; only 8-bit (255) is supported"),
        });
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(format_err(pos, "missing whitespace after maxval"));
    }
    pos += 1;
    let need = 3 * w * h;
    if buf.len() - pos != need {
        return Err(format_err(
            pos,
            format!("{w}x{h} payload needs {need} bytes, found {}", buf.len() - pos),
        ));
    }
    let px = &buf[pos..];
    Image::from_fn(w, h, 3, |c, x, y| px[3 * (y * w + x) + c] as f32 / 255.0)
}

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::Unsupported {
            format: "ppm",
            detail: format!("{} channels; P6 stores RGB", img.channels()),
        });
    }
    let (w, h) = (img.width(), img.height());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img.get(c, x, y).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_header_parses() {
        let mut buf = b"P6\n2 2\n255\n".to_vec();
        buf.extend([255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153]);
        let img = decode_ppm(&buf).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 2, 3));
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(1, 1, 0), 1.0);
        assert_eq!(img.get(2, 0, 1), 1.0);
        assert_eq!(img.get(1, 1, 1), 0.4);
        assert_eq!(encode_ppm(&img).unwrap(), buf);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let mut buf = b"P6 # made by hand\n1 1\n255\n".to_vec();
        buf.extend([1, 2, 3]);
        assert_eq!(decode_ppm(&buf).unwrap().get(2, 0, 0), 3.0 / 255.0);
    }

    #[test]
    fn ascii_and_deep_images_are_unsupported() {
        assert!(matches!(
            decode_ppm(b"P3\n1 1\n255\n0 0 0\n"),
            Err(Error::Unsupported { .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(Error::Unsupported { .. })
        ));
    }

    #[test]
    fn malformed_headers_are_rejected() {
        assert!(decode_ppm(b"P6\n2 x\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0").is_err());
        assert!(decode_ppm(b"").is_err());
    }
}
