//! Dataset manifest: one line per sequence directory, followed by its
//! frame files in temporal order. Blank lines and `#` comments are ignored.
//!
//! ```text
//! seq_000 frame_00.ppm frame_01.ppm frame_02.ppm
//! ```

use std::fmt;
use std::path::Path;

use super::ppm::read_ppm;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub dir: String,
    pub frames: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace().map(str::to_string);
            let dir = parts.next().expect("non-empty line");
            let frames: Vec<String> = parts.collect();
            if frames.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "manifest line {}: sequence `{dir}` lists no frames",
                    i + 1
                )));
            }
            entries.push(ManifestEntry { dir, frames });
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Reads every sequence's frames, resolving directories against `root`.
    pub fn read_frames(&self, root: impl AsRef<Path>) -> Result<Vec<Vec<Image>>> {
        self.entries
            .iter()
            .map(|e| {
                e.frames
                    .iter()
                    .map(|f| read_ppm(root.as_ref().join(&e.dir).join(f)))
                    .collect()
            })
            .collect()
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            write!(f, "{}", e.dir)?;
            for fr in &e.frames {
                write!(f, " {fr}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
