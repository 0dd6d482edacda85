//! Weight file layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "OCFLCKPT" | version | config hash (32 bytes) | block count
//! per block: name length | UTF-8 name | ndim | dims... | f32 values
//! ```

use std::fs;
use std::path::Path;

use super::{FlowModel, ModelConfig};
use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OCFLCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &FlowModel, config_hash: [u8; 32]) -> Self {
        Self {
            config_hash,
            params: model.params().to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf, "checkpoint");
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.error(0, format!("bad magic {magic:?}")));
        }
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error(at, format!("unsupported version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32, "config hash")?.try_into().unwrap();
        let count = r.u32("block count")? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let at = r.offset();
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.error(at + 4, "parameter name is not UTF-8"))?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            if n == 0 || r.remaining() / 4 < n {
                return Err(r.error(
                    r.offset(),
                    format!("block `{name}` with shape {shape:?} exceeds the file"),
                ));
            }
            let data = (0..n).map(|_| r.f32("value")).collect::<Result<Vec<_>>>()?;
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(r.error(r.offset(), "trailing bytes after last block"));
        }
        Ok(Self {
            config_hash,
            params,
        })
    }

    /// Rebuilds the model after checking the stored hash against `expected`.
    pub fn into_model(self, config: ModelConfig, expected_hash: &[u8; 32]) -> Result<FlowModel> {
        if &self.config_hash != expected_hash {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match expected {}",
                hex(&self.config_hash),
                hex(expected_hash)
            )));
        }
        FlowModel::from_params(config, self.params)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            feature_channels: 3,
            hidden_channels: 4,
            context_channels: 2,
            radius: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = FlowModel::new(small()).unwrap();
        let c = Checkpoint::from_model(&m, [7; 32]);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let m2 = back.into_model(small(), &[7; 32]).unwrap();
        assert_eq!(m2, m);
    }

    #[test]
    fn hash_mismatch_is_rejected() {
        let m = FlowModel::new(small()).unwrap();
        let c = Checkpoint::from_model(&m, [1; 32]);
        assert!(matches!(
            c.into_model(small(), &[2; 32]),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let m = FlowModel::new(small()).unwrap();
        let bytes = Checkpoint::from_model(&m, [0; 32]).to_bytes();
        match Checkpoint::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 48),
            other => panic!("{other:?}"),
        }
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }

    #[test]
    fn wrong_architecture_is_rejected() {
        let m = FlowModel::new(small()).unwrap();
        let c = Checkpoint::from_model(&m, [0; 32]);
        let other = ModelConfig {
            feature_channels: 5,
            ..small()
        };
        assert!(c.into_model(other, &[0; 32]).is_err());
    }
}
