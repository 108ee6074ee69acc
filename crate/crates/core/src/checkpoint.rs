//! Binary checkpoint files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "SERC" | u32 version | u32 epoch | u64 global_step | f64 dev_cat_loss | [u8; 32] config hash
//! u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u32 rank | u64 dims[rank] | f64 payload
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Result, SerError};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SERC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub global_step: u64,
    pub dev_cat_loss: f64,
    pub config_hash: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: IndexMap<String, Tensor>,
}

/// SHA-256 of the model configuration's canonical JSON.
pub fn config_hash(cfg: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("model config serializes");
    Sha256::digest(&json).into()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(format!("truncated at byte {} (wanted {n} more)", self.pos));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, epoch: u32, global_step: u64, dev_cat_loss: f64) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                epoch,
                global_step,
                dev_cat_loss,
                config_hash: config_hash(model.config()),
            },
            tensors: model.state(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.meta.epoch.to_le_bytes());
        out.extend_from_slice(&self.meta.global_step.to_le_bytes());
        out.extend_from_slice(&self.meta.dev_cat_loss.to_le_bytes());
        out.extend_from_slice(&self.meta.config_hash);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic (not a SERC checkpoint)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let epoch = r.u32()?;
        let global_step = r.u64()?;
        let dev_cat_loss = r.f64()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u32()?;
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| format!("tensor name is not UTF-8: {e}"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64()?);
            }
            let t = Tensor::new(shape, data).map_err(|e| format!("tensor '{name}': {e}"))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(format!("duplicate tensor '{name}'"));
            }
        }
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        Ok(Checkpoint {
            meta: CheckpointMeta {
                epoch,
                global_step,
                dev_cat_loss,
                config_hash,
            },
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| SerError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| SerError::io(path, e))?;
        Checkpoint::from_bytes(&buf).map_err(|d| SerError::format(path, d))
    }

    /// Builds a model for `cfg` and loads these tensors into it. A config-hash
    /// mismatch is only a warning; any name or shape mismatch is an error.
    pub fn to_model(&self, cfg: &ModelConfig) -> Result<Model> {
        if config_hash(cfg) != self.meta.config_hash {
            log::warn!("checkpoint config hash differs from the model configuration");
        }
        let mut model = Model::new(cfg.clone())?;
        model.load_state(&self.tensors)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut model = Model::new(ModelConfig::small(2)).unwrap();
        model.params_mut().get_mut("head.cat.bias").unwrap().value.data_mut()[0] = -0.0;
        model.params_mut().get_mut("head.cat.bias").unwrap().value.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let ck = Checkpoint::from_model(&model, 4, 123, 0.75);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, ck.meta);
        for (name, t) in &ck.tensors {
            let b = &back.tensors[name];
            assert_eq!(t.shape(), b.shape());
            assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.to_model(model.config()).unwrap(), model);
    }

    #[test]
    fn header_layout() {
        let model = Model::new(ModelConfig::small(0)).unwrap();
        let bytes = Checkpoint::from_model(&model, 7, 9, 1.5).to_bytes();
        assert_eq!(&bytes[..4], b"SERC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 9);
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), 1.5);
        assert_eq!(&bytes[28..60], &config_hash(model.config()));
        assert_eq!(
            u32::from_le_bytes(bytes[60..64].try_into().unwrap()) as usize,
            model.params().len()
        );
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let model = Model::new(ModelConfig::small(0)).unwrap();
        let bytes = Checkpoint::from_model(&model, 1, 1, 1.0).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3])
            .unwrap_err()
            .contains("truncated"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().contains("magic"));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).unwrap_err().contains("trailing"));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let small = Model::new(ModelConfig::small(0)).unwrap();
        let ck = Checkpoint::from_model(&small, 1, 1, 1.0);
        let mut cfg = ModelConfig::small(0);
        cfg.embed_dim = 9;
        match ck.to_model(&cfg) {
            Err(SerError::Incompatible { tensor, .. }) => assert_eq!(tensor, "head.embed.weight"),
            other => panic!("expected incompatible tensor error, got {other:?}"),
        }
    }
}
