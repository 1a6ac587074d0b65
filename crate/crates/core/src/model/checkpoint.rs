//! Binary checkpoint: magic, format version, canonical config text with
//! training metadata, named parameter records, trailing SHA-256.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{build_model, AudioToTextModel, ModelConfig, ModelError};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"IMGSTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub dev_metric: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn of(model: &AudioToTextModel, meta: CheckpointMeta) -> Self {
        Self {
            config: model.config().clone(),
            meta,
            params: model
                .parameters()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Rebuilds the full model described by the checkpoint.
    pub fn to_model(&self) -> Result<AudioToTextModel, ModelError> {
        let mut model = build_model(&self.config, 0)?;
        if model.parameters().len() != self.params.len() {
            return Err(ModelError::Format(format!(
                "{} parameter records, config implies {}",
                self.params.len(),
                model.parameters().len()
            )));
        }
        for (name, value) in &self.params {
            let slot = model
                .param_mut(name)
                .ok_or_else(|| ModelError::Format(format!("unknown parameter {name}")))?;
            if slot.shape() != value.shape() {
                return Err(ModelError::Format(format!("shape mismatch for {name}")));
            }
            *slot = value.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);
        let mut header = self.config.to_canonical();
        header.push_str(&format!(
            "meta.epoch={}\nmeta.dev_metric={}\nmeta.seed={}\n",
            self.meta.epoch, self.meta.dev_metric, self.meta.seed
        ));
        put_u32(&mut buf, header.len() as u32);
        buf.extend_from_slice(header.as_bytes());
        put_u32(&mut buf, self.params.len() as u32);
        for (name, t) in &self.params {
            put_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut buf, d as u32);
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(ModelError::Format("not a checkpoint".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ModelError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| ModelError::Format("header is not utf-8".into()))?;
        let config = ModelConfig::from_canonical(header)?;
        let meta_field = |k: &str| {
            header
                .lines()
                .find_map(|l| l.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| ModelError::Format(format!("missing {k}")))
        };
        let bad = |k: &str| ModelError::Format(format!("bad {k}"));
        let meta = CheckpointMeta {
            epoch: meta_field("meta.epoch")?.parse().map_err(|_| bad("epoch"))?,
            dev_metric: meta_field("meta.dev_metric")?
                .parse()
                .map_err(|_| bad("dev_metric"))?,
            seed: meta_field("meta.seed")?.parse().map_err(|_| bad("seed"))?,
        };
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| ModelError::Format("parameter name is not utf-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let count: usize = shape.iter().product();
            let data = r
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| ModelError::Format(e.to_string()))?;
            params.push((name, t));
        }
        if r.pos != body.len() {
            return Err(ModelError::Format("trailing bytes".into()));
        }
        Ok(Self {
            config,
            meta,
            params,
        })
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), ModelError> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

impl AudioToTextModel {
    /// Copies the learnable parameters of `checkpoint` into this model after
    /// checking that configs agree and every frozen parameter is identical.
    pub fn init_from_checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<(), ModelError> {
        let mut differing = self.config().differing_fields(&checkpoint.config);
        if differing.is_empty() {
            for (name, value) in &checkpoint.params {
                let Some(i) = self.parameters().iter().position(|p| &p.name == name) else {
                    differing.push(name.clone());
                    continue;
                };
                let p = &self.parameters()[i];
                if !p.learnable() && (p.value.shape() != value.shape() || p.value.data() != value.data()) {
                    differing.push(name.clone());
                }
            }
        }
        if !differing.is_empty() {
            return Err(ModelError::Compatibility(differing));
        }
        for (name, value) in &checkpoint.params {
            let p = self
                .params_mut()
                .iter_mut()
                .find(|p| &p.name == name)
                .expect("checked above");
            if p.learnable() {
                p.value = value.clone();
            }
        }
        Ok(())
    }
}
