//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ATAC"  u32 version
//! u32 len, UTF-8 network description (model + scoring config text)
//! u64 epochs completed, u64 seed, u64 optimizer step
//! f64 beta1, beta2, eps, weight_decay
//! u32 tensor count, then per tensor:
//!     u32 len, UTF-8 name; u32 ndim; ndim × u32 dims; f32 data
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Tensor names are `param/<name>`, `adam.m/<name>` and `adam.v/<name>` in
//! canonical parameter order. Random streams are derived from the seed and
//! the epoch number, so the seed and epoch are all the generator state a
//! resumed run needs.

use std::path::Path;

use super::adam::{AdamConfig, AdamState};
use crate::config::Doc;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::scoring::ScoringConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ATAC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub scoring: ScoringConfig,
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
}

impl Checkpoint {
    /// Fresh checkpoint with zero optimizer state.
    pub fn initial(model: ModelConfig, scoring: ScoringConfig, params: ModelParams<f32>, adam: AdamConfig, seed: u64) -> Self {
        let state = AdamState::new(adam, &params.leaves());
        Self {
            model,
            scoring,
            params,
            adam: state,
            epoch: 0,
            seed,
        }
    }

    pub fn description(model: &ModelConfig, scoring: &ScoringConfig) -> String {
        let mut doc = Doc::new();
        model.write(&mut doc);
        scoring.write(&mut doc);
        doc.to_string()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &Self::description(&self.model, &self.scoring));
        for v in [self.epoch, self.seed, self.adam.step] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let c = self.adam.config;
        for v in [c.beta1, c.beta2, c.eps, c.weight_decay] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let names = self.params.names();
        let groups: [(&str, Vec<&Tensor<f32>>); 3] = [
            ("param", self.params.leaves()),
            ("adam.m", self.adam.m.iter().collect()),
            ("adam.v", self.adam.v.iter().collect()),
        ];
        put_u32(&mut out, (names.len() * 3) as u32);
        for (prefix, tensors) in &groups {
            for (name, t) in names.iter().zip(tensors) {
                put_str(&mut out, &format!("{prefix}/{name}"));
                put_u32(&mut out, t.ndim() as u32);
                for &d in t.shape() {
                    put_u32(&mut out, d as u32);
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:02x?}, expected \"ATAC\"",
                &bytes[..bytes.len().min(4)]
            )));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        if bytes.len() < 8 {
            return Err(truncated());
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("CRC mismatch; the file is corrupt or truncated".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };

        let desc = r.string()?;
        let mut doc = Doc::parse(&desc)?;
        let model = ModelConfig::read(&mut doc)?;
        let scoring = ScoringConfig::read(&mut doc)?;
        doc.ensure_consumed()?;
        model.validate()?;

        let epoch = r.u64()?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let config = AdamConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            weight_decay: r.f64()?,
        };

        let shapes = model.param_shapes();
        let names = shapes.names();
        let expected = shapes.leaves();
        let count = r.u32()? as usize;
        if count != names.len() * 3 {
            return Err(Error::Checkpoint(format!("{count} tensors, expected {}", names.len() * 3)));
        }
        let mut groups: Vec<Vec<Tensor<f32>>> = Vec::new();
        for prefix in ["param", "adam.m", "adam.v"] {
            let mut tensors = Vec::with_capacity(names.len());
            for (name, shape) in names.iter().zip(&expected) {
                let want = format!("{prefix}/{name}");
                let got = r.string()?;
                if got != want {
                    return Err(Error::Checkpoint(format!("tensor `{got}` found where `{want}` was expected")));
                }
                let ndim = r.u32()? as usize;
                let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                if &dims != *shape {
                    return Err(Error::Checkpoint(format!("{want} has shape {dims:?}, expected {shape:?}")));
                }
                let n: usize = dims.iter().product();
                let raw = r.take(n * 4)?;
                let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
                tensors.push(Tensor::new(dims, data)?);
            }
            groups.push(tensors);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let v = groups.pop().expect("three groups");
        let m = groups.pop().expect("three groups");
        let params = shapes.with_leaves(groups.pop().expect("three groups"))?;
        Ok(Self {
            model,
            scoring,
            params,
            adam: AdamState { config, step, m, v },
            epoch,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn truncated() -> Error {
    Error::Checkpoint("file is truncated".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}
