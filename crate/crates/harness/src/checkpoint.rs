//! Versioned little-endian checkpoint file.
//!
//! Layout: magic `FMCK`, version u16, config JSON (u32 length + UTF-8),
//! group sizes (u32 count + u64 each), step u64, RNG seed u64, RNG word
//! position u128, then the parameters in declaration order, each as name
//! (u32 length + UTF-8), rank u32, dims u32 each and values f64 each.

use std::path::Path;

use fairmoe_core::moe::GroupStats;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 4] = b"FMCK";
pub const VERSION: u16 = 1;

pub type ParamValues = Vec<(String, Vec<usize>, Vec<f64>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub stats: GroupStats,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub params: ParamValues,
}

impl Checkpoint {
    pub fn capture(config: &ExperimentConfig, model: &Model, stats: &GroupStats, step: u64, rng_word_pos: u128) -> Self {
        Self {
            config: config.clone(),
            stats: stats.clone(),
            step,
            rng_seed: config.train.seed,
            rng_word_pos,
            params: model
                .params()
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.to_vec()))
                .collect(),
        }
    }

    /// Rebuilds the model and loads the stored values into it.
    pub fn model(&self) -> Result<Model> {
        let model = Model::build(&self.config.model, self.config.train.seed)?;
        model.load_values(&self.params)?;
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_string(&self.config).expect("config serializes");
        put_u32(&mut out, json.len());
        out.extend_from_slice(json.as_bytes());
        put_u32(&mut out, self.stats.groups());
        for &n in self.stats.sizes() {
            out.extend_from_slice(&n.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        put_u32(&mut out, self.params.len());
        for (name, dims, values) in &self.params {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, dims.len());
            for &d in dims {
                put_u32(&mut out, d);
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.fail(0, "bad magic"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(r.fail(4, format!("unsupported version {version}")));
        }
        let len = r.u32()?;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| r.fail(at, e.to_string()))?;
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| r.fail(at, e.to_string()))?;
        let groups = r.u32()?;
        let sizes = (0..groups).map(|_| Ok(u64::from_le_bytes(r.array()?))).collect::<Result<Vec<_>>>()?;
        let stats = GroupStats::new(sizes)?;
        let step = u64::from_le_bytes(r.array()?);
        let rng_seed = u64::from_le_bytes(r.array()?);
        let rng_word_pos = u128::from_le_bytes(r.array()?);
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()?;
            let at = r.pos;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| r.fail(at, e.to_string()))?;
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.fail(r.pos, "parameter too large"))?)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.push((name, dims, values));
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            stats,
            step,
            rng_seed,
            rng_word_pos,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(self.pos, format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
}
