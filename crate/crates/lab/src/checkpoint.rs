//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "RLRSCKPT"
//! version    u32      1
//! config     u32 n, then n × (string key, string value)
//! init_seed  u64
//! data_seed  u64
//! step       u64
//! params     u32 n, then n × (string name, tensor)
//! optimizer  u8 present; if 1: u64 step_count, u32 n, n × tensor (m), n × tensor (v)
//!
//! string     u32 byte length, UTF-8 bytes
//! tensor     u32 rank, rank × u64 dims, product(dims) × f64
//! ```

use std::fs;
use std::path::Path;

use rlrs_core::autodiff::Tensor;
use rlrs_core::model::Model;
use rlrs_core::optimizer::AdamWState;
use rlrs_core::trainer::TrainConfig;

use crate::error::{LabError, Result};

const MAGIC: &[u8; 8] = b"RLRSCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step_count: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub init_seed: u64,
    pub data_seed: u64,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn capture(cfg: &TrainConfig, step: u64, model: &Model, opt: Option<&AdamWState>) -> Self {
        Checkpoint {
            config: cfg.to_pairs(),
            init_seed: cfg.init_seed,
            data_seed: cfg.data_seed,
            step,
            params: model.params().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
            optimizer: opt.map(|o| OptimizerSnapshot { step_count: o.step_count, m: o.m.clone(), v: o.v.clone() }),
        }
    }

    /// Rebuilds the config, model and (if saved) optimizer state.
    pub fn restore(&self) -> Result<(TrainConfig, Model, Option<AdamWState>)> {
        let cfg = TrainConfig::from_pairs(self.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let model = Model::from_parameters(&cfg.model, self.params.clone())?;
        let opt = match &self.optimizer {
            Some(o) => Some(AdamWState::from_parts(cfg.optimizer(), o.m.clone(), o.v.clone(), o.step_count, model.params())?),
            None => None,
        };
        Ok((cfg, model, opt))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        put_u32(&mut w, self.config.len() as u32);
        for (k, v) in &self.config {
            put_str(&mut w, k);
            put_str(&mut w, v);
        }
        for x in [self.init_seed, self.data_seed, self.step] {
            w.extend_from_slice(&x.to_le_bytes());
        }
        put_u32(&mut w, self.params.len() as u32);
        for (name, t) in &self.params {
            put_str(&mut w, name);
            put_tensor(&mut w, t);
        }
        match &self.optimizer {
            None => w.push(0),
            Some(o) => {
                w.push(1);
                w.extend_from_slice(&o.step_count.to_le_bytes());
                put_u32(&mut w, o.m.len() as u32);
                for t in o.m.iter().chain(&o.v) {
                    put_tensor(&mut w, t);
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()?;
        let config = (0..n).map(|_| Ok((r.string()?, r.string()?))).collect::<Result<_>>()?;
        let (init_seed, data_seed, step) = (r.u64()?, r.u64()?, r.u64()?);
        let n = r.u32()?;
        let params = (0..n).map(|_| Ok((r.string()?, r.tensor()?))).collect::<Result<_>>()?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step_count = r.u64()?;
                let n = r.u32()?;
                let m = (0..n).map(|_| r.tensor()).collect::<Result<_>>()?;
                let v = (0..n).map(|_| r.tensor()).collect::<Result<_>>()?;
                Some(OptimizerSnapshot { step_count, m, v })
            }
            b => return Err(bad(&format!("bad optimizer flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { config, init_seed, data_seed, step, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            LabError::Io { source, .. } => LabError::io(path, source),
            other => other,
        })
    }
}

fn bad(msg: &str) -> LabError {
    LabError::io("<checkpoint>", std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string()))
}

fn put_u32(w: &mut Vec<u8>, x: u32) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor) {
    put_u32(w, t.rank() as u32);
    for &d in t.shape() {
        w.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in t.data() {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8 string"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
        let raw = self.take(len.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(&dims, data).map_err(|e| bad(&e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rlrs_core::model::ModelConfig;

    #[test]
    fn round_trip_restores_model_and_optimizer() {
        let mut cfg = TrainConfig::default();
        cfg.model = ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, n_experts: 2, vocab_size: 64, seq_len: 4, ..cfg.model };
        let model = Model::init(&cfg.model, cfg.init_scale, 3).unwrap();
        let mut opt = AdamWState::new(cfg.optimizer(), model.params()).unwrap();
        opt.step_count = 7;
        opt.m[0].data_mut()[0] = 0.25;
        let ck = Checkpoint::capture(&cfg, 7, &model, Some(&opt));
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let (c2, m2, o2) = back.restore().unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(m2.params(), model.params());
        assert_eq!(o2.unwrap().m, opt.m);
    }

    #[test]
    fn rejects_corruption() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let cfg = TrainConfig { model: ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, ..TrainConfig::default().model }, ..TrainConfig::default() };
        let model = Model::init(&cfg.model, cfg.init_scale, 0).unwrap();
        let bytes = Checkpoint::capture(&cfg, 0, &model, None).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
