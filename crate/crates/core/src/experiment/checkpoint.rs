//! `ABECK1` checkpoints: magic, u32 version, u32-length-prefixed config
//! text, u32 tensor count, then per tensor a u32-length-prefixed name, u32
//! rank, u32 dims and little-endian f64 data. All integers little-endian.

use std::fs;
use std::path::Path;

use super::config::ExperimentConfig;
use crate::autodiff::OptimizerState;
use crate::error::{Error, Result};
use crate::model::EnsembleModel;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"ABECK1\n";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Name of the scalar tensor holding the iteration count.
pub const ITERATION_KEY: &str = "meta/iteration";
/// Prefix of optimizer velocity tensors.
pub const VELOCITY_PREFIX: &str = "opt/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of a training run.
    pub fn capture(cfg: &ExperimentConfig, model: &EnsembleModel, opt: Option<&OptimizerState>, iteration: usize) -> Self {
        let params = model.params();
        let mut tensors: Vec<(String, Tensor)> = params.iter().map(|(n, t)| (n.to_string(), value_only(t))).collect();
        if let Some(opt) = opt {
            for (name, v) in params.names().iter().zip(opt.velocity()) {
                tensors.push((format!("{VELOCITY_PREFIX}{name}"), value_only(v)));
            }
        }
        tensors.push((ITERATION_KEY.to_string(), Tensor::scalar(iteration as f64)));
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_text: cfg.to_text(),
            tensors,
        }
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config_text)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iteration(&self) -> Result<usize> {
        let t = self
            .tensor(ITERATION_KEY)
            .ok_or_else(|| Error::format(0, format!("checkpoint lacks `{ITERATION_KEY}`")))?;
        Ok(t.data()[0] as usize)
    }

    /// Model parameters (every tensor outside `opt/` and `meta/`).
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(VELOCITY_PREFIX) && !n.starts_with("meta/"))
            .cloned()
            .collect()
    }

    /// Copy parameters into `model`; names and shapes must match exactly.
    pub fn load_into(&self, model: &mut EnsembleModel) -> Result<()> {
        model.params_mut().load_from(&self.parameters())
    }

    /// Rebuild the model described by the embedded config.
    pub fn restore(&self) -> Result<(ExperimentConfig, EnsembleModel)> {
        let cfg = self.config()?;
        let mut model = EnsembleModel::init(cfg.variant, cfg.backbone.clone(), cfg.seed)?;
        self.load_into(&mut model)?;
        Ok((cfg, model))
    }

    /// Optimizer velocities in parameter order, if stored.
    pub fn velocities(&self, model: &EnsembleModel) -> Option<Vec<Tensor>> {
        model
            .params()
            .names()
            .iter()
            .map(|n| self.tensor(&format!("{VELOCITY_PREFIX}{n}")).cloned())
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic; not an ABECK1 checkpoint"));
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                at as u64,
                format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let config_text = r.string("config text")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let at = r.pos;
            let rank = r.u32("tensor rank")? as usize;
            if rank > 8 {
                return Err(Error::format(at as u64, format!("tensor `{name}` has implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let at = r.pos;
                let d = r.u32("tensor dim")? as usize;
                if d == 0 {
                    return Err(Error::format(at as u64, format!("tensor `{name}` has a zero dimension")));
                }
                shape.push(d);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| Error::format(at as u64, format!("tensor `{name}` size overflows")))?;
            let data = r
                .take(n * 8, "tensor data")?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(at as u64, e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            version,
            config_text,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

fn value_only(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor")
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at as u64, format!("{what} is not UTF-8")))
    }
}
