//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "CRLMCKPT"
//! version    u32
//! config     u64 vocab_size, d_model, n_layers, n_heads, max_seq_len; f64 dropout
//! n_blocks   u32
//! block*     u32 name_len, name (utf-8), u32 ndim, u64 dims[ndim], f64 data[numel]
//! trailer    4 bytes  "END!"
//! ```
//!
//! The language model's tensors come first in layout order; any further
//! named blocks (reward head, value head) follow them.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::{param_layout, LmConfig, PolicyModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CRLMCKPT";
pub const FORMAT_VERSION: u32 = 1;
const TRAILER: &[u8; 4] = b"END!";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PolicyModel,
    /// Named blocks stored after the model's own tensors.
    pub extras: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(model: PolicyModel) -> Self {
        Self {
            model,
            extras: Vec::new(),
        }
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set_extra(&mut self, name: &str, tensor: Tensor) {
        match self.extras.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.extras.push((name.to_string(), tensor)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.model.config();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [
            cfg.vocab_size,
            cfg.d_model,
            cfg.n_layers,
            cfg.n_heads,
            cfg.max_seq_len,
        ] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        buf.extend_from_slice(&cfg.dropout.to_le_bytes());
        let names = self.model.param_names();
        let blocks: Vec<(&str, &Tensor)> = names
            .iter()
            .map(String::as_str)
            .zip(self.model.params())
            .chain(self.extras.iter().map(|(n, t)| (n.as_str(), t)))
            .collect();
        buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, t) in blocks {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(TRAILER);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let config = LmConfig {
            vocab_size: r.usize()?,
            d_model: r.usize()?,
            n_layers: r.usize()?,
            n_heads: r.usize()?,
            max_seq_len: r.usize()?,
            dropout: r.f64()?,
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
        let layout = param_layout(&config);
        let n_blocks = r.u32()? as usize;
        if n_blocks < layout.len() {
            return Err(Error::Checkpoint(format!(
                "{n_blocks} blocks, model needs {}",
                layout.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.len());
        let mut extras = Vec::new();
        for i in 0..n_blocks {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("block name is not utf-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(Error::Checkpoint(format!("block {name}: bad rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.usize()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0 && n <= r.remaining() / 8)
                .ok_or_else(|| Error::Checkpoint(format!("block {name}: bad shape {shape:?}")))?;
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64()?);
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if let Some((expected, _)) = layout.get(i) {
                if *expected != name {
                    return Err(Error::Checkpoint(format!(
                        "block {i} is `{name}`, expected `{expected}`"
                    )));
                }
                params.push(t);
            } else {
                extras.push((name, t));
            }
        }
        if r.take(4)? != TRAILER {
            return Err(Error::Checkpoint("missing trailer".into()));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint("trailing bytes after trailer".into()));
        }
        let model = PolicyModel::from_params(config, params)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self { model, extras })
    }

    /// Write atomically: a temporary sibling is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_checkpoint(model: &PolicyModel, path: &Path) -> Result<()> {
    Checkpoint::new(model.clone()).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyModel> {
    Ok(Checkpoint::load(path)?.model)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
