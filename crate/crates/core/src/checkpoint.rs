//! Binary named-tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ARCL" | version u32 | fused u8 | config digest [u8; 32]
//! repeated until EOF:
//!   name_len u32 | name (UTF-8) | ndim u32 | dims u32 * ndim | f64 * prod(dims)
//! ```
//!
//! Tensors are written in name order, so equal checkpoints encode to equal
//! bytes. Loading never returns a partially parsed checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::arc::{AdapterBank, ArcConfig, Mode};
use crate::error::{Error, Result};
use crate::kernel::Matrix;
use crate::vit::{self, BackboneConfig, BackboneWeights, Image};

pub const MAGIC: [u8; 4] = *b"ARCL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 32;

/// SHA-256 of the canonical JSON of both configs.
pub fn config_digest(backbone: &BackboneConfig, arc: &ArcConfig) -> [u8; 32] {
    #[derive(Serialize)]
    struct Pair<'a> {
        backbone: &'a BackboneConfig,
        arc: &'a ArcConfig,
    }
    let json = serde_json::to_vec(&Pair { backbone, arc }).expect("config serialization is infallible");
    Sha256::digest(&json).into()
}

pub fn hex(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fused: bool,
    pub digest: [u8; 32],
    pub tensors: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    /// Backbone (with head) plus, for unfused checkpoints, every bank tensor.
    pub fn from_model(weights: &BackboneWeights, bank: Option<&AdapterBank>, arc: &ArcConfig) -> Self {
        let mut tensors: BTreeMap<String, Matrix> = weights
            .named_tensors()
            .into_iter()
            .map(|(n, m)| (n, m.clone()))
            .collect();
        if let Some(bank) = bank {
            tensors.extend(bank.tensors().iter().map(|(n, m)| (n.clone(), m.clone())));
        }
        Self {
            fused: bank.is_none(),
            digest: config_digest(&weights.config, arc),
            tensors,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.tensors.values().map(|m| 8 * m.len() + 64).sum::<usize>());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(u8::from(self.fused));
        out.extend_from_slice(&self.digest);
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.error_at(0, "bad magic (expected \"ARCL\")"));
        }
        let version = r.u32("format version")?;
        if version != VERSION {
            return Err(r.error_at(4, &format!("unsupported format version {version}")));
        }
        let fused = match r.take(1, "fused flag")?[0] {
            0 => false,
            1 => true,
            other => return Err(r.error_at(8, &format!("fused flag must be 0 or 1, got {other}"))),
        };
        let digest: [u8; 32] = r.take(32, "config digest")?.try_into().expect("32 bytes");
        let mut tensors = BTreeMap::new();
        while r.pos < bytes.len() {
            let start = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| r.error_at(start + 4, "tensor name is not UTF-8"))?
                .to_string();
            let ndim_at = r.pos;
            let ndim = r.u32("ndim")?;
            let (rows, cols) = match ndim {
                1 => (1, r.u32("dim")? as usize),
                2 => (r.u32("dim")? as usize, r.u32("dim")? as usize),
                n => return Err(r.error_at(ndim_at, &format!("tensor `{name}` has unsupported ndim {n}"))),
            };
            let count = rows
                .checked_mul(cols)
                .filter(|c| c.checked_mul(8).is_some())
                .ok_or_else(|| r.error_at(ndim_at, "tensor size overflows"))?;
            let payload = r.take(count * 8, "tensor payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Matrix::new(rows, cols, data)?;
            if tensors.insert(name.clone(), m).is_some() {
                return Err(r.error_at(start, &format!("duplicate tensor `{name}`")));
            }
        }
        Ok(Self { fused, digest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Rebuilds the model, checking the header digest and every tensor shape
    /// against the given configs.
    pub fn into_model(self, backbone: &BackboneConfig, arc: &ArcConfig) -> Result<LoadedModel> {
        if self.digest != config_digest(backbone, arc) {
            return Err(Error::Config("checkpoint config digest does not match the supplied configuration".into()));
        }
        let weights = BackboneWeights::from_named(backbone, &self.tensors)?;
        let adapter: BTreeMap<String, Matrix> = self
            .tensors
            .into_iter()
            .filter(|(n, _)| !n.starts_with("backbone.") && !n.starts_with("head."))
            .collect();
        if self.fused {
            if let Some(name) = adapter.keys().next() {
                return Err(Error::Config(format!("fused checkpoint carries adapter tensor `{name}`")));
            }
            return Ok(LoadedModel::Fused(weights));
        }
        let bank = AdapterBank::from_tensors(arc, backbone, adapter)?;
        Ok(LoadedModel::Adapted { weights, bank })
    }
}

/// A checkpoint resolved into runnable weights.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    Adapted { weights: BackboneWeights, bank: AdapterBank },
    Fused(BackboneWeights),
}

impl LoadedModel {
    pub fn weights(&self) -> &BackboneWeights {
        match self {
            LoadedModel::Adapted { weights, .. } | LoadedModel::Fused(weights) => weights,
        }
    }

    pub fn bank(&self) -> Option<&AdapterBank> {
        match self {
            LoadedModel::Adapted { bank, .. } => Some(bank),
            LoadedModel::Fused(_) => None,
        }
    }

    /// Eval-mode logits; fused models take the plain path with no hooks.
    pub fn forward(&self, image: &Image) -> Result<Matrix> {
        vit::forward(image, self.weights(), self.bank(), Mode::Eval)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, reason: &str) -> Error {
        Error::Checkpoint {
            offset: offset as u64,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.bytes.len(),
                &format!("truncated while reading {what} ({n} bytes needed at offset {})", self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
