//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//! magic `DIFREC1`, tag length (u8) and tag, 32-byte config hash, block
//! count (u32), then per block: name length (u16) and name, rank (u8),
//! dims (u64 each), the f64 payload, and a SHA-256 over name, dims and payload.

use std::path::Path;

use difrec::{Array, Parameter, Params};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MAGIC: &[u8; 7] = b"DIFREC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Encoder,
    Denoiser,
    Refiner,
    PromptEmbedder,
}

impl Component {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::Denoiser => "denoiser",
            Self::Refiner => "refiner",
            Self::PromptEmbedder => "prompt-embedder",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.ckpt", self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub value: Array,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub component: Component,
    pub config_hash: [u8; 32],
    pub blocks: Vec<Block>,
}

fn block_digest(name: &str, shape: &[usize], data: &[f64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    for &d in shape {
        h.update((d as u64).to_le_bytes());
    }
    for v in data {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

impl Checkpoint {
    pub fn new(component: Component, config_hash: [u8; 32]) -> Self {
        Self { component, config_hash, blocks: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array) {
        self.blocks.push(Block { name: name.into(), value });
    }

    /// Adds the current value of every parameter of `model`.
    pub fn push_params<P: Params<f64> + ?Sized>(&mut self, prefix: &str, model: &P) {
        let mut out = Vec::new();
        model.visit_params(prefix, &mut |name, p| out.push(Block { name: name.to_string(), value: p.value.clone() }));
        self.blocks.extend(out);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        let tag = self.component.tag();
        b.push(tag.len() as u8);
        b.extend_from_slice(tag.as_bytes());
        b.extend_from_slice(&self.config_hash);
        b.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for blk in &self.blocks {
            b.extend_from_slice(&(blk.name.len() as u16).to_le_bytes());
            b.extend_from_slice(blk.name.as_bytes());
            let shape = blk.value.shape();
            b.push(shape.len() as u8);
            for &d in shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in blk.value.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
            b.extend_from_slice(&block_digest(&blk.name, shape, blk.value.data()));
        }
        b
    }

    /// Parses and verifies a checkpoint of the expected component and config.
    pub fn from_bytes(bytes: &[u8], component: Component, config_hash: &[u8; 32]) -> Result<Self, CliError> {
        let mut r = Reader { bytes, pos: 0, block: "header".into() };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CliError::Integrity("bad magic; not a checkpoint file".into()));
        }
        let tag_len = r.take(1)?[0] as usize;
        let tag = String::from_utf8_lossy(r.take(tag_len)?).into_owned();
        if tag != component.tag() {
            return Err(CliError::Integrity(format!("expected a {} checkpoint, found '{}'", component.tag(), tag)));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        if &hash != config_hash {
            return Err(CliError::Integrity(format!(
                "{} checkpoint was trained under a different configuration",
                component.tag()
            )));
        }
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let mut blocks = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            r.block = format!("block #{}", i);
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CliError::Integrity(format!("block #{} has a non-UTF-8 name", i)))?;
            r.block = name.clone();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n <= bytes.len() / 8);
            let len = len.ok_or_else(|| CliError::Integrity(format!("block '{}' has an impossible shape {:?}", name, shape)))?;
            let data: Vec<f64> =
                r.take(len * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let digest = r.take(32)?;
            if digest != block_digest(&name, &shape, &data) {
                return Err(CliError::Integrity(format!("checksum mismatch in block '{}'", name)));
            }
            let value = Array::from_vec(shape, data)
                .map_err(|e| CliError::Integrity(format!("block '{}': {}", name, e)))?;
            blocks.push(Block { name, value });
        }
        if r.pos != bytes.len() {
            return Err(CliError::Integrity(format!("{} trailing bytes after the last block", bytes.len() - r.pos)));
        }
        Ok(Self { component, config_hash: hash, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, component: Component, config_hash: &[u8; 32]) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| {
            CliError::Missing(format!("{} checkpoint {} unavailable: {}", component.tag(), path.display(), e))
        })?;
        Self::from_bytes(&bytes, component, config_hash)
            .map_err(|e| match e {
                CliError::Integrity(m) => CliError::Integrity(format!("{}: {}", path.display(), m)),
                other => other,
            })
    }

    pub fn take(&mut self, name: &str) -> Result<Array, CliError> {
        let i = self
            .blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| CliError::Integrity(format!("{} checkpoint lacks block '{}'", self.component.tag(), name)))?;
        Ok(self.blocks.remove(i).value)
    }

    /// Overwrites every parameter of `model` from the matching block,
    /// checking shapes. Parameter EMA copies are reset to the loaded value.
    pub fn load_params<P: Params<f64> + ?Sized>(&mut self, prefix: &str, model: &mut P) -> Result<(), CliError> {
        let mut err = None;
        model.visit_params_mut(prefix, &mut |name, p: &mut Parameter<f64>| {
            if err.is_some() {
                return;
            }
            match self.take(name) {
                Ok(v) if v.shape() == p.value.shape() => {
                    p.ema = v.clone();
                    p.value = v;
                }
                Ok(v) => {
                    err = Some(CliError::Integrity(format!(
                        "block '{}' has shape {:?}, model expects {:?}",
                        name,
                        v.shape(),
                        p.value.shape()
                    )))
                }
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Fails if blocks remain that no parameter claimed.
    pub fn finish(&self) -> Result<(), CliError> {
        match self.blocks.first() {
            None => Ok(()),
            Some(b) => Err(CliError::Integrity(format!(
                "{} checkpoint has unexpected block '{}'",
                self.component.tag(),
                b.name
            ))),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    block: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.bytes.len() - self.pos < n {
            return Err(CliError::Integrity(format!("file truncated inside {}", self.block)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
