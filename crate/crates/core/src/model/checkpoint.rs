//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! magic (8 bytes), version u32, config TOML (u64 length + UTF-8),
//! metadata TOML (u64 length + UTF-8), tensor count u64, then per tensor:
//! name (u64 length + UTF-8), dtype u8 (0 = f32, 1 = f64), ndim u32,
//! dims u64 each, raw element data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::{ModelConfig, TransformerModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FPRUNE\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub meta: toml::Table,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        put_str(&mut out, &meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(if cfg!(feature = "f32") { 0 } else { 1 });
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = r.string()?;
        let meta: toml::Table = toml::from_str(&r.string()?)?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let data: Vec<Real> = match dtype {
                0 => r
                    .take(
                        n.checked_mul(4)
                            .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
                    )?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
                    .collect(),
                1 => r
                    .take(
                        n.checked_mul(8)
                            .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
                    )?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
                    .collect(),
                other => return Err(Error::Checkpoint(format!("{name}: unknown dtype {other}"))),
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            meta,
            tensors,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
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
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn mask_name(layer: usize) -> String {
    format!("blocks.{layer}.mlp.mask")
}

impl TransformerModel {
    /// Packs parameters and masks with arbitrary metadata.
    pub fn to_checkpoint(&self, meta: toml::Table) -> Result<Checkpoint> {
        let mut tensors: Vec<(String, Tensor)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| {
                (
                    n,
                    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid"),
                )
            })
            .collect();
        for (l, b) in self.blocks.iter().enumerate() {
            if let Some(m) = &b.mask {
                tensors.push((mask_name(l), Tensor::from_vec(m.clone())));
            }
        }
        Ok(Checkpoint {
            config: toml::to_string(&self.config)?,
            meta,
            tensors,
        })
    }

    /// Rebuilds a model, checking every tensor's shape against the config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = toml::from_str(&ckpt.config)?;
        let mut model = TransformerModel::new(config)?;
        let expected = model.named_params().len();
        let mut seen = 0;
        for (name, slot) in model.named_params_mut() {
            let t = ckpt
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
            seen += 1;
        }
        debug_assert_eq!(seen, expected);
        for l in 0..model.blocks.len() {
            if let Some(t) = ckpt.get(&mask_name(l)) {
                let width = model.blocks[l].width();
                if t.shape() != [width] {
                    return Err(Error::Checkpoint(format!(
                        "{}: expected [{width}]",
                        mask_name(l)
                    )));
                }
                model.blocks[l].mask = Some(t.data().to_vec());
            }
        }
        let known =
            model.named_params().len() + model.blocks.iter().filter(|b| b.mask.is_some()).count();
        if known != ckpt.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors in file, {known} expected",
                ckpt.tensors.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, meta: toml::Table) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint(meta)?)
    }

    pub fn load(path: &Path) -> Result<(Self, toml::Table)> {
        let ckpt = read_checkpoint(path)?;
        Ok((Self::from_checkpoint(&ckpt)?, ckpt.meta))
    }
}
