//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "ILVCKPT1"
//! digest  32 bytes SHA-256 of the embedded config text
//! step    u64      optimizer updates applied
//! config  u32 length + UTF-8 TOML
//! 3 groups (params, adam m, adam v), each:
//!   u32 block count, then per block:
//!   u16 name length + name, u8 rank, rank x u64 extents, f32 values
//! ```

use std::fs;
use std::path::Path;

use ndarray::ArrayViewD;

use super::config::RunConfig;
use crate::backbone::Params;
use crate::error::{Error, Result};
use crate::optim::AdamW;

const MAGIC: &[u8; 8] = b"ILVCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: Params<f32>,
    pub opt: AdamW<f32>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_group(out: &mut Vec<u8>, blocks: Vec<(String, ArrayViewD<'_, f32>)>) {
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, b) in blocks {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(b.ndim() as u8);
        for &d in b.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in b.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ckpt_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_group(cur: &mut Cursor<'_>, into: &mut Params<f32>, group: &str) -> Result<()> {
    let mut blocks = into.blocks_mut();
    let count = cur.u32()? as usize;
    if count != blocks.len() {
        return Err(ckpt_err(format!("{group}: {count} blocks stored, model has {}", blocks.len())));
    }
    for (name, block) in blocks.iter_mut() {
        let len = cur.u16()? as usize;
        let stored = std::str::from_utf8(cur.take(len)?).map_err(|_| ckpt_err("block name is not UTF-8"))?;
        if stored != name {
            return Err(ckpt_err(format!("{group}: expected block {name}, found {stored}")));
        }
        let rank = cur.u8()? as usize;
        let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != block.shape() {
            return Err(ckpt_err(format!(
                "{group}: block {name} stored as {shape:?}, model expects {:?}",
                block.shape()
            )));
        }
        let bytes = cur.take(4 * block.len())?;
        for (v, c) in block.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let text = self.config.to_toml();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.config.digest());
        out.extend_from_slice(&self.opt.step.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        write_group(&mut out, self.params.blocks());
        write_group(&mut out, self.opt.m.blocks());
        write_group(&mut out, self.opt.v.blocks());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(ckpt_err("not a checkpoint file (bad magic)"));
        }
        let digest: [u8; 32] = cur.take(32)?.try_into().expect("32 bytes");
        let step = cur.u64()?;
        let len = cur.u32()? as usize;
        let text = std::str::from_utf8(cur.take(len)?).map_err(|_| ckpt_err("config is not UTF-8"))?;
        let config = RunConfig::from_toml(text).map_err(|e| ckpt_err(format!("embedded config: {e}")))?;
        if config.digest() != digest {
            return Err(ckpt_err("config digest does not match the embedded config"));
        }
        let mcfg = config.model_config()?;
        let mut params = Params::zeros(&mcfg);
        let mut opt = AdamW::new(&mcfg);
        opt.step = step;
        read_group(&mut cur, &mut params, "params")?;
        read_group(&mut cur, &mut opt.m, "adam m")?;
        read_group(&mut cur, &mut opt.v, "adam v")?;
        if cur.pos != buf.len() {
            return Err(ckpt_err(format!("{} trailing bytes", buf.len() - cur.pos)));
        }
        Ok(Self { config, params, opt })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Load and insist the checkpoint was produced by `expected`.
    pub fn load_matching(path: &Path, expected: &RunConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config.digest() != expected.digest() {
            return Err(ckpt_err(format!(
                "{} was written with a different config; refusing to resume",
                path.display()
            )));
        }
        Ok(ck)
    }
}
