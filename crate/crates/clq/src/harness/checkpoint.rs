//! Checkpoint blob: magic `CLQ1`, a length-prefixed config document,
//! named tensor records with raw little-endian 64-bit floats, then the
//! iteration counter. All lengths are validated before allocation so a
//! corrupt file fails cleanly.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CLQ1";

const MAX_NAME: u64 = 4096;
const MAX_RANK: u64 = 8;
const MAX_TENSORS: u64 = 1 << 20;
const MAX_ELEMENTS: u64 = 1 << 26;
const MAX_CONFIG: u64 = 1 << 20;

pub type TensorRecord = (String, Vec<usize>, Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config_text: String,
    pub tensors: Vec<TensorRecord>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    let cfg = ckpt.config_text.as_bytes();
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&(ckpt.tensors.len() as u64).to_le_bytes());
    for (name, shape, values) in &ckpt.tensors {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u64).to_le_bytes());
        out.extend_from_slice(nb);
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&ckpt.iteration.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}: not a CLQ1 checkpoint (version mismatch?)",
            magic
        )));
    }
    let cfg_len = cur.u64()?;
    if cfg_len > MAX_CONFIG {
        return Err(Error::Checkpoint(format!("config length {cfg_len} too large")));
    }
    let config_text = String::from_utf8(cur.take(cfg_len as usize)?.to_vec())
        .map_err(|_| Error::Checkpoint("config document is not UTF-8".into()))?;

    let n_tensors = cur.u64()?;
    if n_tensors > MAX_TENSORS {
        return Err(Error::Checkpoint(format!("tensor count {n_tensors} too large")));
    }
    let mut tensors = Vec::with_capacity(n_tensors.min(1024) as usize);
    for _ in 0..n_tensors {
        let name_len = cur.u64()?;
        if name_len > MAX_NAME {
            return Err(Error::Checkpoint(format!("name length {name_len} too large")));
        }
        let name = String::from_utf8(cur.take(name_len as usize)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = cur.u64()?;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let d = cur.u64()?;
            elements = elements.saturating_mul(d);
            if elements > MAX_ELEMENTS {
                return Err(Error::Checkpoint("tensor too large".into()));
            }
            shape.push(d as usize);
        }
        let mut values = Vec::with_capacity(elements as usize);
        for _ in 0..elements {
            values.push(cur.f64()?);
        }
        tensors.push((name, shape, values));
    }
    let iteration = cur.u64()?;
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - cur.pos
        )));
    }
    Ok(Checkpoint {
        iteration,
        config_text,
        tensors,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}
