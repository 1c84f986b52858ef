//! Single-file checkpoint container.
//!
//! ```text
//! magic      8 bytes  "HSYNCKPT"
//! version    u32 LE
//! count      u32 LE   number of blocks
//! block*     name_len u16 | name (UTF-8) | kind u8 | ndim u8 | dims u64×ndim
//!            | payload_len u64 | payload
//! digest     32 bytes SHA-256 of everything before it
//! ```
//!
//! Block kinds: 0 = JSON text, 1 = f32 tensor, 2 = f64 tensor. Tensor
//! payloads are little-endian in row-major order. JSON blocks have `ndim = 0`.

use std::path::Path;

use histosynth_autograd::{Real, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::Store;

pub const MAGIC: &[u8; 8] = b"HSYNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Json(String),
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

/// Ordered named blocks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    blocks: Vec<(String, Block)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }

    pub fn put(&mut self, name: impl Into<String>, block: Block) {
        let name = name.into();
        match self.blocks.iter_mut().find(|(n, _)| *n == name) {
            Some((_, b)) => *b = block,
            None => self.blocks.push((name, block)),
        }
    }

    pub fn put_json<S: Serialize>(&mut self, name: &str, value: &S) {
        let text = serde_json::to_string(value).expect("value serializes to JSON");
        self.put(name, Block::Json(text));
    }

    pub fn json<D: DeserializeOwned>(&self, name: &str) -> Result<D> {
        match self.get(name) {
            Some(Block::Json(text)) => {
                serde_json::from_str(text).map_err(|e| corrupt(format!("block {name}: {e}")))
            }
            Some(_) => Err(corrupt(format!("block {name} is not JSON"))),
            None => Err(corrupt(format!("missing block {name}"))),
        }
    }

    pub fn put_tensor<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        let block = match T::DTYPE {
            "f32" => Block::F32(t.cast()),
            _ => Block::F64(t.cast()),
        };
        self.put(name, block);
    }

    /// Tensor block converted to `T`.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        match self.get(name) {
            Some(Block::F32(t)) => Ok(t.cast()),
            Some(Block::F64(t)) => Ok(t.cast()),
            Some(Block::Json(_)) => Err(corrupt(format!("block {name} is not a tensor"))),
            None => Err(corrupt(format!("missing block {name}"))),
        }
    }

    /// Every tensor of `store` as `prefix/<name>`.
    pub fn put_store<T: Real>(&mut self, prefix: &str, store: &Store<T>) {
        for (name, t) in store.iter() {
            self.put_tensor(&format!("{prefix}/{name}"), t);
        }
    }

    /// Overwrite every tensor of `store` from `prefix/<name>` blocks; names
    /// and shapes must all match.
    pub fn load_store<T: Real>(&self, prefix: &str, store: &mut Store<T>) -> Result<()> {
        let expected = store.len();
        let found = self.names().filter(|n| n.starts_with(&format!("{prefix}/"))).count();
        if found != expected {
            return Err(corrupt(format!("{prefix}: expected {expected} tensors, found {found}")));
        }
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let t = self.tensor::<T>(&format!("{prefix}/{name}"))?;
            let dst = &mut store.values_mut()[i];
            if dst.shape() != t.shape() {
                return Err(corrupt(format!(
                    "{prefix}/{name}: shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, block) in &self.blocks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (kind, dims, payload): (u8, Vec<usize>, Vec<u8>) = match block {
                Block::Json(s) => (0, vec![], s.as_bytes().to_vec()),
                Block::F32(t) => (1, t.shape().to_vec(), t.data().iter().flat_map(|v| v.to_le_bytes()).collect()),
                Block::F64(t) => (2, t.shape().to_vec(), t.data().iter().flat_map(|v| v.to_le_bytes()).collect()),
            };
            out.push(kind);
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        if bytes.len() < MAGIC.len() + 8 + 32 {
            return Err(corrupt("file is truncated"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("digest mismatch: file is truncated or corrupted"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let count = r.u32()?;
        let mut blocks = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| corrupt("block name is not UTF-8"))?
                .to_string();
            let kind = r.u8()?;
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let plen = r.u64()? as usize;
            let payload = r.take(plen)?;
            let numel: usize = dims.iter().product();
            let block = match kind {
                0 => Block::Json(
                    String::from_utf8(payload.to_vec()).map_err(|_| corrupt(format!("{name}: JSON is not UTF-8")))?,
                ),
                1 => {
                    if plen != numel * 4 {
                        return Err(corrupt(format!("{name}: payload size does not match dims")));
                    }
                    let data = payload.chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    Block::F32(Tensor::new(dims, data))
                }
                2 => {
                    if plen != numel * 8 {
                        return Err(corrupt(format!("{name}: payload size does not match dims")));
                    }
                    let data = payload.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    Block::F64(Tensor::new(dims, data))
                }
                k => return Err(corrupt(format!("{name}: unknown block kind {k}"))),
            };
            blocks.push((name, block));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after last block"));
        }
        Ok(Self { blocks })
    }

    /// Atomic write via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
