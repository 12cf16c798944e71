//! Versioned binary tensor container used for CVAE weights, training state
//! and solver checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "LGMSEPTC"
//! version  u32
//! kind     u32 length + UTF-8
//! header   u32 length + UTF-8 JSON
//! count    u32
//! tensor*  name (u32 length + UTF-8), rank u32, dims u64 × rank,
//!          data f64 × prod(dims), row-major
//! digest   32 bytes, SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LGMSEPTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let t = Tensor {
            name: name.into(),
            shape,
            data,
        };
        debug_assert_eq!(t.shape.iter().product::<usize>(), t.data.len(), "tensor {}", t.name);
        t
    }

    pub fn scalar(name: impl Into<String>, x: f64) -> Self {
        Tensor::new(name, vec![1], vec![x])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub header: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(kind: &str, header: serde_json::Value, tensors: Vec<Tensor>) -> Self {
        Container {
            kind: kind.to_string(),
            header,
            tensors,
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::InvalidInput(format!(
                "expected a {kind} container, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::InvalidInput(format!("container has no tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.header.to_string());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, reason: String| Error::Parse {
            what: "tensor container",
            offset: offset as u64,
            reason,
        };
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(err(bytes.len(), "file too short".into()));
        }
        let body_len = bytes.len() - 32;
        let (body, digest) = bytes.split_at(body_len);
        if Sha256::digest(body).as_slice() != digest {
            return Err(err(body_len, "digest mismatch: file is corrupt".into()));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(err(0, "bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(8, format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let header_at = r.pos;
        let header = serde_json::from_str(&r.string()?).map_err(|e| err(header_at, format!("header JSON: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| err(r.pos, format!("tensor {name} is too large")))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| err(r.pos, "overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(err(r.pos, "trailing bytes after last tensor".into()));
        }
        Ok(Container { kind, header, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                what: "tensor container",
                offset: self.pos as u64,
                reason: format!("unexpected end of data: needed {n} bytes"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse {
            what: "tensor container",
            offset: at as u64,
            reason: "invalid UTF-8".into(),
        })
    }
}
