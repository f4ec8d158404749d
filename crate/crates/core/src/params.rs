//! Named parameter collections and the versioned binary blob format used for
//! every checkpoint in the pipeline.
//!
//! Blob layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MCAPBLOB"
//! version    u32      currently 1
//! kind       u16 len + UTF-8     e.g. "decoder", "reward", "align"
//! meta       u32 len + UTF-8 JSON (model dimensions, config hash, ...)
//! count      u32      number of tensors
//! shapes     count × (u16 len + UTF-8 name, u32 rows, u32 cols)
//! data       all tensors as f64, in shape-table order
//! ```

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const BLOB_MAGIC: &[u8; 8] = b"MCAPBLOB";
pub const BLOB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    entries: Vec<(String, Matrix)>,
    index: BTreeMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = value;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, value));
        }
    }

    pub fn get(&self, name: &str) -> &Matrix {
        let i = self.index.get(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.entries[*i].1
    }

    pub fn try_get(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.entries.iter_mut().map(|(n, m)| (n.as_str(), m))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.is_finite())
    }

    /// Zero-filled tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Params {
        let mut out = Params::new();
        for (n, m) in self.iter() {
            out.insert(n, Matrix::zeros(m.rows(), m.cols()));
        }
        out
    }

    /// Puts every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|(_, m)| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) })
            .collect();
        Bound { vars, index: self.index.clone(), names: self.names() }
    }

    /// Copies tensors whose name starts with `prefix`, keeping the names.
    pub fn subset(&self, prefix: &str) -> Params {
        let mut out = Params::new();
        for (n, m) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(n, m.clone());
        }
        out
    }

    pub fn to_blob(&self, kind: &str, meta: &serde_json::Value) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        write_str16(&mut out, kind);
        let meta = serde_json::to_string(meta).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, m) in &self.entries {
            write_str16(&mut out, name);
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        }
        for (_, m) in &self.entries {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Blob> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != BLOB_MAGIC {
            return Err(Error::Format("not a parameter blob (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != BLOB_VERSION {
            return Err(Error::Format(format!("unsupported blob version {version}")));
        }
        let kind = r.str16()?;
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Format("blob metadata is not UTF-8".into()))?;
        let meta: serde_json::Value = serde_json::from_str(meta_text)?;
        let count = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str16()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            shapes.push((name, rows, cols));
        }
        let mut params = Params::new();
        for (name, rows, cols) in shapes {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let b = r.take(8)?;
                data.push(f64::from_le_bytes(b.try_into().expect("8 bytes")));
            }
            params.insert(name, Matrix::from_vec(rows, cols, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after blob data".into()));
        }
        Ok(Blob { kind, meta, params })
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.entries {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Decoded checkpoint.
#[derive(Debug, Clone)]
pub struct Blob {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: Params,
}

/// Tape handles for a [`Params`] collection.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    index: BTreeMap<String, usize>,
    names: Vec<String>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        let i = self.index.get(name).unwrap_or_else(|| panic!("no bound parameter named {name}"));
        self.vars[*i]
    }

    /// Gradients in the same order and with the same names as the source.
    pub fn grads(&self, g: &Gradients) -> Params {
        let mut out = Params::new();
        for (name, v) in self.names.iter().zip(&self.vars) {
            out.insert(name.clone(), g.get(*v));
        }
        out
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_str16(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated parameter blob".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn str16(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("blob name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn blob_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40), cols in 1usize..5) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let mut p = Params::new();
            p.insert("w", Matrix::from_vec(rows, cols, values[..rows * cols].to_vec()));
            p.insert("b", Matrix::scalar(values[0]));
            let meta = serde_json::json!({"d": cols});
            let blob = p.to_blob("test", &meta);
            let back = Params::from_blob(&blob).unwrap();
            prop_assert_eq!(&back.kind, "test");
            prop_assert_eq!(&back.meta, &meta);
            prop_assert_eq!(back.params.to_blob("test", &meta), blob);
            prop_assert_eq!(back.params.checksum(), p.checksum());
        }
    }

    #[test]
    fn corrupt_blobs_are_rejected() {
        let mut p = Params::new();
        p.insert("w", Matrix::identity(2));
        let blob = p.to_blob("k", &serde_json::Value::Null);
        assert!(Params::from_blob(&blob[..blob.len() - 1]).is_err());
        let mut bad = blob.clone();
        bad[0] = b'X';
        assert!(Params::from_blob(&bad).is_err());
        let mut long = blob;
        long.push(0);
        assert!(Params::from_blob(&long).is_err());
    }
}
