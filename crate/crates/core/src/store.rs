//! Keyed `f32` vector store and its binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"I2EV1"
//! dim    u32
//! count  u64
//! count × { id_len u16, id bytes (UTF-8), dim × f32 }
//! ```
//!
//! The same format backs Poincaré entity embeddings, the image/text feature
//! store consumed by the curator and trainer, and exported image embeddings.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"I2EV1";

#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl VectorStore {
    pub fn new(dim: usize) -> Self {
        VectorStore {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Appends a vector. Ids must be unique and fit the u16 length prefix.
    pub fn insert(&mut self, id: impl Into<String>, v: &[f32]) -> Result<()> {
        let id = id.into();
        if v.len() != self.dim {
            return Err(Error::invalid(format!(
                "vector for {id:?} has {} values, store dim is {}",
                v.len(),
                self.dim
            )));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("id longer than {} bytes", u16::MAX)));
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn insert_f64(&mut self, id: impl Into<String>, v: &[f64]) -> Result<()> {
        let v32: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        self.insert(id, &v32)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    pub fn get_f64(&self, id: &str) -> Option<Vec<f64>> {
        self.get(id).map(crate::vector::to_f64)
    }

    /// Resolves `id` or fails with [`Error::MissingFeature`].
    pub fn require(&self, id: &str) -> Result<Vec<f64>> {
        self.get_f64(id)
            .ok_or_else(|| Error::MissingFeature(id.to_string()))
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .enumerate()
            .map(move |(i, id)| (id.as_str(), self.row(i)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.ids.len() * (2 + 16 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in self.row(i) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Decodes the binary format. Rejects bad magic, truncated rows, duplicate
    /// ids, invalid UTF-8 and trailing bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "vector store";
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur
            .take(MAGIC.len())
            .ok_or_else(|| Error::format(WHAT, "corrupt header: file too short"))?;
        if magic != MAGIC {
            return Err(Error::format(WHAT, "corrupt header: bad magic"));
        }
        let dim = cur
            .u32()
            .ok_or_else(|| Error::format(WHAT, "corrupt header: missing dim"))?
            as usize;
        let count = cur
            .u64()
            .ok_or_else(|| Error::format(WHAT, "corrupt header: missing count"))?;
        // Each row needs at least two bytes, so a count beyond that is corrupt.
        if count > (bytes.len() as u64) / 2 + 1 {
            return Err(Error::format(
                WHAT,
                format!("corrupt header: count {count} exceeds file size"),
            ));
        }
        let mut store = VectorStore::new(dim);
        for row in 0..count as usize {
            let id_len = cur.u16().ok_or_else(|| {
                Error::format(WHAT, format!("row {row}: truncated before id length"))
            })? as usize;
            let id_bytes = cur
                .take(id_len)
                .ok_or_else(|| Error::format(WHAT, format!("row {row}: truncated id")))?;
            let id = std::str::from_utf8(id_bytes)
                .map_err(|_| Error::format(WHAT, format!("row {row}: id is not UTF-8")))?
                .to_string();
            let avail = cur.remaining() / 4;
            if avail < dim {
                return Err(Error::format(
                    WHAT,
                    format!("row {row} ({id:?}): expected {dim} values, found {avail}"),
                ));
            }
            let raw = cur.take(dim * 4).expect("length checked");
            let v: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(id, &v).map_err(|e| match e {
                Error::DuplicateId(id) => {
                    Error::format(WHAT, format!("row {row}: duplicate id {id:?}"))
                }
                other => other,
            })?;
        }
        if cur.remaining() != 0 {
            return Err(Error::format(
                WHAT,
                format!("{} trailing bytes after {count} rows", cur.remaining()),
            ));
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.encode())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.remaining() < n {
            return None;
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_store_round_trips() {
        let s = VectorStore::new(4);
        let bytes = s.encode();
        assert_eq!(bytes.len(), 17);
        let back = VectorStore::decode(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn short_row_is_named() {
        let mut s = VectorStore::new(8);
        s.insert("Q1", &[0.5; 8]).unwrap();
        s.insert("Q2", &[0.25; 8]).unwrap();
        let mut bytes = s.encode();
        bytes.truncate(bytes.len() - 4);
        let err = VectorStore::decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
        assert!(err.contains("\"Q2\""), "{err}");
        assert!(err.contains("expected 8 values, found 7"), "{err}");
    }

    #[test]
    fn bad_magic_and_trailing_bytes_rejected() {
        let mut bytes = VectorStore::new(2).encode();
        bytes[0] = b'X';
        assert!(VectorStore::decode(&bytes)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut bytes = VectorStore::new(2).encode();
        bytes.push(0);
        assert!(VectorStore::decode(&bytes).is_err());
        assert!(VectorStore::decode(b"I2E").is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut s = VectorStore::new(1);
        s.insert("a", &[1.0]).unwrap();
        assert!(matches!(s.insert("a", &[2.0]), Err(Error::DuplicateId(_))));
        assert!(s.insert("b", &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_is_lossless(
            dim in 0usize..6,
            rows in proptest::collection::vec(
                ("[a-zA-Z0-9_é]{0,12}", proptest::collection::vec(any::<f32>(), 6)),
                0..8,
            )
        ) {
            let mut s = VectorStore::new(dim);
            for (id, v) in &rows {
                let _ = s.insert(id.clone(), &v[..dim]);
            }
            let bytes = s.encode();
            let back = VectorStore::decode(&bytes).unwrap();
            prop_assert_eq!(back.ids(), s.ids());
            for (a, b) in back.iter().zip(s.iter()) {
                let ab: Vec<u32> = a.1.iter().map(|x| x.to_bits()).collect();
                let bb: Vec<u32> = b.1.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
