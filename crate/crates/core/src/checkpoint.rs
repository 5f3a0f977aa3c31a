//! Named-tensor storage: the on-disk container behind encoder
//! checkpoints and externally supplied generator/embedder weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"UNTC"
//! version u32
//! meta    u64 length + JSON bytes
//! count   u64
//! tensor  u64 name length + UTF-8 name,
//!         u64 ndim, u64 dims...,
//!         f64 values (row-major)
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is
//! bit-exact and the freezing contract can be checked with bitwise
//! equality.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"UNTC";
const VERSION: u32 = 1;

/// Tensors keyed by name. Iteration order is the name order, which makes
/// flat indexing, optimizer state, and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Precondition(format!("missing tensor '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Read the `i`-th scalar in name-major, row-major order.
    pub fn get_flat(&self, mut i: usize) -> f64 {
        for t in self.tensors.values() {
            if i < t.len() {
                return t.as_slice().expect("contiguous")[i];
            }
            i -= t.len();
        }
        panic!("flat index out of range");
    }

    /// Write the `i`-th scalar in name-major, row-major order.
    pub fn set_flat(&mut self, mut i: usize, v: f64) {
        for t in self.tensors.values_mut() {
            if i < t.len() {
                t.as_slice_mut().expect("contiguous")[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Bitwise equality of every value, the test used by the freezing
    /// contract.
    pub fn bitwise_eq(&self, other: &TensorMap) -> bool {
        if self.tensors.len() != other.tensors.len() {
            return false;
        }
        self.tensors.iter().zip(other.tensors.iter()).all(
            |((an, at), (bn, bt))| {
                an == bn
                    && at.shape() == bt.shape()
                    && at
                        .iter()
                        .zip(bt.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            },
        )
    }
}

impl FromIterator<(String, ArrayD<f64>)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, ArrayD<f64>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Write a container with a JSON metadata record and a tensor map.
pub fn save_container(path: &Path, meta: &serde_json::Value, tensors: &TensorMap) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    let meta_bytes = serde_json::to_vec(meta).expect("serializable meta");
    out.write_u64::<LittleEndian>(meta_bytes.len() as u64)?;
    out.write_all(&meta_bytes)?;
    out.write_u64::<LittleEndian>(tensors.len() as u64)?;
    for (name, tensor) in tensors.iter() {
        out.write_u64::<LittleEndian>(name.len() as u64)?;
        out.write_all(name.as_bytes())?;
        out.write_u64::<LittleEndian>(tensor.ndim() as u64)?;
        for d in tensor.shape() {
            out.write_u64::<LittleEndian>(*d as u64)?;
        }
        for v in tensor.iter() {
            out.write_f64::<LittleEndian>(*v)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a container back. Errors distinguish a missing file from a
/// corrupt one.
pub fn load_container(path: &Path) -> Result<(serde_json::Value, TensorMap)> {
    let bytes = fs::read(path).map_err(|_| Error::MissingWeights(path.to_path_buf()))?;
    let corrupt = |reason: &str| Error::CorruptWeights {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut cur = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| corrupt("truncated header"))?;
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let meta_len = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| corrupt("truncated meta length"))? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    cur.read_exact(&mut meta_bytes)
        .map_err(|_| corrupt("truncated meta"))?;
    let meta: serde_json::Value =
        serde_json::from_slice(&meta_bytes).map_err(|_| corrupt("meta is not valid JSON"))?;
    let count = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| corrupt("truncated tensor count"))? as usize;
    let mut tensors = TensorMap::new();
    for _ in 0..count {
        let name_len = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| corrupt("truncated name length"))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes)
            .map_err(|_| corrupt("truncated name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| corrupt("name is not UTF-8"))?;
        let ndim = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| corrupt("truncated ndim"))? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(
                cur.read_u64::<LittleEndian>()
                    .map_err(|_| corrupt("truncated dims"))? as usize,
            );
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(
                cur.read_f64::<LittleEndian>()
                    .map_err(|_| corrupt("truncated tensor data"))?,
            );
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|_| corrupt("inconsistent tensor shape"))?;
        tensors.insert(name, arr);
    }
    Ok((meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample_map() -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("b.weight", ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.5, -2.0, 0.25, 1e-300, f64::MIN_POSITIVE, 3.0]).unwrap());
        m.insert("a.bias", ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.0, -0.0, 42.0]).unwrap());
        m
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ntc");
        let meta = json!({"kind": "test", "depth": 4});
        let map = sample_map();
        save_container(&path, &meta, &map).unwrap();
        let (meta2, map2) = load_container(&path).unwrap();
        assert_eq!(meta, meta2);
        assert!(map.bitwise_eq(&map2));
    }

    #[test]
    fn missing_and_corrupt_files_are_distinguished() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.ntc");
        assert!(matches!(
            load_container(&missing),
            Err(Error::MissingWeights(_))
        ));
        let bad = dir.path().join("bad.ntc");
        fs::write(&bad, b"these are not tensors").unwrap();
        assert!(matches!(
            load_container(&bad),
            Err(Error::CorruptWeights { .. })
        ));
    }

    #[test]
    fn flat_indexing_is_name_ordered() {
        let map = sample_map();
        assert_eq!(map.flat_len(), 9);
        // "a.bias" sorts before "b.weight".
        assert_eq!(map.get_flat(0), 0.0);
        assert_eq!(map.get_flat(2), 42.0);
        assert_eq!(map.get_flat(3), 1.5);
        let mut map = map;
        map.set_flat(3, 9.0);
        assert_eq!(map.get("b.weight").unwrap().as_slice().unwrap()[0], 9.0);
    }
}
