//! Named tensor container — the checkpoint unit shared by every module.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic  b"GSPC"
//! u32    version            (= 1)
//! u32    tensor count
//! per tensor:
//!   u32  name byte-length, then UTF-8 name
//!   u8   dtype tag          (0 = f32)
//!   u8   rank
//!   u32  dims[rank]
//!   f32  payload, little-endian, row-major
//! ```
//!
//! Entries are kept sorted by name so serialization is deterministic;
//! round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"GSPC";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// One stored tensor: shape plus f32 payload.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Flat collection of named, shaped, f32 parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorStore {
    entries: BTreeMap<String, StoredTensor>,
}

impl NamedTensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) {
        let numel: usize = dims.iter().product();
        assert_eq!(numel, data.len(), "store insert: dims/data mismatch");
        self.entries.insert(name.into(), StoredTensor { dims, data });
    }

    /// Insert from a live tensor, converting the element type to f32.
    pub fn insert_tensor<E: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<E>) {
        let data = t.data().iter().map(|v| v.to_f64() as f32).collect();
        self.insert(name, t.dims().to_vec(), data);
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.get(name)
    }

    /// Fetch a tensor by name with a shape check; errors name the tensor.
    pub fn tensor<E: Scalar>(&self, name: &str, dims: &[usize]) -> Result<Tensor<E>> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Load(format!("missing tensor `{}`", name)))?;
        if entry.dims != dims {
            return Err(Error::Load(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                name, entry.dims, dims
            )));
        }
        let data = entry.data.iter().map(|&v| E::from_f64(v as f64)).collect();
        Ok(Tensor::from_vec(dims, data))
    }

    /// All entries under `prefix.` (prefix itself without the dot).
    pub fn with_prefix(&self, prefix: &str) -> impl Iterator<Item = (&str, &StoredTensor)> {
        let needle = format!("{}.", prefix);
        self.entries
            .iter()
            .filter(move |(k, _)| k.starts_with(&needle))
            .map(|(k, v)| (k.as_str(), v))
    }

    /// Merge another store into this one; name collisions overwrite.
    pub fn merge(&mut self, other: &NamedTensorStore) {
        for (name, t) in other.iter() {
            self.entries.insert(name.to_string(), t.clone());
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F32, t.dims.len() as u8])?;
            for &d in &t.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Load(format!("bad magic {:?}, expected \"GSPC\"", magic)));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Load(format!("unsupported version {}", version)));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| Error::Load(format!("tensor name not UTF-8: {}", e)))?;
            let mut tag = [0u8; 2];
            r.read_exact(&mut tag)?;
            if tag[0] != DTYPE_F32 {
                return Err(Error::Load(format!(
                    "tensor `{}` has unknown dtype tag {}",
                    name, tag[0]
                )));
            }
            let rank = tag[1] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = dims.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf));
            }
            entries.insert(name, StoredTensor { dims, data });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| {
            Error::Load(format!("cannot read {}: {}", path.as_ref().display(), e))
        })?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut store = NamedTensorStore::new();
        store.insert("enc.layer0.ffn1.w1", vec![2, 3], vec![1.0, -0.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.5]);
        store.insert("llm.embed.weight", vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        store.insert("scalarish", vec![1], vec![42.0]);
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        let back = NamedTensorStore::read_from(bytes.as_slice()).unwrap();
        assert_eq!(store, back);
        let mut bytes2 = Vec::new();
        back.write_to(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn header_layout_matches_format_spec() {
        let mut store = NamedTensorStore::new();
        store.insert("ab", vec![1, 2], vec![1.0, 2.0]);
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[0..4], b"GSPC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1); // version
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1); // count
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2); // name len
        assert_eq!(&bytes[16..18], b"ab");
        assert_eq!(bytes[18], 0); // dtype f32
        assert_eq!(bytes[19], 2); // rank
    }

    #[test]
    fn bad_magic_is_load_error() {
        let r = NamedTensorStore::read_from(&b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00"[..]);
        assert!(matches!(r, Err(Error::Load(_))));
    }

    #[test]
    fn missing_tensor_error_names_it() {
        let store = NamedTensorStore::new();
        let err = store.tensor::<f32>("enc.layer3.attn.wq", &[2, 2]).unwrap_err();
        assert!(err.to_string().contains("enc.layer3.attn.wq"));
    }

    #[test]
    fn shape_mismatch_error_names_tensor() {
        let mut store = NamedTensorStore::new();
        store.insert("w", vec![2, 2], vec![0.0; 4]);
        let err = store.tensor::<f32>("w", &[4, 1]).unwrap_err();
        assert!(err.to_string().contains('w'));
    }

    proptest! {
        #[test]
        fn roundtrip_any_store(tensors in proptest::collection::vec(
            ("[a-z.]{1,12}", proptest::collection::vec(-1e6f32..1e6f32, 0..24)),
            0..6,
        )) {
            let mut store = NamedTensorStore::new();
            for (name, data) in tensors {
                let n = data.len();
                store.insert(name, vec![n], data);
            }
            let mut bytes = Vec::new();
            store.write_to(&mut bytes).unwrap();
            let back = NamedTensorStore::read_from(bytes.as_slice()).unwrap();
            prop_assert_eq!(store, back);
        }
    }
}
