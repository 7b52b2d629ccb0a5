//! Versioned container of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CDSN" | version: u32 | count: u32
//! repeated count times:
//!   name_len: u32 | name: UTF-8 bytes
//!   rank: u32 | dims: u64 * rank
//!   element type: u8 (0 = f32, 1 = f64)
//!   elements: raw little-endian bytes
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, ElementType, Tensor};

pub const MAGIC: &[u8; 4] = b"CDSN";
pub const VERSION: u32 = 1;

/// A tensor of either supported element type.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn element_type(&self) -> ElementType {
        match self {
            StoredTensor::F32(_) => ElementType::F32,
            StoredTensor::F64(_) => ElementType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// The tensor converted to `T` (exact when the types already agree).
    pub fn to<T: Element>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::TYPE {
            ElementType::F32 => StoredTensor::F32(t.cast()),
            ElementType::F64 => StoredTensor::F64(t.cast()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: IndexMap<String, StoredTensor>,
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let bytes = take(buf, pos, 4)?;
    Ok(u32::from_le_bytes(bytes.try_into().unwrap()))
}

fn read_u64(buf: &[u8], pos: &mut usize) -> Result<u64> {
    let bytes = take(buf, pos, 8)?;
    Ok(u64::from_le_bytes(bytes.try_into().unwrap()))
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", *pos)))?;
    let out = &buf[*pos..end];
    *pos = end;
    Ok(out)
}

fn decode<T: Element>(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<T>> {
    let size = T::TYPE.size();
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(name.into(), StoredTensor::from_tensor(t));
    }

    pub fn get<T: Element>(&self, name: &str) -> Option<Tensor<T>> {
        self.tensors.get(name).map(StoredTensor::to)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn from_store<T: Element>(store: &ParamStore<T>) -> Self {
        let mut ck = Self::new();
        for (name, t) in store.named_tensors() {
            ck.insert(name, t);
        }
        ck
    }

    /// Overwrites every store tensor present in the checkpoint. Shape
    /// disagreements are errors; tensors missing from the checkpoint are
    /// reported by name when `strict`.
    pub fn load_into<T: Element>(&self, store: &mut ParamStore<T>, strict: bool) -> Result<usize> {
        let mut loaded = 0;
        let ids: Vec<_> = store.iter().map(|(id, e)| (id, e.name.clone())).collect();
        for (id, name) in ids {
            match self.tensors.get(&name) {
                Some(t) => {
                    if t.shape() != store.value(id).shape() {
                        return Err(Error::Checkpoint(format!(
                            "tensor `{name}` has shape {:?}, expected {:?}",
                            t.shape(),
                            store.value(id).shape()
                        )));
                    }
                    *store.value_mut(id) = t.to();
                    loaded += 1;
                }
                None if strict => {
                    return Err(Error::Checkpoint(format!("missing tensor `{name}`")));
                }
                None => {}
            }
        }
        Ok(loaded)
    }

    /// Drops every tensor whose name starts with `prefix`; returns how many.
    pub fn strip_prefix(&mut self, prefix: &str) -> usize {
        let before = self.tensors.len();
        self.tensors.retain(|name, _| !name.starts_with(prefix));
        before - self.tensors.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = t.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(t.element_type().tag());
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|&x| x.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|&x| x.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut pos = 0;
        if take(buf, &mut pos, 4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(buf, &mut pos)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(buf, &mut pos)?;
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let name_len = read_u32(buf, &mut pos)? as usize;
            let name = std::str::from_utf8(take(buf, &mut pos, name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = read_u32(buf, &mut pos)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(buf, &mut pos).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let tag = take(buf, &mut pos, 1)?[0];
            let ty = ElementType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("unknown element type tag {tag}")))?;
            let count: usize = shape.iter().product();
            let bytes = take(buf, &mut pos, count * ty.size())?;
            let t = match ty {
                ElementType::F32 => StoredTensor::F32(decode(shape, bytes)?),
                ElementType::F64 => StoredTensor::F64(decode(shape, bytes)?),
            };
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        if pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - pos)));
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut ck = Checkpoint::new();
        ck.insert("a", &Tensor::<f32>::new(vec![2], vec![1.0, -2.5]).unwrap());
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"CDSN");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(b[16], b'a');
        // rank 1, dim 2, tag f32, 8 data bytes
        assert_eq!(b.len(), 17 + 4 + 8 + 1 + 8);
        assert_eq!(b[29], 0);
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new();
        ck.insert("w", &Tensor::<f64>::ones(vec![2, 2]));
        let b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = b;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            entries in prop::collection::vec(
                ("[a-z.]{1,12}", prop::collection::vec(1usize..4, 1..4), any::<bool>(), any::<u64>()),
                0..6,
            )
        ) {
            let mut ck = Checkpoint::new();
            for (name, shape, wide, seed) in entries {
                let n: usize = shape.iter().product();
                // Arbitrary bit patterns, NaN payloads included.
                if wide {
                    let data = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1))).collect();
                    ck.tensors.insert(name, StoredTensor::F64(Tensor::new(shape, data).unwrap()));
                } else {
                    let data = (0..n).map(|i| f32::from_bits((seed >> 7) as u32 ^ (i as u32).wrapping_mul(2654435761))).collect();
                    ck.tensors.insert(name, StoredTensor::F32(Tensor::new(shape, data).unwrap()));
                }
            }
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
