//! Named parameter storage with gradient and optimizer-moment slots, plus the
//! binary checkpoint format.
//!
//! Checkpoint layout: magic `DASC`, format version u16 LE, then one record
//! per parameter in insertion order: name length u16, name bytes, rank u8,
//! extents u32 LE, values as 32-bit IEEE-754 LE. Round-trips are bit-exact.

use crate::error::{config_err, data_err, Result};
use crate::numerics::tensor::{Scalar, Tensor};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DASC";
const FORMAT_VERSION: u16 = 1;

/// One trainable tensor with its gradient accumulator and Adam moments,
/// all shape-matched by construction.
#[derive(Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub moment1: Tensor<T>,
    pub moment2: Tensor<T>,
}

/// Ordered collection of uniquely named parameters. Insertion order is the
/// serialization order, so saves are stable across runs.
#[derive(Debug)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return config_err(format!("duplicate parameter name '{name}'"));
        }
        let shape = value.shape().to_vec();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            grad: Tensor::zeros(&shape),
            moment1: Tensor::zeros(&shape),
            moment2: Tensor::zeros(&shape),
            value,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name).map(|p| &p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    /// Number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor<T>) -> Result<()> {
        let param = match self.get_mut(name) {
            Some(p) => p,
            None => return config_err(format!("unknown parameter '{name}'")),
        };
        if param.grad.shape() != delta.shape() {
            return config_err(format!(
                "gradient shape {:?} does not match parameter '{name}' shape {:?}",
                delta.shape(),
                param.grad.shape()
            ));
        }
        for (g, &d) in param.grad.data_mut().iter_mut().zip(delta.data()) {
            *g = *g + d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.iter_mut() {
            for g in p.grad.data_mut() {
                *g = T::zero();
            }
        }
    }

    /// Snapshot of all gradients keyed by name, in insertion order.
    pub fn grads_snapshot(&self) -> Vec<(String, Tensor<T>)> {
        self.entries
            .iter()
            .map(|p| (p.name.clone(), p.grad.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for p in &self.entries {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(p.value.rank() as u8);
            for &e in p.value.shape() {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                buf.extend_from_slice(&v.to_f32().to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return data_err(format!(
                "bad checkpoint magic {magic:?} at offset 0 (expected {MAGIC:?})"
            ));
        }
        let version = u16::from_le_bytes(cur.take(2, "format version")?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return data_err(format!(
                "unsupported checkpoint format version {version} at offset 4"
            ));
        }
        let mut store = ParamStore::new();
        while cur.pos < bytes.len() {
            let at = cur.pos;
            let name_len =
                u16::from_le_bytes(cur.take(2, "parameter name length")?.try_into().unwrap());
            let name_bytes = cur.take(name_len as usize, "parameter name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| {
                    crate::error::Error::Data(format!(
                        "parameter name at offset {at} is not valid UTF-8"
                    ))
                })?
                .to_string();
            let rank = cur.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let e = u32::from_le_bytes(cur.take(4, "extent")?.try_into().unwrap());
                shape.push(e as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                let v = f32::from_le_bytes(cur.take(4, "value")?.try_into().unwrap());
                data.push(T::from_f32(v));
            }
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            crate::error::Error::Data(msg) => {
                crate::error::Error::Data(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return data_err(format!(
                "truncated checkpoint: reading {what} at offset {} needs {n} bytes, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::zeros(&[2])).unwrap();
        let err = store.insert("w", Tensor::zeros(&[3])).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn grad_slots_match_value_shapes() {
        let mut store = ParamStore::<f32>::new();
        store.insert("k", Tensor::zeros(&[3, 3, 1, 4])).unwrap();
        let p = store.get("k").unwrap();
        assert_eq!(p.grad.shape(), p.value.shape());
        assert_eq!(p.moment1.shape(), p.value.shape());
        assert_eq!(p.moment2.shape(), p.value.shape());
    }

    #[test]
    fn corrupted_magic_and_truncation_name_the_offset() {
        let mut store = ParamStore::<f32>::new();
        store
            .insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut bytes = store.to_bytes();
        bytes[0] = b'X';
        let err = ParamStore::<f32>::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("offset 0"));

        let bytes = store.to_bytes();
        let err = ParamStore::<f32>::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn scalar_rank_zero_parameters_round_trip() {
        let mut store = ParamStore::<f32>::new();
        store.insert("s", Tensor::scalar(0.5)).unwrap();
        let loaded = ParamStore::<f32>::from_bytes(&store.to_bytes()).unwrap();
        assert_eq!(loaded.value("s").unwrap().as_scalar(), Some(0.5));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            let mut store = ParamStore::<f32>::new();
            let n = values.len();
            store.insert("a", Tensor::new(vec![n], values.clone()).unwrap()).unwrap();
            store.insert("b.bias", Tensor::new(vec![1, n], values.clone()).unwrap()).unwrap();
            let bytes = store.to_bytes();
            let loaded = ParamStore::<f32>::from_bytes(&bytes).unwrap();
            prop_assert_eq!(loaded.to_bytes(), bytes);
            let got = loaded.value("a").unwrap();
            for (x, y) in got.data().iter().zip(&values) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(loaded.get("a").unwrap().name.as_str(), "a");
        }
    }
}
