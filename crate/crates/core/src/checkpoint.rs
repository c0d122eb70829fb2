//! Binary weight checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "PAVICKPT"
//! version  u32       1
//! count    u32       number of tensors
//! repeated count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (ndim × u64)
//!   data     product(dims) × f64
//! ```
//!
//! Decoding is bounds-checked and never allocates more than the input could hold.

use thiserror::Error;

use crate::autodiff::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"PAVICKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("tensor name is not valid UTF-8")]
    Name,
    #[error("tensor `{0}` has an impossible shape")]
    Shape(String),
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
    #[error("checkpoint has no tensor named `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    Mismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
}

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Serialize every tensor of a store in id order.
pub fn encode_store(store: &ParamStore) -> Vec<u8> {
    let tensors: Vec<(String, Tensor)> = store.iter().map(|(_, name, t)| (name.to_string(), t.clone())).collect();
    encode(&tensors)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(r.remaining() / 12));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Name)?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim > r.remaining() / 8 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Shape(name.clone()))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| CheckpointError::Shape(name.clone()))?;
            shape.push(d);
        }
        let nbytes = numel
            .checked_mul(8)
            .ok_or_else(|| CheckpointError::Shape(name.clone()))?;
        let raw = r.take(nbytes)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|_| CheckpointError::Shape(name.clone()))?;
        out.push((name, t));
    }
    if r.remaining() > 0 {
        return Err(CheckpointError::Trailing(r.remaining()));
    }
    Ok(out)
}

/// Overwrite every store tensor with the same-named checkpoint tensor.
pub fn load_into(store: &mut ParamStore, bytes: &[u8]) -> Result<(), CheckpointError> {
    let entries = decode(bytes)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let (_, t) = entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if t.shape() != store.get(id).shape() {
            return Err(CheckpointError::Mismatch {
                name,
                got: t.shape().to_vec(),
                expected: store.get(id).shape().to_vec(),
            });
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            (
                "a.w".into(),
                Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, -0.0]).unwrap(),
            ),
            ("b".into(), Tensor::scalar(7.25)),
            ("empty".into(), Tensor::zeros(&[0, 4])),
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..8], MAGIC);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, t1), (n2, t2)) in back.iter().zip(sample()) {
            assert_eq!(n1, &n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode(&sample());
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err(), "prefix of {cut} bytes decoded");
        }
    }

    #[test]
    fn header_errors() {
        assert_eq!(decode(b"NOTACKPT\x01\0\0\0\0\0\0\0"), Err(CheckpointError::BadMagic));
        let mut bytes = encode(&[]);
        bytes[8] = 2;
        assert_eq!(decode(&bytes), Err(CheckpointError::Version(2)));
        let mut bytes = encode(&[]);
        bytes.push(0);
        assert_eq!(decode(&bytes), Err(CheckpointError::Trailing(1)));
    }

    #[test]
    fn huge_dimensions_do_not_allocate() {
        let mut bytes = encode(&[]);
        bytes[12] = 1;
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn load_into_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        store.add("b", Tensor::scalar(0.0));
        load_into(&mut store, &encode(&sample())).unwrap();
        assert_eq!(store.get(crate::autodiff::ParamId(0)).item(), 7.25);
        let mut store = ParamStore::new();
        store.add("missing", Tensor::scalar(0.0));
        assert!(matches!(
            load_into(&mut store, &encode(&sample())),
            Err(CheckpointError::Missing(_))
        ));
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::zeros(&[3, 2]));
        assert!(matches!(
            load_into(&mut store, &encode(&sample())),
            Err(CheckpointError::Mismatch { .. })
        ));
    }
}
