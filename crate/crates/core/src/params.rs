//! Named parameter sets and their binary container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "IGDPPSET"
//! version  u32      1
//! count    u32
//! entry*   name_len u32 | name bytes (UTF-8) | rank u32 | dims u64 × rank | f64 × numel
//! ```

use thiserror::Error;

use crate::tensor::Tensor;

pub const PARAMSET_MAGIC: &[u8; 8] = b"IGDPPSET";
pub const PARAMSET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("parameter `{name}` expects {expected} values, got {actual}")]
    Length {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("expected {expected} gradient buffers, got {actual}")]
    Count { expected: usize, actual: usize },
    #[error("bad parameter container magic")]
    BadMagic,
    #[error("unsupported parameter container version {0}")]
    Version(u32),
    #[error("parameter container truncated")]
    Truncated,
    #[error("parameter container has {0} trailing bytes")]
    Trailing(usize),
    #[error("malformed parameter container: {0}")]
    Malformed(String),
}

/// Which network a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Generator,
    Discriminator,
    QHead,
}

impl ParamRole {
    pub fn prefix(self) -> &'static str {
        match self {
            ParamRole::Generator => "g",
            ParamRole::Discriminator => "d",
            ParamRole::QHead => "q",
        }
    }
}

/// Ordered, uniquely named collection of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    role: ParamRole,
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(role: ParamRole) -> Self {
        Self {
            role,
            entries: Vec::new(),
        }
    }

    pub fn role(&self) -> ParamRole {
        self.role
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(ParamError::DuplicateName(name));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn tensor_at(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn tensor_at_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    /// Total number of scalars across every entry.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Splits a flat vector into per-entry buffers following entry order.
    pub fn split_flat(&self, flat: &[f64]) -> Result<Vec<Vec<f64>>, ParamError> {
        if flat.len() != self.total_len() {
            return Err(ParamError::Length {
                name: "<flattened>".into(),
                expected: self.total_len(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        Ok(self
            .entries
            .iter()
            .map(|(_, t)| {
                let part = flat[offset..offset + t.numel()].to_vec();
                offset += t.numel();
                part
            })
            .collect())
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), ParamError> {
        let parts = self.split_flat(flat)?;
        for ((_, t), p) in self.entries.iter_mut().zip(parts) {
            t.data_mut().copy_from_slice(&p);
        }
        Ok(())
    }

    /// Replaces the value of an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, data: &[f64]) -> Result<(), ParamError> {
        let (_, t) = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        if t.numel() != data.len() {
            return Err(ParamError::Length {
                name: name.to_string(),
                expected: t.numel(),
                actual: data.len(),
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }

    /// Size in bytes of [`ParamSet::to_bytes`] without serializing.
    pub fn encoded_len(&self) -> usize {
        16 + self
            .entries
            .iter()
            .map(|(n, t)| 4 + n.len() + 4 + 8 * t.rank() + 8 * t.numel())
            .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(PARAMSET_MAGIC);
        out.extend_from_slice(&PARAMSET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], role: ParamRole) -> Result<Self, ParamError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != PARAMSET_MAGIC {
            return Err(ParamError::BadMagic);
        }
        let version = r.u32()?;
        if version != PARAMSET_VERSION {
            return Err(ParamError::Version(version));
        }
        let count = r.u32()? as usize;
        let mut set = ParamSet::new(role);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ParamError::Malformed("name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| ParamError::Malformed("dimension overflow".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ParamError::Malformed("dimension overflow".into()))?;
            let byte_len = numel
                .checked_mul(8)
                .ok_or_else(|| ParamError::Malformed("dimension overflow".into()))?;
            let payload = r.take(byte_len)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor =
                Tensor::new(shape, data).map_err(|e| ParamError::Malformed(e.to_string()))?;
            set.insert(name, tensor)?;
        }
        if r.pos != bytes.len() {
            return Err(ParamError::Trailing(bytes.len() - r.pos));
        }
        Ok(set)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ParamError> {
        let end = self.pos.checked_add(n).ok_or(ParamError::Truncated)?;
        if end > self.bytes.len() {
            return Err(ParamError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ParamError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ParamError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new(ParamRole::Discriminator);
        p.insert("d.0.weight", Tensor::new(vec![2, 1, 2, 2], (0..8).map(|v| v as f64 * 0.5 - 1.0).collect()).unwrap())
            .unwrap();
        p.insert("d.0.bias", Tensor::vector(vec![-0.0, f64::MIN_POSITIVE])).unwrap();
        p
    }

    #[test]
    fn rejects_duplicate_names() {
        let mut p = sample();
        assert_eq!(
            p.insert("d.0.bias", Tensor::scalar(1.0)),
            Err(ParamError::DuplicateName("d.0.bias".into()))
        );
    }

    #[test]
    fn container_layout() {
        let p = sample();
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), p.encoded_len());
        assert_eq!(&bytes[..8], PARAMSET_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 10);
        assert_eq!(&bytes[20..30], b"d.0.weight");
    }

    #[test]
    fn decode_errors() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(ParamSet::from_bytes(&bad, ParamRole::Generator), Err(ParamError::BadMagic));
        assert_eq!(
            ParamSet::from_bytes(&bytes[..bytes.len() - 1], ParamRole::Generator),
            Err(ParamError::Truncated)
        );
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(ParamSet::from_bytes(&long, ParamRole::Generator), Err(ParamError::Trailing(1)));
    }

    #[test]
    fn flatten_and_split_agree() {
        let p = sample();
        let flat = p.flatten();
        assert_eq!(flat.len(), 10);
        let parts = p.split_flat(&flat).unwrap();
        assert_eq!(parts[0], p.tensor_at(0).data());
        assert_eq!(parts[1].len(), 2);
    }

    proptest! {
        #[test]
        fn container_round_trip_is_bit_exact(
            values in prop::collection::vec(prop::num::f64::ANY, 1..40),
            split in 1usize..40,
        ) {
            let split = split.min(values.len());
            let mut p = ParamSet::new(ParamRole::QHead);
            p.insert("a", Tensor::vector(values[..split].to_vec())).unwrap();
            if split < values.len() {
                p.insert("b.weight", Tensor::new(vec![1, values.len() - split], values[split..].to_vec()).unwrap()).unwrap();
            }
            let back = ParamSet::from_bytes(&p.to_bytes(), ParamRole::QHead).unwrap();
            prop_assert!(back.bitwise_eq(&p));
        }
    }
}
