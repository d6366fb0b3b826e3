//! Binary weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RNRT" | version u32 | count u32
//! per tensor: name_len u16 | name (UTF-8) | dtype u8 | scale_exp i8 | ndim u8
//!             | dims u32 x ndim | payload
//! ```
//!
//! dtype codes: 0 = float32, 1 = int8, 2 = int16. `scale_exp` is stored but
//! ignored for float32.

use std::collections::HashMap;
use std::path::Path;

use super::FormatError;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RNRT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I16(Vec<i16>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I8(_) => 1,
            TensorData::I16(_) => 2,
        }
    }

    /// Integer view of int8/int16 payloads.
    pub fn to_i32(&self) -> Option<Vec<i32>> {
        match self {
            TensorData::F32(_) => None,
            TensorData::I8(v) => Some(v.iter().map(|&x| x as i32).collect()),
            TensorData::I16(v) => Some(v.iter().map(|&x| x as i32).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub scale_exp: i8,
    pub data: TensorData,
}

impl StoredTensor {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self { dims, scale_exp: 0, data: TensorData::F32(data) }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    pub fn bit_eq(&self, other: &Self) -> bool {
        if self.dims != other.dims || self.scale_exp != other.scale_exp {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (a, b) => a == b,
        }
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightContainer {
    entries: Vec<(String, StoredTensor)>,
    index: HashMap<String, usize>,
}

impl WeightContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Adds a tensor; a second tensor under an existing name is an error.
    pub fn insert(&mut self, name: impl Into<String>, t: StoredTensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(FormatError::DuplicateName(name).into());
        }
        let expected: usize = t.dims.iter().product();
        if expected != t.data.len() {
            return Err(FormatError::PayloadMismatch { name, expected, actual: t.data.len() }.into());
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    /// Inserts or replaces, keeping the original position on replace.
    pub fn set(&mut self, name: impl Into<String>, t: StoredTensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<StoredTensor> {
        let i = self.index.remove(name)?;
        let (_, t) = self.entries.remove(i);
        for v in self.index.values_mut() {
            if *v > i {
                *v -= 1;
            }
        }
        Some(t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| FormatError::TooLarge("<container>".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let too_large = || FormatError::TooLarge(name.clone());
            let name_len = u16::try_from(name.len()).map_err(|_| too_large())?;
            let ndim = u8::try_from(t.dims.len()).map_err(|_| too_large())?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.data.code());
            out.push(t.scale_exp as u8);
            out.push(ndim);
            for &d in &t.dims {
                let d = u32::try_from(d).map_err(|_| too_large())?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
                TensorData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
                TensorData::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")?;
        let mut c = WeightContainer::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| FormatError::InvalidName(name_at))?
                .to_string();
            let dtype = r.u8("dtype")?;
            let scale_exp = r.u8("scale_exp")? as i8;
            let ndim = r.u8("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32("dims")? as usize);
            }
            let elems = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| FormatError::DimsOverflow(name.clone()))?;
            let elem_size = match dtype {
                0 => 4,
                1 => 1,
                2 => 2,
                other => return Err(FormatError::UnknownDtype(other)),
            };
            let nbytes = elems.checked_mul(elem_size).ok_or_else(|| FormatError::DimsOverflow(name.clone()))?;
            let payload = r.take(nbytes, "payload")?;
            let data = match dtype {
                0 => TensorData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|b| f32::from_bits(u32::from_le_bytes(b.try_into().unwrap())))
                        .collect(),
                ),
                1 => TensorData::I8(payload.iter().map(|&b| b as i8).collect()),
                _ => TensorData::I16(payload.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect()),
            };
            if c.contains(&name) {
                return Err(FormatError::DuplicateName(name));
            }
            c.set(name, StoredTensor { dims, scale_exp, data });
        }
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(c)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated { what, offset: self.pos, needed: n }),
        }
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn save_weights(path: impl AsRef<Path>, c: &WeightContainer) -> Result<()> {
    std::fs::write(path, c.to_bytes()?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightContainer> {
    let bytes = std::fs::read(path)?;
    WeightContainer::from_bytes(&bytes).map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_container_is_twelve_bytes() {
        let bytes = WeightContainer::new().to_bytes().unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"RNRT");
        assert!(WeightContainer::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn int8_payload_layout() {
        let mut c = WeightContainer::new();
        c.insert("w", StoredTensor { dims: vec![3], scale_exp: -3, data: TensorData::I8(vec![1, 2, 3]) }).unwrap();
        let bytes = c.to_bytes().unwrap();
        let expected: Vec<u8> = [
            &b"RNRT"[..],
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1u16.to_le_bytes(),
            b"w",
            &[1, (-3i8) as u8, 1],
            &3u32.to_le_bytes(),
            &[1, 2, 3],
        ]
        .concat();
        assert_eq!(bytes, expected);
        assert_eq!(WeightContainer::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn distinct_errors() {
        let mut c = WeightContainer::new();
        c.insert("a", StoredTensor::f32(vec![2], vec![1.0, 2.0])).unwrap();
        let good = c.to_bytes().unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(WeightContainer::from_bytes(&bad), Err(FormatError::BadMagic)));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(WeightContainer::from_bytes(&bad), Err(FormatError::UnsupportedVersion(9))));

        assert!(matches!(
            WeightContainer::from_bytes(&good[..good.len() - 1]),
            Err(FormatError::Truncated { what: "payload", .. })
        ));

        // Two copies of the same record.
        let record = &good[12..];
        let mut dup = good[..8].to_vec();
        dup.extend_from_slice(&2u32.to_le_bytes());
        dup.extend_from_slice(record);
        dup.extend_from_slice(record);
        assert!(matches!(WeightContainer::from_bytes(&dup), Err(FormatError::DuplicateName(n)) if n == "a"));

        assert!(matches!(
            c.insert("a", StoredTensor::f32(vec![1], vec![0.0])),
            Err(Error::Format(FormatError::DuplicateName(_)))
        ));
    }

    #[test]
    fn huge_dims_fail_cleanly() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&[0, 0, 3]);
        for _ in 0..3 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let err = WeightContainer::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, FormatError::DimsOverflow(_) | FormatError::Truncated { .. }));
    }

    #[test]
    fn remove_keeps_order() {
        let mut c = WeightContainer::new();
        for n in ["a", "b", "c"] {
            c.insert(n, StoredTensor::f32(vec![1], vec![0.0])).unwrap();
        }
        c.remove("a");
        assert_eq!(c.names().collect::<Vec<_>>(), ["b", "c"]);
        assert!(c.get("c").is_some());
    }
}
