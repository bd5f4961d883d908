//! Binary tensor container shared by weight files and parity fixtures.
//!
//! Layout, little-endian: magic `CDPA`, `u32` version, `u32` tensor count,
//! `u32` descriptor length, UTF-8 JSON descriptor, then per tensor
//! `u32` name length, UTF-8 name, `u8` dtype, `u8` rank, `rank × u64` dims and
//! a row-major payload. A `u32` CRC32 of every preceding byte closes the file.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{NetError, Result};

pub const MAGIC: [u8; 4] = *b"CDPA";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
/// Ranks above this are rejected as malformed.
pub const MAX_RANK: u8 = 8;

/// Dense row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = element_count(&dims).ok_or_else(|| NetError::invalid("tensor", "element count overflows"))?;
        if n != data.len() {
            return Err(NetError::invalid(
                "tensor",
                format!("dims {dims:?} hold {n} values but {} were given", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self { dims, data: vec![0.0; n] }
    }

    pub fn scalar(value: f32) -> Self {
        Self { dims: vec![1], data: vec![value] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Ordered named tensors plus the raw JSON descriptor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    descriptor: String,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Container {
    pub fn new(descriptor: impl Into<String>) -> Self {
        Self { descriptor: descriptor.into(), ..Self::default() }
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NetError::DuplicateTensor(name));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| NetError::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Tensors in file order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + self.descriptor.len() + payload + 64 * self.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        out.extend_from_slice(&len_u32(self.descriptor.len(), "descriptor length")?.to_le_bytes());
        out.extend_from_slice(self.descriptor.as_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&len_u32(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            if t.dims.len() > MAX_RANK as usize {
                return Err(NetError::invalid(name, format!("rank {} exceeds {MAX_RANK}", t.dims.len())));
            }
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses a container. Every structural defect maps to its own error variant.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| NetError::BadMagic)? != MAGIC {
            return Err(NetError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NetError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let desc_len = r.u32()? as usize;
        let descriptor = std::str::from_utf8(r.take(desc_len)?)
            .map_err(|_| NetError::BadDescriptor("descriptor is not UTF-8".into()))?
            .to_string();
        let mut c = Container::new(descriptor);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| NetError::BadHeader("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(NetError::UnsupportedDtype { name, dtype });
            }
            let rank = r.u8()?;
            if rank > MAX_RANK {
                return Err(NetError::BadHeader(format!("tensor `{name}` has rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let d = r.u64()?;
                dims.push(usize::try_from(d).map_err(|_| NetError::Truncated)?);
            }
            let n = element_count(&dims).ok_or(NetError::Truncated)?;
            let raw = r.take(n.checked_mul(4).ok_or(NetError::Truncated)?)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            c.insert(name, Tensor { dims, data })?;
        }
        let body_end = r.pos;
        match bytes.len() - body_end {
            n if n < 4 => return Err(NetError::Truncated),
            4 => {}
            n => return Err(NetError::TrailingBytes(n - 4)),
        }
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("four footer bytes"));
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(NetError::ChecksumMismatch { stored, computed });
        }
        for (name, t) in c.iter() {
            if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(NetError::NonFinite { name: name.to_string(), index: i });
            }
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| NetError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| NetError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| NetError::invalid("container", format!("{what} {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(NetError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(NetError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(r#"{"k":1}"#);
        c.insert("a", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, -0.0, 1e-30]).unwrap()).unwrap();
        c.insert("b.bias", Tensor::scalar(7.25)).unwrap();
        c.insert("empty", Tensor::zeros(vec![0, 4])).unwrap();
        c
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], &[0x43, 0x44, 0x50, 0x41]);
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 7);
        assert_eq!(&bytes[16..23], br#"{"k":1}"#);
        assert_eq!(u32::from_le_bytes(bytes[23..27].try_into().unwrap()), 1);
        assert_eq!(bytes[27], b'a');
        assert_eq!(bytes[28], DTYPE_F32);
        assert_eq!(bytes[29], 2);
        assert_eq!(u64::from_le_bytes(bytes[30..38].try_into().unwrap()), 2);
        let n = bytes.len();
        let crc = u32::from_le_bytes(bytes[n - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&bytes[..n - 4]));
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.descriptor(), c.descriptor());
        for ((n1, t1), (n2, t2)) in c.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.dims(), t2.dims());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 4..bytes.len() {
            let err = Container::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, NetError::Truncated), "cut {cut}: {err}");
        }
        assert!(matches!(Container::from_bytes(&bytes[..2]), Err(NetError::BadMagic)));
    }

    #[test]
    fn malformed_headers() {
        let good = sample().to_bytes().unwrap();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(Container::from_bytes(&b), Err(NetError::BadMagic)));
        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(Container::from_bytes(&b), Err(NetError::UnsupportedVersion(2))));
        let mut b = good.clone();
        b[28] = 1;
        assert!(matches!(Container::from_bytes(&b), Err(NetError::UnsupportedDtype { dtype: 1, .. })));
        let mut b = good.clone();
        b.push(0);
        assert!(matches!(Container::from_bytes(&b), Err(NetError::TrailingBytes(1))));
        let mut b = good.clone();
        let n = b.len();
        b[n - 10] ^= 0x01;
        assert!(matches!(Container::from_bytes(&b), Err(NetError::ChecksumMismatch { .. })));
    }

    #[test]
    fn non_finite_values_rejected() {
        let mut c = Container::new("{}");
        c.insert("w", Tensor::new(vec![3], vec![0.0, f32::NAN, 1.0]).unwrap()).unwrap();
        let err = Container::from_bytes(&c.to_bytes().unwrap()).unwrap_err();
        assert!(matches!(err, NetError::NonFinite { ref name, index: 1 } if name == "w"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = Container::new("{}");
        c.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(c.insert("w", Tensor::scalar(2.0)), Err(NetError::DuplicateTensor(_))));
    }

    #[test]
    fn huge_declared_dims_do_not_allocate() {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.push(b'w');
        b.push(0);
        b.push(2);
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Container::from_bytes(&b), Err(NetError::Truncated)));
    }
}
