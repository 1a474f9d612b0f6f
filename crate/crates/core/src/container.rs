//! Self-describing binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  "MKPN"
//! version          u32
//! config length    u32
//! config block     UTF-8 `key=value` lines
//! tensor count     u32
//! table entry      name length u32, name bytes, dtype u8 (0 = f32, 1 = f64),
//!   (per tensor)   rank u32, extents u64 x rank, payload offset u64
//! payloads         IEEE-754 little-endian values, offsets relative to the
//!                  first payload byte
//! ```
//!
//! Checkpoints and stored burst samples both use this format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MKPN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

/// Ordered metadata plus ordered named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, StoredTensor)>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err("unexpected end of container"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err("name is not UTF-8"))
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets a metadata entry, replacing an existing key in place.
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| format_err(format!("missing metadata key `{key}`")))
    }

    pub fn meta_entries(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn push_tensor<T: Real>(&mut self, name: &str, tensor: &Tensor<T>) -> Result<()> {
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(format_err(format!("duplicate tensor name `{name}`")));
        }
        self.tensors
            .push((name.to_string(), StoredTensor::from_tensor(tensor)));
        Ok(())
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn stored(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        self.stored(name)
            .map(StoredTensor::to_tensor)
            .ok_or_else(|| format_err(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

        let config: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());

        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            let count: usize = t.shape().iter().product();
            offset += (count * t.dtype().size()) as u64;
        }
        for (_, t) in &self.tensors {
            t.write_payload(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported format version {version}")));
        }
        let config_len = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| format_err("config block is not UTF-8"))?;
        let mut container = Container::new();
        for line in config.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format_err(format!("malformed config line `{line}`")))?;
            container.meta.push((k.to_string(), v.to_string()));
        }

        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let dtype = DType::from_code(r.u8()?)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            table.push((name, dtype, shape, offset));
        }
        let payload = &bytes[r.pos..];
        let mut expected_offset = 0;
        for (name, dtype, shape, offset) in table {
            if offset != expected_offset {
                return Err(format_err(format!("tensor `{name}` has offset {offset}, expected {expected_offset}")));
            }
            let count: usize = shape.iter().product();
            let len = count * dtype.size();
            let data = payload
                .get(offset..offset + len)
                .ok_or_else(|| format_err(format!("payload of `{name}` truncated")))?;
            let stored = match dtype {
                DType::F32 => StoredTensor::F32(Tensor::new(
                    &shape,
                    data.chunks_exact(4).map(f32::read_le).collect(),
                )?),
                DType::F64 => StoredTensor::F64(Tensor::new(
                    &shape,
                    data.chunks_exact(8).map(f64::read_le).collect(),
                )?),
            };
            if container.tensors.iter().any(|(n, _)| *n == name) {
                return Err(format_err(format!("duplicate tensor name `{name}`")));
            }
            container.tensors.push((name, stored));
            expected_offset += len;
        }
        if expected_offset != payload.len() {
            return Err(format_err("trailing bytes after payload"));
        }
        Ok(container)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_corruption() {
        let mut c = Container::new();
        c.set_meta("kind", "test");
        c.push_tensor("a", &Tensor::<f64>::full(&[2, 3], 1.5)).unwrap();
        assert!(c.push_tensor("a", &Tensor::<f64>::zeros(&[1])).is_err());
        let bytes = c.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Container::from_bytes(&longer).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(Container::from_bytes(&version).is_err());
    }

    #[test]
    fn meta_replaces_in_place() {
        let mut c = Container::new();
        c.set_meta("a", 1);
        c.set_meta("b", 2);
        c.set_meta("a", 3);
        assert_eq!(c.meta_entries()[0], ("a".into(), "3".into()));
        assert_eq!(c.meta("b"), Some("2"));
    }

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(
            vals64 in prop::collection::vec(-1e6f64..1e6, 0..40),
            vals32 in prop::collection::vec(-1e3f32..1e3, 1..20),
            key in "[a-z_]{1,8}",
            value in "[ -~&&[^=]]{0,12}",
        ) {
            let mut c = Container::new();
            c.set_meta(&key, &value);
            c.push_tensor("w64", &Tensor::new(&[vals64.len()], vals64.clone()).unwrap()).unwrap();
            c.push_tensor("w32", &Tensor::new(&[1, vals32.len()], vals32.clone()).unwrap()).unwrap();
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_bytes(), bytes);
            let w64 = back.tensor::<f64>("w64").unwrap();
            prop_assert_eq!(w64.data(), &vals64[..]);
        }
    }
}
