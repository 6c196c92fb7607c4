//! Named parameter container and its binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       b"MTWS"
//! version     u16            (currently 1)
//! count       u32
//! count x entry:
//!   name_len  u32, name UTF-8 bytes
//!   dtype     u8             (0 = f32, 1 = f64)
//!   rank      u8
//!   extents   u64 x rank
//!   offset    u64            (byte offset into the payload)
//! payload_len u64
//! payload     raw little-endian values, entries in name order
//! crc32       u32            (IEEE CRC-32 of the payload)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MTWS";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Data {
    pub fn dtype(&self) -> DType {
        match self {
            Data::F32(_) => DType::F32,
            Data::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            Data::F32(v) => v[i] as f64,
            Data::F64(v) => v[i],
        }
    }

    pub fn set(&mut self, i: usize, x: f64) {
        match self {
            Data::F32(v) => v[i] = x as f32,
            Data::F64(v) => v[i] = x,
        }
    }

    pub fn from_f64(dtype: DType, values: Vec<f64>) -> Self {
        match dtype {
            DType::F32 => Data::F32(values.into_iter().map(|v| v as f32).collect()),
            DType::F64 => Data::F64(values),
        }
    }

    fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        match self {
            Data::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            Data::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
        }
    }
}

/// One stored parameter: logical extents (rank 0..=4) plus values.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub data: Data,
}

impl StoredTensor {
    pub fn new(dims: Vec<usize>, data: Data) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "stored tensor with extents {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if dims.len() > 4 {
            return Err(Error::shape(format!("rank {} exceeds 4", dims.len())));
        }
        Ok(StoredTensor { dims, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// 4-D compute shape: extents right-aligned, leading axes of 1.
    pub fn shape4(&self) -> Shape {
        dims_to_shape(&self.dims)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(self.shape4(), self.data.to_scalars()).expect("validated on construction")
    }
}

pub fn dims_to_shape(dims: &[usize]) -> Shape {
    let mut s = [1; 4];
    let off = 4 - dims.len().min(4);
    for (i, &d) in dims.iter().take(4).enumerate() {
        s[off + i] = d;
    }
    Shape(s)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, StoredTensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: StoredTensor) -> Option<StoredTensor> {
        self.entries.insert(name.into(), t)
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: impl Into<String>, dims: Vec<usize>, t: &Tensor<T>, dtype: DType) -> Result<()> {
        let values = t.data().iter().map(|v| v.to_f64()).collect();
        let st = StoredTensor::new(dims, Data::from_f64(dtype, values))?;
        self.entries.insert(name.into(), st);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut StoredTensor> {
        self.entries.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<StoredTensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut StoredTensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.entries.values().map(StoredTensor::numel).sum()
    }

    /// Applies `f` to every value of every entry whose name starts with `prefix`.
    pub fn map_prefix(&mut self, prefix: &str, mut f: impl FnMut(&str, f64) -> f64) {
        for (name, t) in self.entries.iter_mut().filter(|(k, _)| k.starts_with(prefix)) {
            for i in 0..t.data.len() {
                let v = t.data.get(i);
                t.data.set(i, f(name, v));
            }
        }
    }

    /// Copy with every entry converted to `dtype`.
    pub fn converted(&self, dtype: DType) -> WeightStore {
        let entries = self
            .entries
            .iter()
            .map(|(k, t)| {
                let values = (0..t.numel()).map(|i| t.data.get(i)).collect();
                (k.clone(), StoredTensor { dims: t.dims.clone(), data: Data::from_f64(dtype, values) })
            })
            .collect();
        WeightStore { entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        header.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut payload = Vec::new();
        for (name, t) in &self.entries {
            header.extend_from_slice(&(name.len() as u32).to_le_bytes());
            header.extend_from_slice(name.as_bytes());
            header.push(t.data.dtype().tag());
            header.push(t.dims.len() as u8);
            for &d in &t.dims {
                header.extend_from_slice(&(d as u64).to_le_bytes());
            }
            header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            match &t.data {
                Data::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                Data::F64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            }
        }
        header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        let crc = crc32fast::hash(&payload);
        header.extend_from_slice(&payload);
        header.extend_from_slice(&crc.to_le_bytes());
        header
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a weight file".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_owned();
            let dtype = DType::from_tag(r.u8()?)?;
            let rank = r.u8()? as usize;
            if rank > 4 {
                return Err(Error::Format(format!("entry `{name}` has rank {rank} > 4")));
            }
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            table.push((name, dtype, dims, offset));
        }
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut entries = BTreeMap::new();
        let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(table.len());
        for (name, dtype, dims, offset) in &table {
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let size = numel.and_then(|n| n.checked_mul(dtype.size()));
            let end = size.and_then(|s| offset.checked_add(s));
            let Some(end) = end.filter(|&e| e <= payload.len()) else {
                return Err(Error::Format(format!("entry `{name}` extends past the payload")));
            };
            spans.push((*offset, end, name));
            let raw = &payload[*offset..end];
            let data = match dtype {
                DType::F32 => Data::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::F64 => Data::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            if entries.insert(name.clone(), StoredTensor { dims: dims.clone(), data }).is_some() {
                return Err(Error::Format(format!("duplicate entry `{name}`")));
            }
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::Format(format!(
                    "entries `{}` and `{}` overlap",
                    pair[0].2, pair[1].2
                )));
            }
        }
        Ok(WeightStore { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated file at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
