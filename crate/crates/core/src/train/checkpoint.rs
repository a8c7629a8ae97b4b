//! Binary checkpoint: `MSEG`, u32 version, u64-length-prefixed config
//! text, then three tensor tables (parameters, optimizer, trainer state),
//! then a 64-bit FNV-1a checksum of every preceding byte. Integers are
//! little-endian. A table is a u32 count followed by entries of: u32 name
//! length, name bytes, u8 dtype code, u32 rank, u64 extents, raw values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"MSEG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    /// The tensor in precision `T`; fails unless the stored dtype is `T`.
    pub fn to_tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor {name} is stored as {} but {} was expected",
                self.dtype(),
                T::DTYPE
            )));
        }
        Ok(match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        })
    }

    pub fn scalar_f64(&self, name: &str) -> Result<f64> {
        let t: Tensor<f64> = self.to_tensor(name)?;
        t.item().map_err(|_| Error::Format(format!("tensor {name} should be a scalar")))
    }
}

pub type Table = Vec<(String, AnyTensor)>;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub config_text: String,
    pub params: Table,
    pub optimizer: Table,
    pub state: Table,
}

pub fn lookup<'a>(table: &'a Table, name: &str) -> Option<&'a AnyTensor> {
    table.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn write_table(out: &mut Vec<u8>, table: &Table) {
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, t) in table {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().code());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match t {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

impl CheckpointFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        for table in [&self.params, &self.optimizer, &self.state] {
            write_table(&mut out, table);
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (missing MSEG magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, this build reads {VERSION}")));
        }
        if bytes.len() < 16 {
            return Err(Error::Integrity("checkpoint truncated before its checksum".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader { bytes: body, pos: 8 };
        let config_len = r.u64()? as usize;
        let config_text = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::Format("config blob is not UTF-8".into()))?;
        let params = r.table()?;
        let optimizer = r.table()?;
        let state = r.table()?;
        if r.pos != body.len() {
            return Err(Error::Integrity(format!("{} unexpected bytes before the checksum", body.len() - r.pos)));
        }
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if stored != fnv1a64(body) {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        Ok(Self { config_text, params, optimizer, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                Error::Integrity(format!("checkpoint truncated: need {n} bytes at offset {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn values<T: Element>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let size = T::DTYPE.size_of();
        let bytes = shape
            .iter()
            .try_fold(size, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Integrity(format!("tensor extents {shape:?} overflow")))?;
        let raw = self.take(bytes)?;
        Tensor::new(shape, raw.chunks_exact(size).map(T::read_le).collect())
            .map_err(|e| Error::Format(format!("bad tensor record: {e}")))
    }

    fn table(&mut self) -> Result<Table> {
        let count = self.u32()? as usize;
        let mut table = Vec::new();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let code = self.take(1)?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Format(format!("tensor {name}: unknown dtype code {code}")))?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(self.values(&shape)?),
                DType::F64 => AnyTensor::F64(self.values(&shape)?),
            };
            table.push((name, t));
        }
        Ok(table)
    }
}
