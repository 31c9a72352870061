//! Single-file tensor container.
//!
//! A file is a concatenation of records, each laid out as:
//!
//! ```text
//! magic   4 bytes  "LMT1"
//! dtype   1 byte   0 = f32, 1 = f64
//! rank    1 byte   1..=4
//! dims    rank * u32 little-endian
//! payload numel * scalar, row-major, little-endian
//! name    u32 little-endian length, then UTF-8 bytes
//! ```
//!
//! The name trails the payload. Names are unique within a file; the empty
//! name is allowed. Every multi-byte value is little-endian. Read errors
//! report the byte offset at which the file stopped making sense.

use std::path::{Path, PathBuf};

use masklab_core::Tensor;

use crate::error::{CliError, Result};

const MAGIC: &[u8; 4] = b"LMT1";
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone)]
pub enum LmtTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl LmtTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            LmtTensor::F32(t) => t.shape(),
            LmtTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            LmtTensor::F32(_) => "f32",
            LmtTensor::F64(_) => "f64",
        }
    }

    pub fn as_f32(&self) -> Option<&Tensor<f32>> {
        match self {
            LmtTensor::F32(t) => Some(t),
            LmtTensor::F64(_) => None,
        }
    }

    pub fn as_f64(&self) -> Option<&Tensor<f64>> {
        match self {
            LmtTensor::F64(t) => Some(t),
            LmtTensor::F32(_) => None,
        }
    }
}

impl From<Tensor<f32>> for LmtTensor {
    fn from(t: Tensor<f32>) -> Self {
        LmtTensor::F32(t)
    }
}

impl From<Tensor<f64>> for LmtTensor {
    fn from(t: Tensor<f64>) -> Self {
        LmtTensor::F64(t)
    }
}

/// The two scalar types a record can hold. Extraction never casts: a record
/// read back in the wrong dtype is a caller error, not a conversion.
pub trait LmtScalar: masklab_core::Real {
    const DTYPE_NAME: &'static str;
    fn extract(t: &LmtTensor) -> Option<&Tensor<Self>>;
    fn wrap(t: Tensor<Self>) -> LmtTensor;
}

impl LmtScalar for f32 {
    const DTYPE_NAME: &'static str = "f32";
    fn extract(t: &LmtTensor) -> Option<&Tensor<f32>> {
        t.as_f32()
    }
    fn wrap(t: Tensor<f32>) -> LmtTensor {
        LmtTensor::F32(t)
    }
}

impl LmtScalar for f64 {
    const DTYPE_NAME: &'static str = "f64";
    fn extract(t: &LmtTensor) -> Option<&Tensor<f64>> {
        t.as_f64()
    }
    fn wrap(t: Tensor<f64>) -> LmtTensor {
        LmtTensor::F64(t)
    }
}

/// Typed lookup: the record must exist and hold exactly `T`.
pub fn typed_lookup<'a, T: LmtScalar>(
    records: &'a [NamedTensor],
    name: &str,
    path: &Path,
) -> Result<&'a Tensor<T>> {
    let tensor = lookup(records, name, path)?;
    T::extract(tensor).ok_or_else(|| {
        CliError::input(format!(
            "{}: record {name:?} is {}, expected {}",
            path.display(),
            tensor.dtype_name(),
            T::DTYPE_NAME
        ))
    })
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: LmtTensor,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: impl Into<LmtTensor>) -> Self {
        NamedTensor {
            name: name.into(),
            tensor: tensor.into(),
        }
    }
}

/// Finds a record by name, with a listing of what the file actually holds on miss.
pub fn lookup<'a>(records: &'a [NamedTensor], name: &str, path: &Path) -> Result<&'a LmtTensor> {
    records
        .iter()
        .find(|r| r.name == name)
        .map(|r| &r.tensor)
        .ok_or_else(|| {
            let have: Vec<&str> = records.iter().map(|r| r.name.as_str()).collect();
            CliError::input(format!(
                "{}: no record named {name:?} (file has: {have:?})",
                path.display()
            ))
        })
}

pub fn write_lmt(path: impl AsRef<Path>, records: &[NamedTensor]) -> Result<()> {
    let path = path.as_ref();
    let mut seen: Vec<&str> = Vec::with_capacity(records.len());
    for rec in records {
        if seen.contains(&rec.name.as_str()) {
            return Err(CliError::input(format!(
                "{}: duplicate record name {:?}",
                path.display(),
                rec.name
            )));
        }
        seen.push(&rec.name);
    }
    let mut out = Vec::new();
    for rec in records {
        encode_record(&mut out, rec);
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn encode_record(out: &mut Vec<u8>, rec: &NamedTensor) {
    out.extend_from_slice(MAGIC);
    match &rec.tensor {
        LmtTensor::F32(t) => {
            out.push(DTYPE_F32);
            encode_dims(out, t.shape());
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        LmtTensor::F64(t) => {
            out.push(DTYPE_F64);
            encode_dims(out, t.shape());
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
    out.extend_from_slice(rec.name.as_bytes());
}

fn encode_dims(out: &mut Vec<u8>, shape: &[usize]) {
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub fn read_lmt(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    let path = path.as_ref();
    let buf = std::fs::read(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let mut reader = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    let mut records = Vec::new();
    while reader.pos < reader.buf.len() {
        let record_start = reader.pos as u64;
        let rec = reader.record()?;
        if records.iter().any(|r: &NamedTensor| r.name == rec.name) {
            return Err(CliError::format(
                path,
                record_start,
                format!("duplicate record name {:?}", rec.name),
            ));
        }
        records.push(rec);
    }
    Ok(records)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CliError::format(
                self.path,
                self.pos as u64,
                format!(
                    "unexpected end of file: needed {n} bytes for {what}, had {}",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn record(&mut self) -> Result<NamedTensor> {
        let magic_at = self.pos as u64;
        let magic = self.take(4, "record magic")?;
        if magic != MAGIC {
            return Err(CliError::format(
                self.path,
                magic_at,
                format!("bad magic {magic:?}, expected {MAGIC:?}"),
            ));
        }
        let dtype_at = self.pos as u64;
        let dtype = self.take(1, "dtype byte")?[0];
        if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
            return Err(CliError::format(
                self.path,
                dtype_at,
                format!("unknown dtype code {dtype}"),
            ));
        }
        let rank_at = self.pos as u64;
        let rank = self.take(1, "rank byte")?[0] as usize;
        if !(1..=4).contains(&rank) {
            return Err(CliError::format(
                self.path,
                rank_at,
                format!("rank must be 1..=4, got {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for axis in 0..rank {
            let dim_at = self.pos as u64;
            let d = self.u32_le("dimension")? as usize;
            if d == 0 {
                return Err(CliError::format(
                    self.path,
                    dim_at,
                    format!("dimension {axis} is zero"),
                ));
            }
            shape.push(d);
        }
        let numel: usize = shape.iter().product();
        let tensor = match dtype {
            DTYPE_F32 => {
                let bytes = self.take(numel * 4, "f32 payload")?;
                let data: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                LmtTensor::F32(tensor_from(shape, data, self.path, magic_at)?)
            }
            _ => {
                let bytes = self.take(numel * 8, "f64 payload")?;
                let data: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| {
                        f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                    })
                    .collect();
                LmtTensor::F64(tensor_from(shape, data, self.path, magic_at)?)
            }
        };
        let name_len = self.u32_le("name length")? as usize;
        let name_at = self.pos as u64;
        let name_bytes = self.take(name_len, "record name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| CliError::format(self.path, name_at, "record name is not UTF-8"))?
            .to_owned();
        Ok(NamedTensor { name, tensor })
    }
}

fn tensor_from<T: masklab_core::Real>(
    shape: Vec<usize>,
    data: Vec<T>,
    path: &Path,
    record_at: u64,
) -> Result<Tensor<T>> {
    Tensor::new(shape, data).map_err(|e| CliError::Format {
        path: PathBuf::from(path),
        offset: record_at,
        message: e.to_string(),
    })
}
