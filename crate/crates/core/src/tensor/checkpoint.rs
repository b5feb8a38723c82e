//! Named-parameter container file.
//!
//! Layout (little-endian):
//! `b"CDFCKPT\0"`, `u32` format version, `u32` metadata length + UTF-8
//! metadata, `u32` entry count, then per entry: `u32` name length + name,
//! `u8` dtype code, `u32` rank, `u64` dims, raw values.

use std::io::{Read, Write};

use super::array::Tensor;
use super::param::ParamStore;
use super::real::{DType, Real};
use super::TensorError;

pub const MAGIC: &[u8; 8] = b"CDFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Real, W: Write>(mut w: W, store: &ParamStore<T>, metadata: &str) -> Result<(), TensorError> {
    let mut buf = Vec::with_capacity(store.num_values() * DType::size(T::DTYPE) + 1024);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    buf.extend_from_slice(metadata.as_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(T::DTYPE.code());
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut buf);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint, converting values to `T`. Returns the store and the
/// metadata string.
pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> Result<(ParamStore<T>, String), TensorError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic (not a checkpoint file)".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported format version {version}")));
    }
    let mlen = c.u32()? as usize;
    let metadata = String::from_utf8(c.take(mlen)?.to_vec())
        .map_err(|_| TensorError::Checkpoint("metadata is not UTF-8".into()))?;
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec())
            .map_err(|_| TensorError::Checkpoint("parameter name is not UTF-8".into()))?;
        let dtype = DType::from_code(c.take(1)?[0])
            .ok_or_else(|| TensorError::Checkpoint(format!("unknown dtype for {name}")))?;
        let rank = c.u32()? as usize;
        if rank > 4 {
            return Err(TensorError::Checkpoint(format!("rank {rank} of {name} exceeds 4")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * dtype.size())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| T::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| T::from_f64(f64::from_le_bytes(b.try_into().unwrap()))).collect(),
        };
        store.add(name, Tensor::new(&shape, data)?)?;
    }
    if c.pos != buf.len() {
        return Err(TensorError::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok((store, metadata))
}
