//! Checkpoint file: `"DW0C"`, version `u32`, tensor count `u32`, then per
//! tensor a `u16` name length, UTF-8 name, dtype code `u8` (0 = f32,
//! 1 = f64), rank `u8`, `u32` dims and raw values. All little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Result, Scalar, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DW0C";
const VERSION: u32 = 1;

/// Precision-independent view of one stored tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn encode_checkpoint<T: Scalar>(entries: &[CheckpointEntry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(bad(format!("name too long: {}", e.name)));
        }
        if e.shape.len() > u8::MAX as usize || e.shape.iter().product::<usize>() != e.values.len() {
            return Err(bad(format!("bad shape {:?} for {}", e.shape, e.name)));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE_CODE);
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.values {
            T::lit(v).write_le(&mut out);
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| bad("name is not UTF-8"))?
            .to_string();
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let values = match dtype {
            0 => c.take(n * 4)?.chunks(4).map(|b| f32::read_le(b) as f64).collect(),
            1 => c.take(n * 8)?.chunks(8).map(f64::read_le).collect(),
            d => return Err(bad(format!("unknown dtype code {d} for {name}"))),
        };
        entries.push(CheckpointEntry { name, shape, values });
    }
    if c.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(entries)
}

pub fn write_checkpoint<T: Scalar>(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let bytes = encode_checkpoint::<T>(entries)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_exact() {
        let e = CheckpointEntry {
            name: "ab".into(),
            shape: vec![1, 2],
            values: vec![1.0, -2.0],
        };
        let b = encode_checkpoint::<f32>(std::slice::from_ref(&e)).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"DW0C");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u16.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.push(0);
        expect.push(2);
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, expect);
        assert_eq!(decode_checkpoint(&b).unwrap(), vec![e]);
    }

    #[test]
    fn rejects_truncation_and_magic() {
        let e = CheckpointEntry {
            name: "x".into(),
            shape: vec![3],
            values: vec![0.0; 3],
        };
        let b = encode_checkpoint::<f64>(&[e]).unwrap();
        assert!(decode_checkpoint(&b[..b.len() - 1]).is_err());
        let mut m = b.clone();
        m[0] = b'X';
        assert!(decode_checkpoint(&m).is_err());
    }
}
