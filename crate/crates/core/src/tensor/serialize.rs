//! Flat binary tensor container.
//!
//! ```text
//! magic    4 bytes   b"FPNW"
//! version  u32 LE    1
//! count    u32 LE    number of records
//! record   repeated `count` times:
//!   name_len u32 LE, name (UTF-8, name_len bytes),
//!   rank u32 LE (1..=4), extents u32 LE × rank,
//!   values f32 LE × product(extents)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FPNW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "tensor container",
        reason: reason.into(),
    }
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        if r.shape.is_empty() || r.shape.len() > 4 {
            return Err(malformed(format!("record `{}` has rank {}", r.name, r.shape.len())));
        }
        if r.shape.iter().product::<usize>() != r.values.len() {
            return Err(malformed(format!("record `{}` length does not match shape", r.name)));
        }
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &e in &r.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| malformed("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| malformed("record name is not UTF-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(malformed(format!("record `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| c.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| malformed("record too large"))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        records.push(Record { name, shape, values });
    }
    if c.pos != bytes.len() {
        return Err(malformed("trailing bytes after last record"));
    }
    Ok(records)
}

pub fn save(path: &Path, records: &[Record]) -> Result<()> {
    let bytes = encode(records)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_exact() {
        let r = Record {
            name: "a".into(),
            shape: vec![2],
            values: vec![1.0, -2.0],
        };
        let bytes = encode(&[r]).unwrap();
        let mut want = b"FPNW".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(b'a');
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let r = Record {
            name: "w".into(),
            shape: vec![1, 2],
            values: vec![0.5, 0.25],
        };
        let bytes = encode(&[r]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
