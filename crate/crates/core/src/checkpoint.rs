//! Versioned little-endian binary container shared by adapter, frozen-base and
//! optimizer checkpoints.
//!
//! ```text
//! magic    4 bytes  "GWCK"
//! version  u32      1
//! section  4 bytes  "LORA" | "BASE" | "OPTM"
//! count    u64      number of records
//! records  ...
//! ```
//!
//! A `LORA` record is `name, d_in, d_out, r, alpha, A (d_out×r), B (d_in×r)`;
//! `BASE` and `OPTM` records are `name, rows, cols, data (rows×cols)`.
//! Strings are a u64 byte length followed by UTF-8; integers are u64; all
//! reals are f64; matrices are row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GWCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Lora,
    Base,
    Optimizer,
}

impl Section {
    fn tag(self) -> [u8; 4] {
        match self {
            Section::Lora => *b"LORA",
            Section::Base => *b"BASE",
            Section::Optimizer => *b"OPTM",
        }
    }

    fn from_tag(tag: [u8; 4]) -> Option<Self> {
        match &tag {
            b"LORA" => Some(Section::Lora),
            b"BASE" => Some(Section::Base),
            b"OPTM" => Some(Section::Optimizer),
            _ => None,
        }
    }
}

/// One adapter as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraRecord {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub alpha: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// A named row-major matrix (frozen weights, optimizer moments, scalars as 1×1).
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixRecord {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        MatrixRecord {
            name: name.into(),
            rows,
            cols,
            data,
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(section: Section, count: usize) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(&MAGIC);
        w.buf.extend_from_slice(&VERSION.to_le_bytes());
        w.buf.extend_from_slice(&section.tag());
        w.u64(count);
        w
    }

    fn u64(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn reals(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::format(self.path, "integer overflow"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u64()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "record name is not UTF-8"))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn header(&mut self, expected: Section) -> Result<usize> {
        if self.take(4)? != MAGIC {
            return Err(Error::format(self.path, "not a geowarp checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::format(self.path, format!("unsupported checkpoint version {version}")));
        }
        let tag: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        match Section::from_tag(tag) {
            Some(s) if s == expected => {}
            Some(s) => {
                return Err(Error::format(self.path, format!("expected {expected:?} section, found {s:?}")));
            }
            None => return Err(Error::format(self.path, "unknown section tag")),
        }
        self.u64()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::format(self.path, "trailing bytes after last record"));
        }
        Ok(())
    }
}

pub fn encode_lora(records: &[LoraRecord]) -> Vec<u8> {
    let mut w = Writer::header(Section::Lora, records.len());
    for r in records {
        w.str(&r.name);
        w.u64(r.d_in);
        w.u64(r.d_out);
        w.u64(r.rank);
        w.f64(r.alpha);
        w.reals(&r.a);
        w.reals(&r.b);
    }
    w.buf
}

pub fn decode_lora(bytes: &[u8], path: &Path) -> Result<Vec<LoraRecord>> {
    let mut r = Reader { data: bytes, pos: 0, path };
    let count = r.header(Section::Lora)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name = r.str()?;
        let d_in = r.u64()?;
        let d_out = r.u64()?;
        let rank = r.u64()?;
        let alpha = r.f64()?;
        let a = r.reals(d_out * rank)?;
        let b = r.reals(d_in * rank)?;
        out.push(LoraRecord {
            name,
            d_in,
            d_out,
            rank,
            alpha,
            a,
            b,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn encode_matrices(section: Section, records: &[MatrixRecord]) -> Vec<u8> {
    assert_ne!(section, Section::Lora, "LORA sections use encode_lora");
    let mut w = Writer::header(section, records.len());
    for r in records {
        w.str(&r.name);
        w.u64(r.rows);
        w.u64(r.cols);
        w.reals(&r.data);
    }
    w.buf
}

pub fn decode_matrices(section: Section, bytes: &[u8], path: &Path) -> Result<Vec<MatrixRecord>> {
    let mut r = Reader { data: bytes, pos: 0, path };
    let count = r.header(section)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name = r.str()?;
        let rows = r.u64()?;
        let cols = r.u64()?;
        let data = r.reals(rows * cols)?;
        out.push(MatrixRecord { name, rows, cols, data });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_stable() {
        let bytes = encode_lora(&[LoraRecord {
            name: "l0".into(),
            d_in: 1,
            d_out: 1,
            rank: 1,
            alpha: 2.0,
            a: vec![0.5],
            b: vec![-1.0],
        }]);
        assert_eq!(&bytes[0..4], b"GWCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], b"LORA");
        assert_eq!(&bytes[12..20], &1u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &2u64.to_le_bytes());
        assert_eq!(&bytes[28..30], b"l0");
        // name + 3 ints + alpha + A + B
        assert_eq!(bytes.len(), 20 + 8 + 2 + 24 + 8 + 8 + 8);
    }

    #[test]
    fn wrong_section_and_truncation_are_rejected() {
        let p = Path::new("x.ckpt");
        let bytes = encode_matrices(Section::Base, &[MatrixRecord::new("w", 1, 2, vec![1.0, 2.0])]);
        assert!(decode_lora(&bytes, p).is_err());
        assert!(decode_matrices(Section::Optimizer, &bytes, p).is_err());
        assert!(decode_matrices(Section::Base, &bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_matrices(Section::Base, &extra, p).is_err());
        assert!(decode_matrices(Section::Base, b"nope", p).is_err());
    }

    proptest! {
        #[test]
        fn lora_roundtrip(name in "[a-z_.0-9]{0,12}", d_in in 1usize..5, d_out in 1usize..5, rank in 1usize..3,
                          alpha in -100.0f64..100.0, seed in any::<u64>()) {
            let n = d_in.max(d_out) * rank * 2;
            let vals: Vec<f64> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) as f64).sin()).collect();
            let rec = LoraRecord { name, d_in, d_out, rank, alpha,
                a: vals[..d_out * rank].to_vec(), b: vals[..d_in * rank].to_vec() };
            let back = decode_lora(&encode_lora(std::slice::from_ref(&rec)), Path::new("p")).unwrap();
            prop_assert_eq!(back, vec![rec]);
        }
    }
}
