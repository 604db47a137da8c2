//! Little-endian binary container shared by dataset (`ADVL`), model
//! checkpoint (`ADVC`) and adapter (`ADVA`) files.
//!
//! Layout: 4 magic bytes, `u16` version, then a payload of fixed-width
//! little-endian fields. Read errors report the byte offset where decoding
//! failed.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8; 4]) -> Self {
        let mut e = Self { buf: Vec::new() };
        e.buf.extend_from_slice(magic);
        e.u16(FORMAT_VERSION);
        e
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }

    /// Rank, dims, then the values.
    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.f64s(t.data());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.buf)?;
        f.sync_all()?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    /// Checks magic and version, leaving the cursor at the payload.
    pub fn new(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut d = Self { buf, pos: 0 };
        let found = d.take(4)?;
        if found != magic {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let version = d.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        Ok(d)
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.remaining() < n.saturating_mul(8) {
            return Err(Error::format(
                self.offset(),
                format!("truncated: need {n} f64 values, {} bytes left", self.remaining()),
            ));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    /// A `usize` stored as `u64`, bounded to reject absurd lengths early.
    pub fn len_u64(&mut self, max: u64) -> Result<usize> {
        let at = self.offset();
        let v = self.u64()?;
        if v > max {
            return Err(Error::format(at, format!("length {v} exceeds limit {max}")));
        }
        Ok(v as usize)
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let at = self.offset();
        let ndim = self.u32()?;
        if ndim > 8 {
            return Err(Error::format(at, format!("tensor rank {ndim} too large")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(self.len_u64(1 << 32)?);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::format(at, "tensor size overflows"))?;
        let data = self.f64s(n)?;
        Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_fields() {
        let t = Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap();
        let mut e = Encoder::new(b"TEST");
        e.u8(3);
        e.u32(77);
        e.tensor(&t);
        let bytes = e.finish();

        let mut d = Decoder::new(&bytes, b"TEST").unwrap();
        assert_eq!(d.u8().unwrap(), 3);
        assert_eq!(d.u32().unwrap(), 77);
        assert!(d.tensor().unwrap().bitwise_eq(&t));
        d.expect_end().unwrap();
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let bytes = Encoder::new(b"AAAA").finish();
        assert!(matches!(
            Decoder::new(&bytes, b"BBBB"),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut d = Decoder::new(&bytes, b"AAAA").unwrap();
        match d.u32() {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("unexpected {other:?}"),
        }
    }
}
