//! Minimal little-endian binary codec shared by the checkpoint formats.
//!
//! Floats are written bit-exactly (`f64::to_le_bytes`), so a round-tripped
//! checkpoint reproduces every parameter byte for byte.

use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn bytes(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bool(&mut self, v: bool) {
        self.buf.push(u8::from(v));
    }

    pub fn f64_slice(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }

    /// Length-prefixed f64 vector (use when the reader cannot know the size).
    pub fn f64_vec(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        self.f64_slice(vs);
    }

    pub fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        self.f64_slice(m.data());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

impl Default for Writer {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::InvalidInput(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn expect_bytes(&mut self, expected: &[u8], what: &str) -> Result<()> {
        let got = self.take(expected.len())?;
        if got != expected {
            return Err(Error::InvalidInput(format!(
                "bad {what}: expected {expected:?}, got {got:?}"
            )));
        }
        Ok(())
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn bool(&mut self) -> Result<bool> {
        Ok(self.take(1)?[0] != 0)
    }

    pub fn f64_vec_known(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    /// Alias kept close to the writer's `f64_slice` naming.
    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        self.f64_vec_known(n)
    }

    pub fn f64_vec_prefixed(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        self.f64_vec_known(n)
    }

    pub fn matrix(&mut self, expect_rows: usize, expect_cols: usize) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        if rows != expect_rows || cols != expect_cols {
            return Err(Error::InvalidShape(format!(
                "checkpoint matrix is {rows}x{cols}, expected {expect_rows}x{expect_cols}"
            )));
        }
        let data = self.f64_vec_known(rows * cols)?;
        Matrix::from_vec(rows, cols, data)
    }

    pub fn matrix_any(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let data = self.f64_vec_known(rows * cols)?;
        Matrix::from_vec(rows, cols, data)
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::InvalidInput(format!(
                "trailing bytes in checkpoint: {} unread",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
