//! Little-endian binary container with a magic prefix and trailing CRC32.
//!
//! Layout: 4 magic bytes, `u32` format version, payload, `u32` CRC32 of
//! everything before it. Strings and tensors are length-prefixed.

use crate::error::{DcaError, Result};
use crate::tensor::Tensor;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &x in t.data() {
            self.f64(x);
        }
    }

    /// A named tensor block: name, then shape and raw values.
    pub fn named(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.tensor(t);
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic, CRC and version, returning a reader positioned at
    /// the payload.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != magic {
            return Err(DcaError::Integrity(format!(
                "bad magic bytes, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(DcaError::Integrity(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let v = r.u32()?;
        if v != version {
            return Err(DcaError::Integrity(format!("unsupported format version {v}, expected {version}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DcaError::Integrity(format!("truncated payload at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| DcaError::Integrity("invalid utf-8 string".into()))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(DcaError::Integrity("tensor larger than payload".into()));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Tensor::new(shape, data)
    }

    /// Reads a named block and checks its name.
    pub fn named(&mut self, expected: &str) -> Result<Tensor> {
        let name = self.str()?;
        if name != expected {
            return Err(DcaError::Integrity(format!("expected block `{expected}`, found `{name}`")));
        }
        self.tensor()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(DcaError::Integrity(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut w = Writer::new(b"TEST", 3);
        w.str("hello");
        w.named("w", &Tensor::vector(vec![1.5, -2.0]));
        w.u128(u128::MAX - 5);
        let bytes = w.finish();

        let mut r = Reader::open(&bytes, b"TEST", 3).unwrap();
        assert_eq!(r.str().unwrap(), "hello");
        assert_eq!(r.named("w").unwrap().data(), &[1.5, -2.0]);
        assert_eq!(r.u128().unwrap(), u128::MAX - 5);
        r.finish().unwrap();

        let mut flipped = bytes.clone();
        flipped[10] ^= 1;
        assert!(matches!(Reader::open(&flipped, b"TEST", 3), Err(DcaError::Integrity(m)) if m.contains("checksum")));
        assert!(Reader::open(&bytes, b"NOPE", 3).is_err());
        assert!(Reader::open(&bytes, b"TEST", 4).is_err());
    }
}
