//! Byte-level helpers shared by the binary artifact formats (model, tensor
//! container, detector). All multi-byte values are little-endian.

use crate::error::{Error, Result};

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> ByteReader<'a> {
        ByteReader { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format_at("unexpected end of data", self.offset()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16_le(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn f64_le(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f64_vec(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(count * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Consume and check a 4-byte magic tag.
    pub fn expect_magic(&mut self, magic: &[u8; 4], what: &str) -> Result<()> {
        let offset = self.offset();
        if self.bytes(4)? != magic {
            return Err(Error::format_at(
                format!("bad magic header, not a {what} file"),
                offset,
            ));
        }
        Ok(())
    }

    /// Consume and check a format version tag.
    pub fn expect_version(&mut self, supported: u16) -> Result<()> {
        let offset = self.offset();
        let got = self.u16_le()?;
        if got != supported {
            return Err(Error::format_at(
                format!("unsupported format version {got}, expected {supported}"),
                offset,
            ));
        }
        Ok(())
    }

    /// Error unless the whole buffer has been consumed.
    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format_at("trailing bytes after payload", self.offset()));
        }
        Ok(())
    }
}

pub(crate) fn put_f64_slice(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_back_what_was_written() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"TEST");
        buf.extend_from_slice(&7u16.to_le_bytes());
        buf.extend_from_slice(&0xDEAD_BEEFu32.to_le_bytes());
        put_f64_slice(&mut buf, &[1.5, -2.25]);
        let mut r = ByteReader::new(&buf);
        r.expect_magic(b"TEST", "test").unwrap();
        assert_eq!(r.u16_le().unwrap(), 7);
        assert_eq!(r.u32_le().unwrap(), 0xDEAD_BEEF);
        assert_eq!(r.f64_vec(2).unwrap(), vec![1.5, -2.25]);
        r.expect_end().unwrap();
    }

    #[test]
    fn truncation_reports_offset() {
        let buf = [1u8, 2, 3];
        let mut r = ByteReader::new(&buf);
        r.u16_le().unwrap();
        let err = r.u32_le().unwrap_err();
        assert!(matches!(err, Error::Format { offset: Some(2), .. }));
    }
}
