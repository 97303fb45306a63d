//! Canonical byte encoding shared by the wire protocol and the durable log.
//!
//! The encoding is deliberately boring and fully specified so that two nodes
//! (or one node before and after a crash) always produce identical bytes for
//! identical values:
//!
//! * integers: little-endian, fixed width (`u8`, `u16`, `u32`, `u64`, `i64`)
//! * byte strings: `u32` length prefix followed by the raw bytes
//! * enums: a single `u8` discriminant, followed by variant fields
//! * `Option<T>`: `u8` presence flag (0 or 1) followed by the value if present
//! * sequences: `u32` element count followed by the elements in order
//! * structs: fields concatenated in declaration order, no padding
//!
//! Checksums over encoded values use CRC32 (IEEE polynomial, as produced by
//! `crc32fast`) and are stored as a little-endian `u32` alongside the payload.

use thiserror::Error;

/// Decoding failure. Encoding is infallible.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("unexpected end of input at offset {offset}, needed {needed} more bytes")]
    UnexpectedEof { offset: usize, needed: usize },
    #[error("invalid discriminant {value} for {type_name}")]
    BadDiscriminant { type_name: &'static str, value: u8 },
    #[error("length {len} exceeds remaining input {remaining}")]
    BadLength { len: usize, remaining: usize },
    #[error("invalid utf-8 in string field")]
    BadUtf8,
    #[error("trailing garbage: {0} bytes left after decode")]
    TrailingBytes(usize),
}

/// Append-only encoder over a byte buffer.
#[derive(Default)]
pub struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn with_capacity(cap: usize) -> Self {
        Self {
            buf: Vec::with_capacity(cap),
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_bool(&mut self, v: bool) {
        self.put_u8(v as u8);
    }

    /// Byte string with `u32` length prefix.
    pub fn put_bytes(&mut self, v: &[u8]) {
        debug_assert!(v.len() <= u32::MAX as usize);
        self.put_u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }

    pub fn put_str(&mut self, v: &str) {
        self.put_bytes(v.as_bytes());
    }

    /// Element count prefix for a sequence the caller then encodes element by
    /// element.
    pub fn put_count(&mut self, n: usize) {
        debug_assert!(n <= u32::MAX as usize);
        self.put_u32(n as u32);
    }
}

/// Cursor-based decoder over a byte slice.
pub struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    /// Fails if any input is left; call after decoding a complete value.
    pub fn finish(self) -> Result<(), CodecError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(CodecError::TrailingBytes(self.remaining()))
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::UnexpectedEof {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn get_u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn get_u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn get_u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn get_u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn get_i64(&mut self) -> Result<i64, CodecError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn get_bool(&mut self) -> Result<bool, CodecError> {
        Ok(self.get_u8()? != 0)
    }

    pub fn get_bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let len = self.get_u32()? as usize;
        if len > self.remaining() {
            return Err(CodecError::BadLength {
                len,
                remaining: self.remaining(),
            });
        }
        Ok(self.take(len)?.to_vec())
    }

    pub fn get_str(&mut self) -> Result<String, CodecError> {
        String::from_utf8(self.get_bytes()?).map_err(|_| CodecError::BadUtf8)
    }

    pub fn get_count(&mut self) -> Result<usize, CodecError> {
        let n = self.get_u32()? as usize;
        // A sequence element takes at least one byte, so a count larger than
        // the remaining input is corrupt. Rejecting here keeps a flipped
        // length byte from turning into a giant allocation.
        if n > self.remaining() {
            return Err(CodecError::BadLength {
                len: n,
                remaining: self.remaining(),
            });
        }
        Ok(n)
    }
}

/// Types with a canonical byte representation.
pub trait Wire: Sized {
    fn encode(&self, e: &mut Enc);
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError>;

    fn to_bytes(&self) -> Vec<u8> {
        let mut e = Enc::new();
        self.encode(&mut e);
        e.into_bytes()
    }

    /// Decodes a value that must span the whole input.
    fn from_bytes(buf: &[u8]) -> Result<Self, CodecError> {
        let mut d = Dec::new(buf);
        let v = Self::decode(&mut d)?;
        d.finish()?;
        Ok(v)
    }
}

impl<T: Wire> Wire for Vec<T> {
    fn encode(&self, e: &mut Enc) {
        e.put_count(self.len());
        for item in self {
            item.encode(e);
        }
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        let n = d.get_count()?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(T::decode(d)?);
        }
        Ok(out)
    }
}

impl<T: Wire> Wire for Option<T> {
    fn encode(&self, e: &mut Enc) {
        match self {
            None => e.put_u8(0),
            Some(v) => {
                e.put_u8(1);
                v.encode(e);
            }
        }
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        match d.get_u8()? {
            0 => Ok(None),
            1 => Ok(Some(T::decode(d)?)),
            v => Err(CodecError::BadDiscriminant {
                type_name: "Option",
                value: v,
            }),
        }
    }
}

/// CRC32 (IEEE) over a byte slice.
pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_little_endian() {
        let mut e = Enc::new();
        e.put_u16(0x1234);
        e.put_u32(0xDEAD_BEEF);
        e.put_u64(0x0102_0304_0506_0708);
        assert_eq!(
            e.as_bytes(),
            &[0x34, 0x12, 0xEF, 0xBE, 0xAD, 0xDE, 8, 7, 6, 5, 4, 3, 2, 1]
        );
    }

    #[test]
    fn bytes_round_trip_with_length_prefix() {
        let mut e = Enc::new();
        e.put_bytes(b"abc");
        assert_eq!(e.as_bytes(), &[3, 0, 0, 0, b'a', b'b', b'c']);
        let mut d = Dec::new(e.as_bytes());
        assert_eq!(d.get_bytes().unwrap(), b"abc");
        d.finish().unwrap();
    }

    #[test]
    fn truncated_input_reports_eof() {
        let mut d = Dec::new(&[1, 2]);
        assert_eq!(
            d.get_u32(),
            Err(CodecError::UnexpectedEof {
                offset: 0,
                needed: 2
            })
        );
    }

    #[test]
    fn oversized_length_is_rejected() {
        // Length prefix claims 100 bytes, only 2 present.
        let buf = [100, 0, 0, 0, b'x', b'y'];
        let mut d = Dec::new(&buf);
        assert_eq!(
            d.get_bytes(),
            Err(CodecError::BadLength {
                len: 100,
                remaining: 2
            })
        );
    }

    #[test]
    fn trailing_bytes_detected() {
        let buf = [0u8, 1, 2];
        let mut d = Dec::new(&buf);
        d.get_u8().unwrap();
        assert_eq!(d.finish(), Err(CodecError::TrailingBytes(2)));
    }

    #[test]
    fn crc32_known_vector() {
        // IEEE CRC32 of "123456789" is the classic check value.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }
}
