//! Canonical binary encoding.
//!
//! Every value has exactly one encoding: integers are fixed-width big-endian,
//! floats are their IEEE-754 bit pattern (big-endian, finite only, `-0.0`
//! normalized to `0.0`), and variable-length data carries a `u32` length
//! prefix. Decoding is strict: trailing bytes, unknown tags, and
//! non-canonical booleans or floats are errors, so `decode(encode(x)) == x`
//! and `encode(decode(b)) == b` for every accepted `b`.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("cannot encode {field}: {reason}")]
    Unencodable { field: &'static str, reason: String },
    #[error("unexpected end of input at byte {0}")]
    Truncated(usize),
    #[error("invalid {what} at byte {at}")]
    Invalid { what: &'static str, at: usize },
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

/// A type with one canonical byte representation.
pub trait Canonical: Sized {
    fn encode_into(&self, enc: &mut Encoder) -> Result<(), CodecError>;
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError>;

    fn to_canonical_bytes(&self) -> Result<Vec<u8>, CodecError> {
        let mut enc = Encoder::default();
        self.encode_into(&mut enc)?;
        Ok(enc.finish())
    }

    fn from_canonical_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let value = Self::decode_from(&mut dec)?;
        dec.finish()?;
        Ok(value)
    }
}

#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn bool(&mut self, v: bool) {
        self.buf.push(v as u8);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn f64(&mut self, field: &'static str, v: f64) -> Result<(), CodecError> {
        if !v.is_finite() {
            return Err(CodecError::Unencodable {
                field,
                reason: format!("non-finite value {v}"),
            });
        }
        let v = if v == 0.0 { 0.0 } else { v };
        self.buf.extend_from_slice(&v.to_bits().to_be_bytes());
        Ok(())
    }

    pub fn fixed(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn len(&mut self, field: &'static str, n: usize) -> Result<(), CodecError> {
        let n = u32::try_from(n).map_err(|_| CodecError::Unencodable {
            field,
            reason: format!("length {n} exceeds u32"),
        })?;
        self.u32(n);
        Ok(())
    }

    pub fn bytes(&mut self, field: &'static str, bytes: &[u8]) -> Result<(), CodecError> {
        self.len(field, bytes.len())?;
        self.fixed(bytes);
        Ok(())
    }

    pub fn str(&mut self, field: &'static str, s: &str) -> Result<(), CodecError> {
        self.bytes(field, s.as_bytes())
    }

    pub fn seq<T>(
        &mut self,
        field: &'static str,
        items: &[T],
        mut each: impl FnMut(&mut Self, &T) -> Result<(), CodecError>,
    ) -> Result<(), CodecError> {
        self.len(field, items.len())?;
        for item in items {
            each(self, item)?;
        }
        Ok(())
    }

    pub fn option<T>(
        &mut self,
        value: Option<&T>,
        each: impl FnOnce(&mut Self, &T) -> Result<(), CodecError>,
    ) -> Result<(), CodecError> {
        match value {
            None => {
                self.u8(0);
                Ok(())
            }
            Some(v) => {
                self.u8(1);
                each(self, v)
            }
        }
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn finish(&self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::Trailing(n)),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::Truncated(self.bytes.len()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool, CodecError> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(CodecError::Invalid { what: "bool", at }),
        }
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn i64(&mut self) -> Result<i64, CodecError> {
        Ok(i64::from_be_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        let at = self.pos;
        let bits = u64::from_be_bytes(self.array()?);
        let v = f64::from_bits(bits);
        // -0.0 and non-finite values never come out of the encoder
        if !v.is_finite() || bits == (-0.0f64).to_bits() {
            return Err(CodecError::Invalid { what: "float", at });
        }
        Ok(v)
    }

    pub fn len(&mut self) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        if n > self.remaining() {
            return Err(CodecError::Truncated(self.bytes.len()));
        }
        Ok(n)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let n = self.len()?;
        Ok(self.take(n)?.to_vec())
    }

    pub fn str(&mut self) -> Result<String, CodecError> {
        let at = self.pos;
        String::from_utf8(self.bytes()?).map_err(|_| CodecError::Invalid { what: "utf-8 string", at })
    }

    pub fn seq<T>(&mut self, mut each: impl FnMut(&mut Self) -> Result<T, CodecError>) -> Result<Vec<T>, CodecError> {
        let n = self.u32()? as usize;
        // each element takes at least one byte, which bounds the allocation
        if n > self.remaining() {
            return Err(CodecError::Truncated(self.bytes.len()));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(each(self)?);
        }
        Ok(out)
    }

    pub fn option<T>(&mut self, each: impl FnOnce(&mut Self) -> Result<T, CodecError>) -> Result<Option<T>, CodecError> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(each(self)?)),
            _ => Err(CodecError::Invalid { what: "option tag", at }),
        }
    }
}
