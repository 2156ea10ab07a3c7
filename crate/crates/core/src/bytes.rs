//! Little-endian primitives shared by the program, image and wire formats.

use thiserror::Error;

use crate::isa::{ObjRef, Value};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ReadError {
    #[error("truncated input at offset {offset} (needed {needed} more bytes)")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid UTF-8 string at offset {0}")]
    InvalidUtf8(usize),
    #[error("invalid {what} tag {tag:#04x} at offset {offset}")]
    BadTag { what: &'static str, tag: u8, offset: usize },
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn raw(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
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

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("collection exceeds u32::MAX entries"));
    }

    /// u16-length-prefixed UTF-8 (identifiers, names).
    pub fn str16(&mut self, s: &str) {
        let n = u16::try_from(s.len()).expect("identifier longer than 65535 bytes");
        self.u16(n);
        self.raw(s.as_bytes());
    }

    /// u32-length-prefixed UTF-8 (runtime string values).
    pub fn str32(&mut self, s: &str) {
        self.len_u32(s.len());
        self.raw(s.as_bytes());
    }

    pub fn blob(&mut self, b: &[u8]) {
        self.len_u32(b.len());
        self.raw(b);
    }

    pub fn value(&mut self, v: &Value) {
        match v {
            Value::Int(i) => {
                self.u8(0);
                self.i64(*i);
            }
            Value::Bool(b) => {
                self.u8(1);
                self.u8(*b as u8);
            }
            Value::Str(s) => {
                self.u8(2);
                self.str32(s);
            }
            Value::Ref(r) => {
                self.u8(3);
                self.u32(r.0);
            }
            Value::Null => self.u8(4),
        }
    }

    pub fn opt_u16(&mut self, v: Option<u16>) {
        match v {
            Some(v) => {
                self.u8(1);
                self.u16(v);
            }
            None => self.u8(0),
        }
    }

    pub fn opt_u32(&mut self, v: Option<u32>) {
        match v {
            Some(v) => {
                self.u8(1);
                self.u32(v);
            }
            None => self.u8(0),
        }
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn consumed(&self) -> &'a [u8] {
        &self.data[..self.pos]
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], ReadError> {
        if self.remaining() < n {
            return Err(ReadError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ReadError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8, ReadError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, ReadError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, ReadError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, ReadError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn i64(&mut self) -> Result<i64, ReadError> {
        Ok(i64::from_le_bytes(self.array()?))
    }

    pub fn hash32(&mut self) -> Result<[u8; 32], ReadError> {
        self.array()
    }

    /// Reads a u32 element count, rejecting counts that cannot fit in the remaining input
    /// given a minimum encoded element size.
    pub fn count(&mut self, min_elem_size: usize) -> Result<usize, ReadError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let need = n.saturating_mul(min_elem_size.max(1));
        if need > self.remaining() {
            return Err(ReadError::Truncated {
                offset: at,
                needed: need - self.remaining(),
            });
        }
        Ok(n)
    }

    fn utf8(&mut self, n: usize) -> Result<String, ReadError> {
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| ReadError::InvalidUtf8(at))
    }

    pub fn str16(&mut self) -> Result<String, ReadError> {
        let n = self.u16()? as usize;
        self.utf8(n)
    }

    pub fn str32(&mut self) -> Result<String, ReadError> {
        let n = self.u32()? as usize;
        self.utf8(n)
    }

    pub fn blob(&mut self) -> Result<Vec<u8>, ReadError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn value(&mut self) -> Result<Value, ReadError> {
        let at = self.pos;
        Ok(match self.u8()? {
            0 => Value::Int(self.i64()?),
            1 => match self.u8()? {
                0 => Value::Bool(false),
                1 => Value::Bool(true),
                tag => {
                    return Err(ReadError::BadTag {
                        what: "bool",
                        tag,
                        offset: at + 1,
                    })
                }
            },
            2 => Value::Str(self.str32()?),
            3 => Value::Ref(ObjRef(self.u32()?)),
            4 => Value::Null,
            tag => {
                return Err(ReadError::BadTag {
                    what: "value",
                    tag,
                    offset: at,
                })
            }
        })
    }

    fn flag(&mut self) -> Result<bool, ReadError> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(ReadError::BadTag {
                what: "option",
                tag,
                offset: at,
            }),
        }
    }

    pub fn opt_u16(&mut self) -> Result<Option<u16>, ReadError> {
        Ok(if self.flag()? { Some(self.u16()?) } else { None })
    }

    pub fn opt_u32(&mut self) -> Result<Option<u32>, ReadError> {
        Ok(if self.flag()? { Some(self.u32()?) } else { None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huge_count_is_rejected_without_allocating() {
        let mut r = Reader::new(&[0xff, 0xff, 0xff, 0xff, 1, 2]);
        assert!(matches!(r.count(4), Err(ReadError::Truncated { .. })));
    }

    #[test]
    fn values_round_trip() {
        let vals = [
            Value::Int(-7),
            Value::Bool(true),
            Value::Str("héllo".into()),
            Value::Ref(ObjRef(9)),
            Value::Null,
        ];
        let mut w = Writer::new();
        for v in &vals {
            w.value(v);
        }
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        for v in &vals {
            assert_eq!(&r.value().unwrap(), v);
        }
        assert!(r.is_empty());
    }
}
