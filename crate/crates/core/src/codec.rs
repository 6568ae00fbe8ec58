//! Little-endian binary primitives shared by the graph and checkpoint
//! containers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{DType, Data, HostTensor, PartialShape, Shape};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    /// u32 byte length followed by the section body.
    pub fn section(&mut self, body: &[u8]) {
        self.u32(body.len() as u32);
        self.bytes(body);
    }

    pub fn partial_shape(&mut self, s: &PartialShape) {
        self.u16(s.rank() as u16);
        for d in s.dims() {
            self.i64(d.map_or(-1, |d| d as i64));
        }
    }

    pub fn shape(&mut self, s: &Shape) {
        self.u16(s.rank() as u16);
        for &d in s.dims() {
            self.i64(d as i64);
        }
    }

    /// dtype u8, rank u16, dims i64[], raw row-major payload.
    pub fn tensor(&mut self, t: &HostTensor) {
        self.u8(t.dtype().code());
        self.shape(&t.shape);
        self.bytes(&t.data.to_le_bytes());
    }
}

/// Interned strings; id 0 is always the empty string.
pub(crate) struct StringTable {
    strings: Vec<String>,
    index: HashMap<String, u32>,
}

impl StringTable {
    pub fn new() -> Self {
        let mut t = StringTable { strings: Vec::new(), index: HashMap::new() };
        t.intern("");
        t
    }

    pub fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.index.get(s) {
            return id;
        }
        let id = self.strings.len() as u32;
        self.strings.push(s.to_string());
        self.index.insert(s.to_string(), id);
        id
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u32(self.strings.len() as u32);
        for s in &self.strings {
            w.u32(s.len() as u32);
            w.bytes(s.as_bytes());
        }
        w.buf
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Vec<String>> {
        let n = r.count()?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let bytes = r.take(len)?;
            out.push(String::from_utf8(bytes.to_vec()).map_err(|_| r.err("string is not UTF-8"))?);
        }
        if out.first().map(String::as_str) != Some("") {
            return Err(r.err("string table must start with the empty string"));
        }
        Ok(out)
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    make_err: fn(String) -> Error,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8], make_err: fn(String) -> Error) -> Self {
        Reader { data, pos: 0, make_err }
    }

    pub fn err(&self, m: &str) -> Error {
        (self.make_err)(format!("{m} (offset {})", self.pos))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.err("unexpected end of data"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A u32 count, sanity-checked against the remaining bytes.
    pub fn count(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > self.data.len() - self.pos {
            return Err(self.err("count exceeds remaining data"));
        }
        Ok(n)
    }

    pub fn section(&mut self) -> Result<Reader<'a>> {
        let len = self.u32()? as usize;
        Ok(Reader::new(self.take(len)?, self.make_err))
    }

    pub fn string<'s>(&mut self, table: &'s [String]) -> Result<&'s str> {
        let id = self.u32()? as usize;
        table.get(id).map(String::as_str).ok_or_else(|| self.err("string id out of range"))
    }

    pub fn dtype(&mut self) -> Result<DType> {
        let code = self.u8()?;
        DType::from_code(code).ok_or_else(|| self.err("unknown dtype code"))
    }

    pub fn partial_shape(&mut self) -> Result<PartialShape> {
        let rank = self.u16()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(match self.i64()? {
                -1 => None,
                d if d >= 0 => Some(d as usize),
                _ => return Err(self.err("negative dimension")),
            });
        }
        Ok(PartialShape::new(dims))
    }

    pub fn shape(&mut self) -> Result<Shape> {
        self.partial_shape()?.to_shape().ok_or_else(|| self.err("wildcard dimension in concrete shape"))
    }

    pub fn tensor_body(&mut self, dtype: DType) -> Result<HostTensor> {
        let shape = self.shape()?;
        let n = shape
            .num_elements()
            .checked_mul(dtype.width())
            .filter(|&n| n <= self.data.len() - self.pos)
            .ok_or_else(|| self.err("tensor payload exceeds remaining data"))?;
        let bytes = self.take(n)?;
        let data = Data::from_le_bytes(dtype, bytes).ok_or_else(|| self.err("bad tensor payload"))?;
        HostTensor::new(data, shape).map_err(|_| self.err("tensor length mismatch"))
    }

    pub fn tensor(&mut self) -> Result<HostTensor> {
        let dtype = self.dtype()?;
        self.tensor_body(dtype)
    }
}
