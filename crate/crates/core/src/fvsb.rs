//! FVSB: fixed-stride little-endian feature records behind a 32-byte header.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FVSB"
//! 4       2     version (u16, = 1)
//! 6       1     kind (u8: 0 low-res map, 1 high-res map, 2 LLM-token patch block)
//! 7       2     grid_h (u16)
//! 9       2     grid_w (u16)
//! 11      2     dim (u16)
//! 13      19    reserved, zero
//! 32      ..    records of grid_h*grid_w*dim f32, record i at 32 + i*stride
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{FeatureMap, Shape, Tier};

pub const MAGIC: &[u8; 4] = b"FVSB";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Map(Tier),
    Token,
}

impl PayloadKind {
    fn to_byte(self) -> u8 {
        match self {
            PayloadKind::Map(t) => t.to_byte(),
            PayloadKind::Token => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            2 => Some(PayloadKind::Token),
            _ => Tier::from_byte(b).map(PayloadKind::Map),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: PayloadKind,
    pub shape: Shape,
}

impl Header {
    pub fn new(kind: PayloadKind, shape: Shape) -> Result<Self> {
        for v in [shape.grid_h, shape.grid_w, shape.dim] {
            if v == 0 || v > u16::MAX as usize {
                return Err(Error::ShapeMismatch(format!("shape {shape} does not fit FVSB u16 fields")));
            }
        }
        Ok(Header { kind, shape })
    }

    pub fn stride(&self) -> usize {
        self.shape.len() * 4
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(MAGIC);
        h[4..6].copy_from_slice(&VERSION.to_le_bytes());
        h[6] = self.kind.to_byte();
        h[7..9].copy_from_slice(&(self.shape.grid_h as u16).to_le_bytes());
        h[9..11].copy_from_slice(&(self.shape.grid_w as u16).to_le_bytes());
        h[11..13].copy_from_slice(&(self.shape.dim as u16).to_le_bytes());
        h
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::parse(bytes.len() as u64, None, "truncated FVSB header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::parse(0, None, "bad FVSB magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::parse(4, None, format!("unsupported FVSB version {version}")));
        }
        let kind = PayloadKind::from_byte(bytes[6])
            .ok_or_else(|| Error::parse(6, None, format!("unknown payload kind {}", bytes[6])))?;
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
        let shape = Shape::new(u16_at(7), u16_at(9), u16_at(11));
        if shape.is_empty() {
            return Err(Error::parse(7, None, "zero-sized grid"));
        }
        if bytes[13..HEADER_LEN].iter().any(|&b| b != 0) {
            return Err(Error::parse(13, None, "reserved header bytes are not zero"));
        }
        Ok(Header { kind, shape })
    }

    pub fn record_offset(&self, index: u64) -> u64 {
        HEADER_LEN as u64 + index * self.stride() as u64
    }
}

pub fn encode_record(values: &[f32], out: &mut Vec<u8>) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn decode_record(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Streams records after writing the header.
pub struct Writer<W: Write> {
    inner: W,
    header: Header,
    count: u64,
    buf: Vec<u8>,
}

impl<W: Write> Writer<W> {
    pub fn new(mut inner: W, header: Header) -> Result<Self> {
        inner.write_all(&header.encode())?;
        Ok(Writer {
            inner,
            header,
            count: 0,
            buf: Vec::new(),
        })
    }

    pub fn write_record(&mut self, values: &[f32]) -> Result<()> {
        if values.len() != self.header.shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "record of {} values for shape {}",
                values.len(),
                self.header.shape
            )));
        }
        self.buf.clear();
        encode_record(values, &mut self.buf);
        self.inner.write_all(&self.buf)?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Reads records in order, reporting truncation with the record index and
/// byte offset where it happened.
pub struct Reader<R: Read> {
    inner: R,
    header: Header,
    next: u64,
    done: bool,
}

impl<R: Read> Reader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut h = [0u8; HEADER_LEN];
        let got = read_full(&mut inner, &mut h)?;
        if got < HEADER_LEN {
            return Err(Error::parse(got as u64, None, "truncated FVSB header"));
        }
        let header = Header::decode(&h)?;
        Ok(Reader {
            inner,
            header,
            next: 0,
            done: false,
        })
    }

    pub fn header(&self) -> Header {
        self.header
    }

    /// Next record's values, `None` at a clean end of stream.
    pub fn next_record(&mut self) -> Result<Option<Vec<f32>>> {
        if self.done {
            return Ok(None);
        }
        let mut buf = vec![0u8; self.header.stride()];
        let got = read_full(&mut self.inner, &mut buf)?;
        if got == 0 {
            self.done = true;
            return Ok(None);
        }
        let offset = self.header.record_offset(self.next);
        if got < buf.len() {
            self.done = true;
            return Err(Error::parse(
                offset + got as u64,
                Some(self.next),
                format!("record {} truncated: {got} of {} bytes", self.next, buf.len()),
            ));
        }
        self.next += 1;
        Ok(Some(decode_record(&buf)))
    }

    /// Next record as a feature map carrying its record index as frame index.
    pub fn next_map(&mut self) -> Result<Option<FeatureMap>> {
        let tier = match self.header.kind {
            PayloadKind::Map(t) => t,
            PayloadKind::Token => return Err(Error::parse(6, None, "token payload is not a feature-map stream")),
        };
        let index = self.next;
        let offset = self.header.record_offset(index);
        match self.next_record()? {
            None => Ok(None),
            Some(values) => FeatureMap::new(index, tier, self.header.shape, values)
                .map(Some)
                .map_err(|e| Error::parse(offset, Some(index), e.to_string())),
        }
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Writes feature maps of one tier to `path`.
pub fn write_maps(path: &Path, tier: Tier, shape: Shape, maps: &[FeatureMap]) -> Result<()> {
    let mut w = Writer::new(BufWriter::new(File::create(path)?), Header::new(PayloadKind::Map(tier), shape)?)?;
    for m in maps {
        m.expect_tier(tier)?;
        w.write_record(m.values())?;
    }
    w.finish()?;
    Ok(())
}

pub fn open_maps(path: &Path) -> Result<Reader<BufReader<File>>> {
    Reader::new(BufReader::new(File::open(path)?))
}

pub fn read_maps(path: &Path) -> Result<Vec<FeatureMap>> {
    let mut r = open_maps(path)?;
    let mut out = Vec::new();
    while let Some(m) = r.next_map()? {
        out.push(m);
    }
    Ok(out)
}
