//! Section-tagged binary container shared by checkpoints and calibration
//! tables.
//!
//! ```text
//! magic    9 bytes  "EVISURRO1"
//! version  u32 LE
//! kind     u32 LE length + UTF-8 bytes ("checkpoint", "calibration-table")
//! count    u32 LE number of sections
//! section  4-byte ASCII tag, u64 LE payload length, payload
//! crc32    u32 LE checksum of every preceding byte
//! ```
//!
//! Payload scalars are little-endian; reals are always f64. Arrays carry an
//! explicit u64 length prefix.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 9] = b"EVISURRO1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub kind: String,
    pub sections: Vec<Section>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub payload: Vec<u8>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, tag: &[u8; 4], payload: PayloadWriter) {
        self.sections.push(Section {
            tag: *tag,
            payload: payload.into_bytes(),
        });
    }

    /// First section with `tag`.
    pub fn section(&self, tag: &[u8; 4]) -> Option<&Section> {
        self.sections.iter().find(|s| &s.tag == tag)
    }

    pub fn sections_tagged<'a>(&'a self, tag: &'a [u8; 4]) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| &s.tag == tag)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&s.tag);
            out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&s.payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a container, reporting truncation and version mismatches
    /// against `path` for diagnostics.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::corrupt(path, "bad magic (not an EVISURRO container)"));
        }
        let Some(body_len) = bytes.len().checked_sub(4).filter(|&n| n >= MAGIC.len()) else {
            return Err(Error::corrupt(path, "truncated container"));
        };
        let (body, trailer) = bytes.split_at(body_len);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let mut r = PayloadReader::new(body, path);
        r.take(MAGIC.len())?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let kind_len = r.u32()? as usize;
        let kind = String::from_utf8(r.take(kind_len)?.to_vec())
            .map_err(|_| Error::corrupt(path, "container kind is not UTF-8"))?;
        if crc32fast::hash(body) != stored {
            return Err(Error::corrupt(path, "checksum mismatch (file is truncated or damaged)"));
        }
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let tag_bytes = r.take(4)?;
            let tag = [tag_bytes[0], tag_bytes[1], tag_bytes[2], tag_bytes[3]];
            let len = r.u64()? as usize;
            let payload = r.take(len)?.to_vec();
            sections.push(Section { tag, payload });
        }
        if !r.is_exhausted() {
            return Err(Error::corrupt(path, "trailing bytes after the last section"));
        }
        Ok(Self { kind, sections })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::corrupt(
                path,
                format!("container holds a {}, expected a {kind}", self.kind),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(mut self, v: f64) -> Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn usizes(mut self, v: &[usize]) -> Self {
        self = self.u64(v.len() as u64);
        for &x in v {
            self = self.u64(x as u64);
        }
        self
    }

    pub fn f64s(mut self, v: &[f64]) -> Self {
        self = self.u64(v.len() as u64);
        self.buf.reserve(v.len() * 8);
        for &x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn str(mut self, s: &str) -> Self {
        self = self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> PayloadReader<'a> {
    pub fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub fn section(section: &'a Section, path: &'a Path) -> Self {
        Self::new(&section.payload, path)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::corrupt(
                self.path,
                format!(
                    "truncated: needed {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn finish(self) -> Result<()> {
        if self.is_exhausted() {
            Ok(())
        } else {
            Err(Error::corrupt(self.path, "section has trailing bytes"))
        }
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.usize()?;
        (0..n).map(|_| self.usize()).collect()
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::corrupt(self.path, "array length overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| {
                let mut a = [0u8; 8];
                a.copy_from_slice(c);
                f64::from_le_bytes(a)
            })
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::corrupt(self.path, "string is not UTF-8"))
    }
}
