//! Binary parameter container shared by world-model and policy checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[4] | version u32 | seed_a u64 | seed_b u64 | n_sections u32
//! per section: name_len u16, name, n_sizes u32, sizes u32*, offset u64, count u64
//! parameter data: f64 little-endian, sections in declaration order
//! ```
//!
//! `offset` is the absolute byte offset of a section's data, so a single
//! section can be hashed without decoding the others.

use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::MlpParams;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub params: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub seed_a: u64,
    pub seed_b: u64,
    pub sections: Vec<Section>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionInfo {
    pub name: String,
    pub sizes: Vec<usize>,
    pub offset: u64,
    pub count: u64,
}

/// SHA-256 of a parameter slice in its on-disk byte form.
pub fn params_checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn header_len(sections: &[Section]) -> usize {
    4 + 4 + 8 + 8 + 4
        + sections
            .iter()
            .map(|s| 2 + s.name.len() + 4 + 4 * s.params.sizes().len() + 8 + 8)
            .sum::<usize>()
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed_a.to_le_bytes());
        out.extend_from_slice(&self.seed_b.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        let mut offset = header_len(&self.sections) as u64;
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.params.sizes().len() as u32).to_le_bytes());
            for &n in s.params.sizes() {
                out.extend_from_slice(&(n as u32).to_le_bytes());
            }
            let count = s.params.len() as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
            offset += 8 * count;
        }
        for s in &self.sections {
            for v in s.params.flat() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expect_magic: [u8; 4]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let (magic, seed_a, seed_b, infos) = read_header(&mut cur, expect_magic)?;
        let mut sections = Vec::with_capacity(infos.len());
        for info in infos {
            let start = info.offset as usize;
            let end = start
                .checked_add(8 * info.count as usize)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Format(format!("section {} runs past end of file", info.name)))?;
            let data = bytes[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            sections.push(Section {
                params: MlpParams::from_flat(&info.sizes, data)
                    .map_err(|e| Error::Format(format!("section {}: {e}", info.name)))?,
                name: info.name,
            });
        }
        Ok(Self {
            magic,
            seed_a,
            seed_b,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expect_magic: [u8; 4]) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, expect_magic)
    }

    pub fn section(&self, name: &str) -> Result<&MlpParams> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| &s.params)
            .ok_or_else(|| Error::Format(format!("checkpoint has no section {name:?}")))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

type Header = ([u8; 4], u64, u64, Vec<SectionInfo>);

fn read_header(cur: &mut Cursor, expect_magic: [u8; 4]) -> Result<Header> {
    let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
    if magic != expect_magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(&expect_magic)
        )));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let seed_a = cur.u64()?;
    let seed_b = cur.u64()?;
    let n = cur.u32()? as usize;
    let mut infos = Vec::with_capacity(n);
    for _ in 0..n {
        let len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| Error::Format("section name is not utf-8".into()))?;
        let n_sizes = cur.u32()? as usize;
        let sizes = (0..n_sizes).map(|_| cur.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let offset = cur.u64()?;
        let count = cur.u64()?;
        infos.push(SectionInfo {
            name,
            sizes,
            offset,
            count,
        });
    }
    Ok((magic, seed_a, seed_b, infos))
}

/// Reads only the header of a checkpoint file.
pub fn read_section_table(path: &Path, expect_magic: [u8; 4]) -> Result<Vec<SectionInfo>> {
    // the header is small; read a generous prefix rather than the whole file
    let mut f = fs::File::open(path)?;
    let mut buf = Vec::new();
    f.by_ref().take(1 << 16).read_to_end(&mut buf)?;
    let mut cur = Cursor { bytes: &buf, pos: 0 };
    Ok(read_header(&mut cur, expect_magic)?.3)
}

/// Checksum of one section, read directly from its byte range.
pub fn section_checksum(path: &Path, expect_magic: [u8; 4], name: &str) -> Result<String> {
    let info = read_section_table(path, expect_magic)?
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Format(format!("checkpoint has no section {name:?}")))?;
    let mut f = fs::File::open(path)?;
    f.seek(SeekFrom::Start(info.offset))?;
    let mut raw = vec![0u8; 8 * info.count as usize];
    f.read_exact(&mut raw)?;
    let mut h = Sha256::new();
    h.update(&raw);
    Ok(hex::encode(h.finalize()))
}
