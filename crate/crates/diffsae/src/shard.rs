// SPDX-License-Identifier: MIT OR Apache-2.0

//! `.saeact` activation shards.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SAEACT01" | version u32 | d u32 | H u32 | W u32 | n_images u64 |
//! meta_len u32 | meta (UTF-8 JSON) | n_images × (image_id u64 | H·W·d f32)
//! ```
//!
//! Image data is row-major: row `i`, then column `j`, then channel.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 8] = b"SAEACT01";
pub const SHARD_VERSION: u32 = 1;
pub const SHARD_EXTENSION: &str = "saeact";

const FIXED_HEADER_LEN: u64 = 8 + 4 + 4 + 4 + 4 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardMeta {
    pub block: String,
    pub timestep: f64,
    pub conditioning: String,
    pub prompt_source: String,
}

impl ShardMeta {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.timestep) {
            return Err(Error::format(format!(
                "shard timestep {} outside [0, 1]",
                self.timestep
            )));
        }
        if self.conditioning != "cond" && self.conditioning != "uncond" {
            return Err(Error::format(format!(
                "shard conditioning must be \"cond\" or \"uncond\", got {:?}",
                self.conditioning
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardHeader {
    pub version: u32,
    pub d: u32,
    pub h: u32,
    pub w: u32,
    pub n_images: u64,
    pub meta: ShardMeta,
}

impl ShardHeader {
    pub fn new(d: u32, h: u32, w: u32, n_images: u64, meta: ShardMeta) -> Self {
        Self {
            version: SHARD_VERSION,
            d,
            h,
            w,
            n_images,
            meta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SHARD_VERSION {
            return Err(Error::format(format!("unsupported shard version {}", self.version)));
        }
        if self.d == 0 {
            return Err(Error::format("shard d must be at least 1"));
        }
        if u64::from(self.h) * u64::from(self.w) == 0 {
            return Err(Error::format("shard H·W must be at least 1"));
        }
        self.meta.validate()
    }

    /// Floats per image.
    pub fn image_len(&self) -> usize {
        self.h as usize * self.w as usize * self.d as usize
    }

    pub fn locations(&self) -> usize {
        self.h as usize * self.w as usize
    }

    pub fn record_bytes(&self) -> u64 {
        8 + 4 * self.image_len() as u64
    }

    fn meta_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&self.meta)?)
    }

    pub fn encoded_len(&self) -> Result<u64> {
        Ok(FIXED_HEADER_LEN + self.meta_json()?.len() as u64)
    }

    pub fn write_to<W: Write>(&self, sink: &mut W) -> Result<u64> {
        self.validate()?;
        let meta = self.meta_json()?;
        sink.write_all(SHARD_MAGIC)?;
        sink.write_all(&self.version.to_le_bytes())?;
        sink.write_all(&self.d.to_le_bytes())?;
        sink.write_all(&self.h.to_le_bytes())?;
        sink.write_all(&self.w.to_le_bytes())?;
        sink.write_all(&self.n_images.to_le_bytes())?;
        sink.write_all(&(meta.len() as u32).to_le_bytes())?;
        sink.write_all(&meta)?;
        Ok(FIXED_HEADER_LEN + meta.len() as u64)
    }

    pub fn read_from<R: Read>(src: &mut R) -> Result<(Self, u64)> {
        let mut magic = [0u8; 8];
        read_exact_or_format(src, &mut magic, "shard magic")?;
        if &magic != SHARD_MAGIC {
            return Err(Error::format(format!("bad shard magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let version = read_u32(src)?;
        let d = read_u32(src)?;
        let h = read_u32(src)?;
        let w = read_u32(src)?;
        let n_images = read_u64(src)?;
        let meta_len = read_u32(src)?;
        if meta_len > 1 << 24 {
            return Err(Error::format(format!("shard metadata length {meta_len} is implausible")));
        }
        let mut meta = vec![0u8; meta_len as usize];
        read_exact_or_format(src, &mut meta, "shard metadata")?;
        let meta: ShardMeta = serde_json::from_slice(&meta)
            .map_err(|e| Error::format(format!("shard metadata: {e}")))?;
        let header = Self {
            version,
            d,
            h,
            w,
            n_images,
            meta,
        };
        header.validate()?;
        Ok((header, FIXED_HEADER_LEN + u64::from(meta_len)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u64,
    /// `H·W·d` floats, row-major.
    pub data: Vec<f32>,
}

impl ImageRecord {
    pub fn vector(&self, loc: usize, d: usize) -> &[f32] {
        &self.data[loc * d..(loc + 1) * d]
    }
}

/// Writes a header followed by `records`; returns the number of bytes written.
pub fn write_shard<'a, W: Write>(
    header: &ShardHeader,
    records: impl IntoIterator<Item = &'a ImageRecord>,
    sink: &mut W,
) -> Result<u64> {
    let mut written = header.write_to(sink)?;
    let mut count = 0u64;
    let mut buf = Vec::with_capacity(header.record_bytes() as usize);
    for rec in records {
        write_record(header, rec, &mut buf)?;
        sink.write_all(&buf)?;
        written += buf.len() as u64;
        count += 1;
    }
    if count != header.n_images {
        return Err(Error::format(format!(
            "header declares {} images but {count} records were written",
            header.n_images
        )));
    }
    sink.flush()?;
    Ok(written)
}

pub fn write_shard_file(path: &Path, header: &ShardHeader, records: &[ImageRecord]) -> Result<u64> {
    let file = File::create(path).map_err(Error::at(path))?;
    let mut sink = BufWriter::new(file);
    write_shard(header, records, &mut sink)
}

fn write_record(header: &ShardHeader, rec: &ImageRecord, buf: &mut Vec<u8>) -> Result<()> {
    if rec.data.len() != header.image_len() {
        return Err(Error::format(format!(
            "record {} has {} floats, header implies {}",
            rec.image_id,
            rec.data.len(),
            header.image_len()
        )));
    }
    if rec.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(format!("record {} contains non-finite values", rec.image_id)));
    }
    buf.clear();
    buf.extend_from_slice(&rec.image_id.to_le_bytes());
    for v in &rec.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Random-access reader over one shard file.
#[derive(Debug)]
pub struct ShardReader {
    file: BufReader<File>,
    header: ShardHeader,
    data_offset: u64,
    scratch: Vec<u8>,
}

impl ShardReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::at(path))?;
        let actual = file.metadata().map_err(Error::at(path))?.len();
        let mut file = BufReader::new(file);
        let (header, data_offset) = ShardHeader::read_from(&mut file)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let expected = header
            .n_images
            .checked_mul(header.record_bytes())
            .and_then(|b| b.checked_add(data_offset))
            .ok_or_else(|| Error::format("shard size overflows"))?;
        if expected != actual {
            return Err(Error::format(format!(
                "{}: file is {actual} bytes, header implies {expected}",
                path.display()
            )));
        }
        Ok(Self {
            file,
            header,
            data_offset,
            scratch: Vec::new(),
        })
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    pub fn read_record(&mut self, index: u64) -> Result<ImageRecord> {
        if index >= self.header.n_images {
            return Err(Error::format(format!("image index {index} out of range")));
        }
        let offset = self.data_offset + index * self.header.record_bytes();
        self.file.seek(SeekFrom::Start(offset))?;
        let mut id = [0u8; 8];
        self.file.read_exact(&mut id)?;
        let mut data = vec![0.0f32; self.header.image_len()];
        self.read_floats(&mut data)?;
        Ok(ImageRecord {
            image_id: u64::from_le_bytes(id),
            data,
        })
    }

    /// Reads the channel vector at location `loc` of image `index`.
    pub fn read_vector(&mut self, index: u64, loc: usize, out: &mut [f32]) -> Result<()> {
        let d = self.header.d as usize;
        if out.len() != d || loc >= self.header.locations() || index >= self.header.n_images {
            return Err(Error::format("vector read out of range"));
        }
        let offset = self.data_offset + index * self.header.record_bytes() + 8 + (loc * d * 4) as u64;
        self.file.seek(SeekFrom::Start(offset))?;
        self.read_floats(out)
    }

    fn read_floats(&mut self, out: &mut [f32]) -> Result<()> {
        self.scratch.resize(out.len() * 4, 0);
        self.file.read_exact(&mut self.scratch)?;
        for (o, chunk) in out.iter_mut().zip(self.scratch.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            if !v.is_finite() {
                return Err(Error::format("non-finite value in shard"));
            }
            *o = v;
        }
        Ok(())
    }

    /// Sequential pass over every record.
    pub fn records(&mut self) -> impl Iterator<Item = Result<ImageRecord>> + '_ {
        (0..self.header.n_images).map(move |i| self.read_record(i))
    }
}

pub fn read_shard(path: &Path) -> Result<(ShardHeader, Vec<ImageRecord>)> {
    let mut r = ShardReader::open(path)?;
    let records = r.records().collect::<Result<Vec<_>>>()?;
    Ok((r.header.clone(), records))
}

fn read_exact_or_format<R: Read>(src: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(src: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_format(src, &mut b, "shard header")?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(src: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_format(src, &mut b, "shard header")?;
    Ok(u64::from_le_bytes(b))
}
