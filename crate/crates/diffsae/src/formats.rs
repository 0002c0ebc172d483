// SPDX-License-Identifier: MIT OR Apache-2.0

//! Text and image formats exchanged with external tools: annotation and
//! prompt-noun JSON lines, embedding TSV, edit-score records, score maps and
//! PGM masks.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use diffsae_core::analysis::EditRecord;
use diffsae_core::concepts::{AnnotatedObject, EmbeddingTable};
use diffsae_core::{Mask, Quadrant};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A run-length encoded binary mask: alternating zero-run, one-run, ...,
/// starting with a (possibly empty) zero-run, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u64>,
}

impl RleMask {
    pub fn from_mask(mask: &Mask) -> Self {
        Self {
            height: mask.h(),
            width: mask.w(),
            counts: mask.to_rle(),
        }
    }

    pub fn to_mask(&self) -> Result<Mask> {
        Ok(Mask::from_rle(self.height, self.width, &self.counts)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationObjectLine {
    pub label: String,
    pub mask: RleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationLine {
    pub image_id: u64,
    pub objects: Vec<AnnotationObjectLine>,
}

pub type AnnotationSet = BTreeMap<u64, Vec<AnnotatedObject>>;

/// Reads JSON lines, skipping blank lines; errors carry the line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(Error::at(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::at(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(Error::at(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_annotations(lines: Vec<AnnotationLine>) -> Result<AnnotationSet> {
    let mut set = AnnotationSet::new();
    for line in lines {
        let mut objects = Vec::with_capacity(line.objects.len());
        for o in line.objects {
            let label = o.label.trim().to_lowercase();
            if label.is_empty() {
                return Err(Error::format(format!("image {}: empty object label", line.image_id)));
            }
            objects.push(AnnotatedObject {
                label,
                mask: o.mask.to_mask()?,
            });
        }
        if set.insert(line.image_id, objects).is_some() {
            return Err(Error::format(format!("duplicate annotation for image {}", line.image_id)));
        }
    }
    Ok(set)
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    parse_annotations(read_jsonl(path)?)
}

pub fn write_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    let lines: Vec<AnnotationLine> = set
        .iter()
        .map(|(&image_id, objects)| AnnotationLine {
            image_id,
            objects: objects
                .iter()
                .map(|o| AnnotationObjectLine {
                    label: o.label.clone(),
                    mask: RleMask::from_mask(&o.mask),
                })
                .collect(),
        })
        .collect();
    write_jsonl(path, &lines)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptNouns {
    pub image_id: u64,
    pub nouns: Vec<String>,
}

pub fn read_prompt_nouns(path: &Path) -> Result<BTreeMap<u64, Vec<String>>> {
    let mut out = BTreeMap::new();
    for line in read_jsonl::<PromptNouns>(path)? {
        if out.insert(line.image_id, line.nouns).is_some() {
            return Err(Error::format(format!("duplicate prompt nouns for image {}", line.image_id)));
        }
    }
    Ok(out)
}

/// Parses an embedding table: `#dim N`, then `token<TAB>f1<TAB>...<TAB>fN`.
pub fn parse_embeddings(text: &str) -> Result<EmbeddingTable> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| Error::format("empty embedding file"))?;
    let dim: usize = first
        .trim()
        .strip_prefix("#dim")
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| Error::format("embedding file must start with `#dim N`"))?;
    let mut table = EmbeddingTable::new(dim);
    for (n, line) in lines {
        let mut fields = line.split('\t');
        let token = fields.next().unwrap_or_default();
        let vector = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(format!("embedding line {}: {e}", n + 1)))?;
        if vector.len() != dim {
            return Err(Error::format(format!(
                "embedding line {}: {} values, expected {dim}",
                n + 1,
                vector.len()
            )));
        }
        table
            .insert(token, vector)
            .map_err(|e| Error::format(format!("embedding line {}: {e}", n + 1)))?;
    }
    Ok(table)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(Error::at(path))?;
    parse_embeddings(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let file = File::create(path).map_err(Error::at(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "#dim {}", table.dim())?;
    for (token, v) in table.iter() {
        write!(w, "{token}")?;
        for x in v {
            write!(w, "\t{x}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_edit_records(path: &Path) -> Result<Vec<EditRecord>> {
    read_jsonl(path)
}

/// One score map for quadrant evaluation, given inline or as a PGM path
/// (relative to the index file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreMapEntry {
    pub id: String,
    pub intended: Quadrant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pgm: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl ScoreMapEntry {
    pub fn load(&self, base: &Path) -> Result<ScoreMap> {
        match (&self.grid, &self.pgm) {
            (Some(rows), None) => {
                let h = rows.len();
                let w = rows.first().map_or(0, Vec::len);
                if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
                    return Err(Error::format(format!("score map {}: ragged or empty grid", self.id)));
                }
                Ok(ScoreMap {
                    h,
                    w,
                    values: rows.concat(),
                })
            }
            (None, Some(p)) => read_pgm(&base.join(p)),
            _ => Err(Error::format(format!(
                "score map {}: give exactly one of `grid` or `pgm`",
                self.id
            ))),
        }
    }
}

/// Reads a binary (P5) or plain (P2) PGM with 8- or 16-bit samples.
pub fn read_pgm(path: &Path) -> Result<ScoreMap> {
    let bytes = std::fs::read(path).map_err(Error::at(path))?;
    parse_pgm(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn parse_pgm(bytes: &[u8]) -> Result<ScoreMap> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::format(format!("bad PGM number {s:?}")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format("bad PGM dimensions or maxval"));
    }
    let n = h * w;
    let values = match magic.as_str() {
        "P2" => (0..n)
            .map(|_| token().and_then(num).map(|v| v as f64))
            .collect::<Result<Vec<_>>>()?,
        "P5" => {
            // Exactly one whitespace byte separates the header from the raster.
            let start = pos + 1;
            let width = if maxval < 256 { 1 } else { 2 };
            let raster = bytes
                .get(start..start + n * width)
                .ok_or_else(|| Error::format("truncated PGM raster"))?;
            if width == 1 {
                raster.iter().map(|&v| f64::from(v)).collect()
            } else {
                raster
                    .chunks_exact(2)
                    .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])))
                    .collect()
            }
        }
        other => return Err(Error::format(format!("unsupported PGM magic {other:?}"))),
    };
    Ok(ScoreMap { h, w, values })
}

/// 16-bit binary PGM of non-negative integer samples.
pub fn write_pgm16(path: &Path, h: usize, w: usize, values: &[u16]) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::format("PGM raster size mismatch"));
    }
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    std::fs::write(path, out).map_err(Error::at(path))?;
    Ok(())
}

/// 8-bit binary PGM with mask pixels at 255.
pub fn write_mask_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.w(), mask.h()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    std::fs::write(path, out).map_err(Error::at(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_round_trip_and_validation() {
        let t = parse_embeddings("#dim 2\nApple\t1\t0\npear\t0.5\t-2\n").unwrap();
        assert_eq!(t.get("apple"), Some(&[1.0, 0.0][..]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.tsv");
        write_embeddings(&p, &t).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), t);
        assert!(parse_embeddings("#dim 2\nx\t1\n").is_err());
        assert!(parse_embeddings("x\t1\t2\n").is_err());
    }

    #[test]
    fn annotations_round_trip() {
        let mut set = AnnotationSet::new();
        set.insert(
            4,
            vec![AnnotatedObject {
                label: "apple".into(),
                mask: Quadrant::TopLeft.mask(4, 4),
            }],
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        write_annotations(&p, &set).unwrap();
        assert_eq!(read_annotations(&p).unwrap(), set);
        let line = std::fs::read_to_string(&p).unwrap();
        assert!(line.contains("\"counts\":[0,2,2,2,10]"), "{line}");
    }

    #[test]
    fn pgm_formats() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.pgm");
        write_pgm16(&p, 2, 3, &[0, 1, 2, 300, 65535, 7]).unwrap();
        let m = read_pgm(&p).unwrap();
        assert_eq!((m.h, m.w), (2, 3));
        assert_eq!(m.values, vec![0.0, 1.0, 2.0, 300.0, 65535.0, 7.0]);
        let plain = parse_pgm(b"P2\n# c\n2 1\n9\n3 4\n").unwrap();
        assert_eq!(plain.values, vec![3.0, 4.0]);
        let mask = Mask::from_fn(2, 2, |i, j| i == j);
        write_mask_pgm(&p, &mask).unwrap();
        assert_eq!(read_pgm(&p).unwrap().values, vec![255.0, 0.0, 0.0, 255.0]);
        assert!(parse_pgm(b"P5\n2 2\n255\n\x01").is_err());
    }
}
