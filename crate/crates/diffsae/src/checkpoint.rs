// SPDX-License-Identifier: MIT OR Apache-2.0

//! `.saeckpt` checkpoints: model parameters plus Adam state.
//!
//! ```text
//! magic "SAECKPT1" | header_len u32 | header (JSON) |
//! W_enc (n_f×d) | b (d) | W_dec (d×n_f, row-major) |
//! m_enc | v_enc | m_b | v_b | m_dec | v_dec      (same shapes, f32 LE)
//! ```
//!
//! The decoder is stored as a `d × n_f` matrix whose column `i` is concept
//! vector `f_i`, so the file reads naturally in column-major tooling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use diffsae_core::{OptimizerState, SaeModel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SAECKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_EXTENSION: &str = "saeckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub d: usize,
    pub n_f: usize,
    pub k: usize,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SaeModel<f32>,
    pub optimizer: OptimizerState<f32>,
}

impl Checkpoint {
    pub fn fresh(model: SaeModel<f32>, learning_rate: f64) -> Self {
        let optimizer = OptimizerState::for_model(&model, learning_rate);
        Self { model, optimizer }
    }

    fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            version: CHECKPOINT_VERSION,
            d: self.model.d(),
            n_f: self.model.n_f(),
            k: self.model.k(),
            step: self.optimizer.step,
            learning_rate: self.optimizer.learning_rate,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
        }
    }

    pub fn write_to<W: Write>(&self, sink: &mut W) -> Result<()> {
        let (d, n_f) = (self.model.d(), self.model.n_f());
        let header = serde_json::to_vec(&self.header())?;
        sink.write_all(CHECKPOINT_MAGIC)?;
        sink.write_all(&(header.len() as u32).to_le_bytes())?;
        sink.write_all(&header)?;
        let opt = &self.optimizer;
        write_floats(sink, self.model.encoder())?;
        write_floats(sink, self.model.bias())?;
        write_floats(sink, &self.model.decoder_row_major())?;
        write_floats(sink, &opt.m_enc)?;
        write_floats(sink, &opt.v_enc)?;
        write_floats(sink, &opt.m_b)?;
        write_floats(sink, &opt.v_b)?;
        write_floats(sink, &transpose(&opt.m_dec, n_f, d))?;
        write_floats(sink, &transpose(&opt.v_dec, n_f, d))?;
        sink.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(src: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        src.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("bad checkpoint magic"));
        }
        let mut len = [0u8; 4];
        src.read_exact(&mut len).map_err(truncated)?;
        let len = u32::from_le_bytes(len) as usize;
        if len > 1 << 20 {
            return Err(Error::format("checkpoint header length is implausible"));
        }
        let mut header = vec![0u8; len];
        src.read_exact(&mut header).map_err(truncated)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)
            .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {}", header.version)));
        }
        let (d, n_f) = (header.d, header.n_f);
        let mat = n_f
            .checked_mul(d)
            .filter(|&m| m <= 1 << 32)
            .ok_or_else(|| Error::format("checkpoint dimensions overflow"))?;
        let w_enc = read_floats(src, mat)?;
        let b = read_floats(src, d)?;
        let w_dec_rm = read_floats(src, mat)?;
        let m_enc = read_floats(src, mat)?;
        let v_enc = read_floats(src, mat)?;
        let m_b = read_floats(src, d)?;
        let v_b = read_floats(src, d)?;
        let m_dec = read_floats(src, mat)?;
        let v_dec = read_floats(src, mat)?;
        let mut rest = [0u8; 1];
        if src.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        let w_dec = SaeModel::<f32>::decoder_from_row_major(d, n_f, &w_dec_rm);
        let model = SaeModel::from_parts(d, n_f, header.k, w_enc, w_dec, b)?;
        let optimizer = OptimizerState {
            m_enc,
            v_enc,
            m_b,
            v_b,
            m_dec: transpose(&m_dec, d, n_f),
            v_dec: transpose(&v_dec, d, n_f),
            step: header.step,
            learning_rate: header.learning_rate,
            beta1: header.beta1,
            beta2: header.beta2,
            eps: header.eps,
        };
        if !optimizer.is_finite() {
            return Err(Error::format("non-finite optimizer state in checkpoint"));
        }
        Ok(Self { model, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(Error::at(path))?;
        self.write_to(&mut BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::at(path))?;
        Self::read_from(&mut BufReader::new(file))
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

/// Loads just the model from a checkpoint file.
pub fn load_model(path: &Path) -> Result<SaeModel<f32>> {
    Ok(Checkpoint::load(path)?.model)
}

/// `rows × cols` row-major to `cols × rows` row-major.
fn transpose(m: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

fn write_floats<W: Write>(sink: &mut W, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(())
}

fn read_floats<R: Read>(src: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    src.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("truncated checkpoint")
    } else {
        Error::Io(e)
    }
}
