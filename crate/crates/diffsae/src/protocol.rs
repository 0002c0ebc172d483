// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary edit protocol between a running generator and the edit server.
//!
//! Request, little-endian:
//!
//! ```text
//! "EDT1" | mode u8 | t f32 | H u16 | W u16 | d u32 | H·W·d f32
//! ```
//!
//! Response: `"EDR1" | status u8`, followed by the `H·W·d` payload only when
//! status is [`Status::Ok`]. One frame is in flight per connection.
//!
//! A frame that cannot be parsed (bad magic, oversized length, unknown mode,
//! non-finite values) gets status 1. After a bad magic or oversized length
//! the server skips input up to the next `"EDT1"`, so a corrupted frame costs
//! one status-1 reply and the session continues. A well-formed frame that
//! does not fit the plan (mode or `d` mismatch) gets status 2.

use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;

use diffsae_core::intervention::{EditMode, ResolvedEdit, TimestepWindow};
use diffsae_core::SaeModel;
use serde::Serialize;

use crate::plan::LoadedPlan;

pub const REQUEST_MAGIC: [u8; 4] = *b"EDT1";
pub const RESPONSE_MAGIC: [u8; 4] = *b"EDR1";
/// Bytes after the magic: mode, t, H, W, d.
const HEADER_REST: usize = 1 + 4 + 2 + 2 + 4;
/// Largest accepted payload, in floats (1 GiB).
pub const MAX_PAYLOAD_FLOATS: u64 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    Protocol = 1,
    Edit = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub mode: u8,
    pub t: f32,
    pub h: u16,
    pub w: u16,
    pub d: u32,
    pub payload: Vec<f32>,
}

impl EditRequest {
    pub fn new(mode: EditMode, t: f32, h: u16, w: u16, d: u32, payload: Vec<f32>) -> Self {
        Self {
            mode: mode.wire_code(),
            t,
            h,
            w,
            d,
            payload,
        }
    }

    pub fn payload_len(&self) -> usize {
        usize::from(self.h) * usize::from(self.w) * self.d as usize
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + HEADER_REST + 4 * self.payload.len());
        out.extend_from_slice(&REQUEST_MAGIC);
        out.push(self.mode);
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&self.h.to_le_bytes());
        out.extend_from_slice(&self.w.to_le_bytes());
        out.extend_from_slice(&self.d.to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResponse {
    pub status: u8,
    pub payload: Vec<f32>,
}

impl EditResponse {
    /// Reads one response; `payload_len` is the float count of the request.
    pub fn read_from<R: Read>(src: &mut R, payload_len: usize) -> io::Result<Self> {
        let mut head = [0u8; 5];
        src.read_exact(&mut head)?;
        if head[..4] != RESPONSE_MAGIC {
            return Err(io::Error::new(ErrorKind::InvalidData, "bad response magic"));
        }
        let status = head[4];
        let payload = if status == Status::Ok as u8 {
            let mut raw = vec![0u8; payload_len * 4];
            src.read_exact(&mut raw)?;
            decode_floats(&raw)
        } else {
            Vec::new()
        };
        Ok(Self { status, payload })
    }
}

/// Synchronous client over any byte stream.
pub struct EditClient<S: Read + Write> {
    stream: S,
}

impl<S: Read + Write> EditClient<S> {
    pub fn new(stream: S) -> Self {
        Self { stream }
    }

    pub fn request(&mut self, req: &EditRequest) -> io::Result<EditResponse> {
        self.stream.write_all(&req.encode())?;
        self.stream.flush()?;
        EditResponse::read_from(&mut self.stream, req.payload_len())
    }

    /// Sends raw bytes, e.g. a deliberately malformed frame.
    pub fn send_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.stream.write_all(bytes)?;
        self.stream.flush()
    }

    pub fn read_response(&mut self, payload_len: usize) -> io::Result<EditResponse> {
        EditResponse::read_from(&mut self.stream, payload_len)
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ServeStats {
    pub frames: u64,
    pub edited: u64,
    pub echoed: u64,
    pub protocol_errors: u64,
    pub edit_errors: u64,
}

impl ServeStats {
    pub fn merge(&mut self, o: &ServeStats) {
        self.frames += o.frames;
        self.edited += o.edited;
        self.echoed += o.echoed;
        self.protocol_errors += o.protocol_errors;
        self.edit_errors += o.edit_errors;
    }
}

/// Applies one resolved edit to every in-window frame.
#[derive(Debug, Clone)]
pub struct EditServer {
    model: SaeModel<f32>,
    edit: ResolvedEdit,
    window: TimestepWindow,
}

enum Reply {
    Echo,
    Edited(Vec<f32>),
    Fail(Status),
}

impl EditServer {
    pub fn new(model: SaeModel<f32>, edit: ResolvedEdit, window: TimestepWindow) -> Self {
        Self { model, edit, window }
    }

    pub fn from_plan(plan: LoadedPlan) -> Self {
        Self::new(plan.model, plan.edit, plan.window)
    }

    pub fn model(&self) -> &SaeModel<f32> {
        &self.model
    }

    pub fn edit(&self) -> &ResolvedEdit {
        &self.edit
    }

    fn decide(&self, mode: u8, t: f32, h: u16, w: u16, d: u32, raw: &[u8]) -> Reply {
        let Some(mode) = EditMode::from_wire_code(mode) else {
            return Reply::Fail(Status::Protocol);
        };
        if !t.is_finite() || h == 0 || w == 0 || d == 0 {
            return Reply::Fail(Status::Protocol);
        }
        let payload = decode_floats(raw);
        if payload.iter().any(|v| !v.is_finite()) {
            return Reply::Fail(Status::Protocol);
        }
        if mode != self.edit.mode() || d as usize != self.model.d() {
            return Reply::Fail(Status::Edit);
        }
        if !self.window.contains(f64::from(t)) {
            return Reply::Echo;
        }
        match self.edit.apply(&self.model, &payload, usize::from(h), usize::from(w)) {
            Ok(out) => Reply::Edited(out),
            Err(_) => Reply::Fail(Status::Edit),
        }
    }

    /// Serves frames until the reader is exhausted.
    pub fn serve<R: Read, W: Write>(&self, reader: R, writer: W) -> io::Result<ServeStats> {
        let mut r = BufReader::new(reader);
        let mut w = BufWriter::new(writer);
        let mut stats = ServeStats::default();
        let mut magic = [0u8; 4];
        let mut have_magic = false;
        loop {
            if !have_magic {
                if !read_or_eof(&mut r, &mut magic)? {
                    return Ok(stats);
                }
                if magic != REQUEST_MAGIC {
                    stats.frames += 1;
                    stats.protocol_errors += 1;
                    write_status(&mut w, Status::Protocol)?;
                    if !resync(&mut r, &mut magic)? {
                        return Ok(stats);
                    }
                }
            }
            have_magic = false;
            let mut head = [0u8; HEADER_REST];
            if !read_or_eof(&mut r, &mut head)? {
                return Ok(stats);
            }
            stats.frames += 1;
            let mode = head[0];
            let t = f32::from_le_bytes(head[1..5].try_into().expect("4 bytes"));
            let h = u16::from_le_bytes([head[5], head[6]]);
            let wd = u16::from_le_bytes([head[7], head[8]]);
            let d = u32::from_le_bytes(head[9..13].try_into().expect("4 bytes"));
            let n = u64::from(h) * u64::from(wd) * u64::from(d);
            if n > MAX_PAYLOAD_FLOATS {
                stats.protocol_errors += 1;
                write_status(&mut w, Status::Protocol)?;
                if !read_or_eof(&mut r, &mut magic)? || !resync(&mut r, &mut magic)? {
                    return Ok(stats);
                }
                have_magic = true;
                continue;
            }
            let mut raw = vec![0u8; n as usize * 4];
            if !read_or_eof(&mut r, &mut raw)? {
                return Ok(stats);
            }
            match self.decide(mode, t, h, wd, d, &raw) {
                Reply::Echo => {
                    stats.echoed += 1;
                    write_status(&mut w, Status::Ok)?;
                    w.write_all(&raw)?;
                }
                Reply::Edited(out) => {
                    stats.edited += 1;
                    write_status(&mut w, Status::Ok)?;
                    for v in &out {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Reply::Fail(s) => {
                    match s {
                        Status::Edit => stats.edit_errors += 1,
                        _ => stats.protocol_errors += 1,
                    }
                    write_status(&mut w, s)?;
                }
            }
            w.flush()?;
        }
    }
}

fn write_status<W: Write>(w: &mut W, status: Status) -> io::Result<()> {
    w.write_all(&RESPONSE_MAGIC)?;
    w.write_all(&[status as u8])?;
    w.flush()
}

/// Fills `buf`; `false` on end of input before it is full.
fn read_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    match r.read_exact(buf) {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => Ok(false),
        Err(e) => Err(e),
    }
}

/// Slides a 4-byte window one byte at a time until it holds the request
/// magic. `window` holds the last 4 bytes read.
fn resync<R: Read>(r: &mut R, window: &mut [u8; 4]) -> io::Result<bool> {
    let mut byte = [0u8; 1];
    while *window != REQUEST_MAGIC {
        if !read_or_eof(r, &mut byte)? {
            return Ok(false);
        }
        window.rotate_left(1);
        window[3] = byte[0];
    }
    Ok(true)
}

fn decode_floats(raw: &[u8]) -> Vec<f32> {
    raw.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect()
}

/// Accepts connections and serves each on its own thread. Stops after
/// `max_connections` connections when given, returning the summed stats.
pub fn serve_tcp(listener: TcpListener, server: Arc<EditServer>, max_connections: Option<usize>) -> io::Result<ServeStats> {
    let mut handles = Vec::new();
    for (n, stream) in listener.incoming().enumerate() {
        let stream: TcpStream = stream?;
        stream.set_nodelay(true)?;
        let server = Arc::clone(&server);
        handles.push(thread::spawn(move || -> io::Result<ServeStats> {
            let peer = stream.peer_addr().ok();
            let reader = stream.try_clone()?;
            let stats = server.serve(reader, stream)?;
            log::info!("connection {peer:?} closed: {stats:?}");
            Ok(stats)
        }));
        if max_connections.is_some_and(|m| n + 1 >= m) {
            break;
        }
    }
    let mut total = ServeStats::default();
    for h in handles {
        let stats = h
            .join()
            .map_err(|_| io::Error::other("connection thread panicked"))??;
        total.merge(&stats);
    }
    Ok(total)
}
