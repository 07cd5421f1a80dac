//! `ursam-seg/1` wire format: newline-delimited UTF-8 JSON frames over a
//! child process's stdin/stdout.
//!
//! ```text
//! child  -> {"proto":"ursam-seg/1","name":"<backend>"}
//! parent -> {"id":1,"h":H,"w":W,"slice_b64":"<H*W f32 LE>","box":[y0,x0,y1,x1]}
//! child  -> {"id":1,"prob_b64":"<H*W f32 LE>"}   or   {"id":1,"error":"..."}
//! ```
//!
//! Unknown fields are ignored when decoding.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{SegmentError, SegmentRequest, SegmentResponse, Segmenter};
use crate::prompt::Box2;

pub const PROTOCOL: &str = "ursam-seg/1";

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    Json(String),
    #[error("invalid base64 payload: {0}")]
    Base64(String),
    #[error("payload carries {actual} bytes, expected {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("frame has neither prob_b64 nor error")]
    EmptyResponse,
    #[error("bad handshake: {0}")]
    Handshake(String),
    #[error("frame contains a raw newline")]
    Newline,
}

#[derive(Serialize, Deserialize)]
struct RequestFrame {
    id: u64,
    h: usize,
    w: usize,
    slice_b64: String,
    #[serde(rename = "box")]
    prompt: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct ProbFrame<'a> {
    id: u64,
    prob_b64: &'a str,
}

#[derive(Serialize, Deserialize)]
struct ErrorFrame<'a> {
    id: u64,
    error: &'a str,
}

#[derive(Deserialize)]
struct AnyResponse {
    id: u64,
    #[serde(default)]
    prob_b64: Option<String>,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Handshake {
    proto: String,
    name: String,
}

/// A decoded response line.
#[derive(Clone, Debug, PartialEq)]
pub enum ResponseFrame {
    Prob { id: u64, prob: Vec<f32> },
    Error { id: u64, message: String },
}

impl ResponseFrame {
    pub fn id(&self) -> u64 {
        match self {
            ResponseFrame::Prob { id, .. } | ResponseFrame::Error { id, .. } => *id,
        }
    }
}

fn encode_f32(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode_f32(b64: &str, expected: Option<usize>) -> Result<Vec<f32>, ProtocolError> {
    let bytes = STANDARD
        .decode(b64)
        .map_err(|e| ProtocolError::Base64(e.to_string()))?;
    if bytes.len() % 4 != 0 || expected.is_some_and(|n| n * 4 != bytes.len()) {
        return Err(ProtocolError::PayloadLength {
            expected: expected.map_or(bytes.len().next_multiple_of(4), |n| n * 4),
            actual: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn to_line<S: Serialize>(frame: &S) -> String {
    serde_json::to_string(frame).expect("frames serialize")
}

fn parse<'de, D: Deserialize<'de>>(line: &'de str) -> Result<D, ProtocolError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    if line.contains('\n') {
        return Err(ProtocolError::Newline);
    }
    serde_json::from_str(line).map_err(|e| ProtocolError::Json(e.to_string()))
}

/// One request line, without the trailing newline.
pub fn encode_request(req: &SegmentRequest) -> String {
    to_line(&RequestFrame {
        id: req.id,
        h: req.height,
        w: req.width,
        slice_b64: encode_f32(&req.slice),
        prompt: req.prompt.into(),
    })
}

pub fn decode_request(line: &str) -> Result<SegmentRequest, ProtocolError> {
    let f: RequestFrame = parse(line)?;
    let n = f
        .h
        .checked_mul(f.w)
        .ok_or_else(|| ProtocolError::Json("h * w overflows".into()))?;
    let slice = decode_f32(&f.slice_b64, Some(n))?;
    Ok(SegmentRequest {
        id: f.id,
        height: f.h,
        width: f.w,
        slice,
        prompt: Box2::from(f.prompt),
    })
}

pub fn encode_response(resp: &SegmentResponse) -> String {
    let b64 = encode_f32(&resp.prob);
    to_line(&ProbFrame {
        id: resp.id,
        prob_b64: &b64,
    })
}

pub fn encode_error(id: u64, message: &str) -> String {
    to_line(&ErrorFrame { id, error: message })
}

/// Decodes a response line. When `expected_len` is given the payload length
/// is checked against it.
pub fn decode_response(line: &str, expected_len: Option<usize>) -> Result<ResponseFrame, ProtocolError> {
    let f: AnyResponse = parse(line)?;
    match (f.prob_b64, f.error) {
        (_, Some(message)) => Ok(ResponseFrame::Error { id: f.id, message }),
        (Some(b64), None) => Ok(ResponseFrame::Prob {
            id: f.id,
            prob: decode_f32(&b64, expected_len)?,
        }),
        (None, None) => Err(ProtocolError::EmptyResponse),
    }
}

pub fn encode_handshake(name: &str) -> String {
    to_line(&Handshake {
        proto: PROTOCOL.to_string(),
        name: name.to_string(),
    })
}

/// Returns the backend name announced in a handshake line.
pub fn decode_handshake(line: &str) -> Result<String, ProtocolError> {
    let h: Handshake = parse(line).map_err(|e| ProtocolError::Handshake(e.to_string()))?;
    if h.proto != PROTOCOL {
        return Err(ProtocolError::Handshake(format!("unsupported protocol {:?}", h.proto)));
    }
    Ok(h.name)
}

/// Child-side loop: writes the handshake, then answers one frame per line
/// until end of input. Malformed frames are answered with error frames when
/// an id can be recovered and skipped otherwise.
pub fn serve<S: Segmenter + ?Sized, R: BufRead, W: Write>(
    backend: &S,
    input: R,
    mut output: W,
) -> std::io::Result<()> {
    writeln!(output, "{}", encode_handshake(backend.name()))?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match decode_request(&line) {
            Ok(req) => match backend.segment(&req) {
                Ok(resp) => encode_response(&resp),
                Err(e) => encode_error(req.id, &e.to_string()),
            },
            Err(e) => match serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("id").and_then(|id| id.as_u64()))
            {
                Some(id) => encode_error(id, &e.to_string()),
                None => continue,
            },
        };
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}

impl From<ResponseFrame> for Result<Vec<f32>, SegmentError> {
    fn from(f: ResponseFrame) -> Self {
        match f {
            ResponseFrame::Prob { prob, .. } => Ok(prob),
            ResponseFrame::Error { message, .. } => Err(SegmentError::Backend(message)),
        }
    }
}
