//! Binary wire protocol between client and server.
//!
//! Frames travel over a stream transport, each preceded by a `u32` LE
//! length prefix counting the frame bytes (prefix excluded). Layouts, all
//! integers little-endian, floats IEEE-754 32-bit:
//!
//! ```text
//! request  := "PSFR" | version u8 | request_id u32 | k u16 | k f32 payload
//! response := "PSCR" | version u8 | request_id u32 | status u8 | body
//!   status 0 (ok):   predicted_class u16 | n_probs u16 | n_probs f32
//!   status e > 0:    msg_len u16 | msg_len utf-8 bytes
//! ```
//!
//! Error status codes: 1 malformed frame, 2 feature dimension mismatch,
//! 3 internal server error.

use crate::error::FrameError;
use crate::Error;
use std::io::{Read, Write};

pub const REQUEST_MAGIC: [u8; 4] = *b"PSFR";
pub const RESPONSE_MAGIC: [u8; 4] = *b"PSCR";
pub const PROTOCOL_VERSION: u8 = 1;
/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME_LEN: u32 = 1 << 20;

pub const ERR_MALFORMED: u8 = 1;
pub const ERR_DIM_MISMATCH: u8 = 2;
pub const ERR_INTERNAL: u8 = 3;

/// Feature vector sent client to server.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRequest {
    pub request_id: u32,
    pub features: Vec<f32>,
}

/// Successful classification, server to client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassResponse {
    pub request_id: u32,
    pub predicted_class: u16,
    pub probs: Vec<f32>,
}

/// Error reply; the connection stays usable after one.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorResponse {
    pub request_id: u32,
    pub code: u8,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResponseFrame {
    Class(ClassResponse),
    Error(ErrorResponse),
}

/// Encodes a feature request. Empty feature vectors are forbidden.
pub fn encode_request(req: &FeatureRequest) -> Result<Vec<u8>, FrameError> {
    if req.features.is_empty() {
        return Err(FrameError::EmptyFeature);
    }
    if req.features.len() > u16::MAX as usize {
        return Err(FrameError::Oversized(req.features.len() as u32));
    }
    let mut out = Vec::with_capacity(11 + 4 * req.features.len());
    out.extend_from_slice(&REQUEST_MAGIC);
    out.push(PROTOCOL_VERSION);
    out.extend_from_slice(&req.request_id.to_le_bytes());
    out.extend_from_slice(&(req.features.len() as u16).to_le_bytes());
    for v in &req.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_request(bytes: &[u8]) -> Result<FeatureRequest, FrameError> {
    if bytes.len() < 11 {
        return Err(FrameError::Truncated {
            need: 11,
            have: bytes.len(),
        });
    }
    if bytes[..4] != REQUEST_MAGIC {
        return Err(FrameError::BadMagic);
    }
    if bytes[4] != PROTOCOL_VERSION {
        return Err(FrameError::Version(bytes[4]));
    }
    let request_id = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    let k = u16::from_le_bytes(bytes[9..11].try_into().expect("2 bytes")) as usize;
    if k == 0 {
        return Err(FrameError::EmptyFeature);
    }
    let expected = 11 + 4 * k;
    if bytes.len() < expected {
        return Err(FrameError::Truncated {
            need: expected,
            have: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FrameError::LengthMismatch {
            declared: expected,
            actual: bytes.len(),
        });
    }
    let features = bytes[11..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(FeatureRequest {
        request_id,
        features,
    })
}

pub fn encode_response(frame: &ResponseFrame) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&RESPONSE_MAGIC);
    out.push(PROTOCOL_VERSION);
    match frame {
        ResponseFrame::Class(c) => {
            out.extend_from_slice(&c.request_id.to_le_bytes());
            out.push(0);
            out.extend_from_slice(&c.predicted_class.to_le_bytes());
            out.extend_from_slice(&(c.probs.len() as u16).to_le_bytes());
            for p in &c.probs {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        ResponseFrame::Error(e) => {
            out.extend_from_slice(&e.request_id.to_le_bytes());
            out.push(e.code);
            let msg = e.message.as_bytes();
            let len = msg.len().min(u16::MAX as usize);
            out.extend_from_slice(&(len as u16).to_le_bytes());
            out.extend_from_slice(&msg[..len]);
        }
    }
    out
}

pub fn decode_response(bytes: &[u8]) -> Result<ResponseFrame, FrameError> {
    if bytes.len() < 10 {
        return Err(FrameError::Truncated {
            need: 10,
            have: bytes.len(),
        });
    }
    if bytes[..4] != RESPONSE_MAGIC {
        return Err(FrameError::BadMagic);
    }
    if bytes[4] != PROTOCOL_VERSION {
        return Err(FrameError::Version(bytes[4]));
    }
    let request_id = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    let status = bytes[9];
    let body = &bytes[10..];
    if status == 0 {
        if body.len() < 4 {
            return Err(FrameError::Truncated {
                need: 14,
                have: bytes.len(),
            });
        }
        let predicted_class = u16::from_le_bytes(body[..2].try_into().expect("2 bytes"));
        let n = u16::from_le_bytes(body[2..4].try_into().expect("2 bytes")) as usize;
        let expected = 4 + 4 * n;
        if body.len() != expected {
            return Err(FrameError::LengthMismatch {
                declared: 10 + expected,
                actual: bytes.len(),
            });
        }
        let probs = body[4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(ResponseFrame::Class(ClassResponse {
            request_id,
            predicted_class,
            probs,
        }))
    } else {
        if body.len() < 2 {
            return Err(FrameError::Truncated {
                need: 12,
                have: bytes.len(),
            });
        }
        let len = u16::from_le_bytes(body[..2].try_into().expect("2 bytes")) as usize;
        if body.len() != 2 + len {
            return Err(FrameError::LengthMismatch {
                declared: 12 + len,
                actual: bytes.len(),
            });
        }
        let message = std::str::from_utf8(&body[2..])
            .map_err(|_| FrameError::BadMessage)?
            .to_string();
        Ok(ResponseFrame::Error(ErrorResponse {
            request_id,
            code: status,
            message,
        }))
    }
}

/// Writes one length-prefixed frame.
pub fn write_frame(w: &mut impl Write, frame: &[u8]) -> std::io::Result<()> {
    w.write_all(&(frame.len() as u32).to_le_bytes())?;
    w.write_all(frame)?;
    w.flush()
}

/// Reads one length-prefixed frame; `Ok(None)` is a clean EOF at a frame
/// boundary.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, Error> {
    let mut prefix = [0u8; 4];
    match r.read_exact(&mut prefix) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(Error::io("read frame prefix", e)),
    }
    let len = u32::from_le_bytes(prefix);
    if len > MAX_FRAME_LEN {
        return Err(Error::Frame(FrameError::Oversized(len)));
    }
    let mut frame = vec![0u8; len as usize];
    r.read_exact(&mut frame)
        .map_err(|e| Error::io("read frame body", e))?;
    Ok(Some(frame))
}
