//! Client side of the split service: extract locally, transmit only the
//! reduced noisy feature, return the server verdict. The raw input never
//! leaves this function: the wire carries exactly one header plus the
//! k-dimensional payload.

use super::wire::{
    decode_response, encode_request, read_frame, write_frame, FeatureRequest, ResponseFrame,
};
use crate::embedding::{extract_features, ClientBundle};
use crate::error::{Error, Result};
use crate::Tensor;
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

/// Server verdict for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub predicted_class: u16,
    pub probs: Vec<f32>,
}

/// One synchronous inference round-trip with the default 5 s timeout.
pub fn client_infer(bundle: &ClientBundle, x: &[f64], addr: &str, seed: u64) -> Result<Inference> {
    client_infer_with_timeout(bundle, x, addr, seed, DEFAULT_TIMEOUT)
}

pub fn client_infer_with_timeout(
    bundle: &ClientBundle,
    x: &[f64],
    addr: &str,
    seed: u64,
    timeout: Duration,
) -> Result<Inference> {
    let sock_addr = addr
        .to_socket_addrs()
        .map_err(|e| Error::Connect {
            addr: addr.to_string(),
            source: e,
        })?
        .next()
        .ok_or_else(|| Error::Connect {
            addr: addr.to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "no addresses resolved"),
        })?;
    let mut stream = TcpStream::connect_timeout(&sock_addr, timeout).map_err(|e| {
        if is_timeout(&e) {
            Error::Timeout(timeout)
        } else {
            Error::Connect {
                addr: addr.to_string(),
                source: e,
            }
        }
    })?;
    stream
        .set_read_timeout(Some(timeout))
        .map_err(|e| Error::io("set_read_timeout", e))?;
    stream
        .set_write_timeout(Some(timeout))
        .map_err(|e| Error::io("set_write_timeout", e))?;
    let _ = stream.set_nodelay(true);

    let z = extract_features(
        &bundle.front,
        bundle.pca.as_ref(),
        bundle.sigma,
        &Tensor::vector(x.to_vec())?,
        seed,
    )?;
    let features: Vec<f32> = z.data().iter().map(|&v| v as f32).collect();
    let request_id = derive_request_id(seed);
    let frame = encode_request(&FeatureRequest {
        request_id,
        features,
    })?;
    write_frame(&mut stream, &frame).map_err(|e| map_io(e, timeout, "send request"))?;

    let bytes = match read_frame(&mut stream) {
        Ok(Some(bytes)) => bytes,
        Ok(None) => {
            return Err(Error::Protocol(
                "server closed the connection without responding".into(),
            ))
        }
        Err(Error::Io { source, .. }) if is_timeout(&source) => {
            return Err(Error::Timeout(timeout))
        }
        Err(e) => return Err(e),
    };
    match decode_response(&bytes)? {
        ResponseFrame::Class(c) => {
            if c.request_id != request_id {
                return Err(Error::Protocol(format!(
                    "response echoed request_id {}, expected {request_id}",
                    c.request_id
                )));
            }
            Ok(Inference {
                predicted_class: c.predicted_class,
                probs: c.probs,
            })
        }
        ResponseFrame::Error(e) => Err(Error::ErrorFrame {
            code: e.code,
            message: e.message,
        }),
    }
}

fn derive_request_id(seed: u64) -> u32 {
    (seed ^ (seed >> 32)) as u32
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(
        e.kind(),
        std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
    )
}

fn map_io(e: std::io::Error, timeout: Duration, context: &str) -> Error {
    if is_timeout(&e) {
        Error::Timeout(timeout)
    } else {
        Error::io(context, e)
    }
}
