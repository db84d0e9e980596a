//! Classifier service: accepts length-prefixed feature frames over TCP,
//! reconstructs, finishes the forward pass and replies with class
//! probabilities.
//!
//! The loaded bundle is immutable and shared read-only across connections;
//! per-connection state is one read buffer, so identical request frames
//! always produce identical response frames. Malformed frames get an error
//! frame and the connection stays usable; only an unrecoverable length
//! prefix closes it.

use super::wire::{
    decode_request, encode_response, write_frame, ClassResponse, ErrorResponse, ResponseFrame,
    ERR_DIM_MISMATCH, ERR_INTERNAL, ERR_MALFORMED, MAX_FRAME_LEN, REQUEST_MAGIC,
};
use crate::embedding::{classify_features, ServerBundle};
use crate::error::{Error, Result};
use crate::Tensor;
use std::io::Read;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

const POLL_INTERVAL: Duration = Duration::from_millis(5);
const READ_TICK: Duration = Duration::from_millis(200);

/// A running service; dropping or calling [`ServerHandle::shutdown`] stops
/// the accept loop.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    /// The bound address (useful when serving on port 0).
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

/// Binds `addr` and serves the bundle until shutdown. Each connection is
/// handled on its own thread.
pub fn serve(bundle: ServerBundle, addr: &str) -> Result<ServerHandle> {
    let listener =
        TcpListener::bind(addr).map_err(|e| Error::io(format!("bind {addr}"), e))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| Error::io("set_nonblocking", e))?;
    let local = listener
        .local_addr()
        .map_err(|e| Error::io("local_addr", e))?;

    let stop = Arc::new(AtomicBool::new(false));
    let bundle = Arc::new(bundle);
    let accept_stop = Arc::clone(&stop);
    let accept_thread = std::thread::spawn(move || loop {
        if accept_stop.load(Ordering::SeqCst) {
            break;
        }
        match listener.accept() {
            Ok((stream, _)) => {
                let bundle = Arc::clone(&bundle);
                let stop = Arc::clone(&accept_stop);
                std::thread::spawn(move || handle_connection(stream, &bundle, &stop));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(POLL_INTERVAL);
            }
            Err(_) => std::thread::sleep(POLL_INTERVAL),
        }
    });

    Ok(ServerHandle {
        addr: local,
        stop,
        accept_thread: Some(accept_thread),
    })
}

fn handle_connection(mut stream: TcpStream, bundle: &ServerBundle, stop: &AtomicBool) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(READ_TICK));
    loop {
        let mut prefix = [0u8; 4];
        match read_full(&mut stream, &mut prefix, stop) {
            Ok(0) => return,          // clean EOF at a frame boundary
            Ok(n) if n < 4 => return, // peer vanished mid-prefix
            Ok(_) => {}
            Err(_) => return,
        }
        let len = u32::from_le_bytes(prefix);
        if len > MAX_FRAME_LEN {
            // The stream cannot be resynchronized after a bogus length.
            respond(
                &mut stream,
                ResponseFrame::Error(ErrorResponse {
                    request_id: 0,
                    code: ERR_MALFORMED,
                    message: format!("frame length {len} exceeds maximum"),
                }),
            );
            return;
        }
        let mut frame = vec![0u8; len as usize];
        match read_full(&mut stream, &mut frame, stop) {
            Ok(n) if n == frame.len() => {}
            _ => return,
        }
        let reply = handle_frame(&frame, bundle);
        if !respond(&mut stream, reply) {
            return;
        }
    }
}

fn handle_frame(frame: &[u8], bundle: &ServerBundle) -> ResponseFrame {
    let req = match decode_request(frame) {
        Ok(req) => req,
        Err(e) => {
            return ResponseFrame::Error(ErrorResponse {
                request_id: best_effort_request_id(frame),
                code: ERR_MALFORMED,
                message: e.to_string(),
            })
        }
    };
    let expected = bundle.expected_dim();
    if req.features.len() != expected {
        return ResponseFrame::Error(ErrorResponse {
            request_id: req.request_id,
            code: ERR_DIM_MISMATCH,
            message: format!(
                "feature dim {} does not match bundle dim {expected}",
                req.features.len()
            ),
        });
    }
    // Widen to f64 and run the server-side pipeline.
    let widened: Vec<f64> = req.features.iter().map(|&v| v as f64).collect();
    let z = match Tensor::vector(widened) {
        Ok(z) => z,
        Err(_) => {
            return ResponseFrame::Error(ErrorResponse {
                request_id: req.request_id,
                code: ERR_MALFORMED,
                message: "non-finite feature value".into(),
            })
        }
    };
    match classify_features(&bundle.back, bundle.pca.as_ref(), &z) {
        Ok(probs64) => {
            let probs: Vec<f32> = probs64.data().iter().map(|&p| p as f32).collect();
            let predicted_class = crate::tensor::argmax(&probs) as u16;
            ResponseFrame::Class(ClassResponse {
                request_id: req.request_id,
                predicted_class,
                probs,
            })
        }
        Err(e) => ResponseFrame::Error(ErrorResponse {
            request_id: req.request_id,
            code: ERR_INTERNAL,
            message: e.to_string(),
        }),
    }
}

fn best_effort_request_id(frame: &[u8]) -> u32 {
    if frame.len() >= 9 && frame[..4] == REQUEST_MAGIC {
        u32::from_le_bytes(frame[5..9].try_into().expect("4 bytes"))
    } else {
        0
    }
}

fn respond(stream: &mut TcpStream, frame: ResponseFrame) -> bool {
    write_frame(stream, &encode_response(&frame)).is_ok()
}

/// Fills `buf`, riding out read timeouts until shutdown. Returns the number
/// of bytes read (short only on EOF).
fn read_full(stream: &mut TcpStream, buf: &mut [u8], stop: &AtomicBool) -> std::io::Result<usize> {
    let mut off = 0;
    while off < buf.len() {
        if stop.load(Ordering::SeqCst) {
            return Err(std::io::Error::new(
                std::io::ErrorKind::Interrupted,
                "server shutting down",
            ));
        }
        match stream.read(&mut buf[off..]) {
            Ok(0) => return Ok(off),
            Ok(n) => off += n,
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock
                        | std::io::ErrorKind::TimedOut
                        | std::io::ErrorKind::Interrupted
                ) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(off)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::split_network;
    use crate::pca::fit_pca;
    use crate::service::wire::{encode_request, read_frame, FeatureRequest};
    use crate::Network;
    use std::io::Write;

    fn test_bundle() -> (Network, ServerBundle) {
        let net = Network::mlp(4, &[8, 6], 3, 9).unwrap();
        let sm = split_network(&net, 2).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::new([40, 4], (0..160).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let feats = sm.front.predict(&x).unwrap();
        let pca = fit_pca(&feats, 3).unwrap();
        (
            net,
            ServerBundle {
                back: sm.back,
                pca: Some(pca),
            },
        )
    }

    fn raw_roundtrip(stream: &mut TcpStream, frame: &[u8]) -> ResponseFrame {
        write_frame(stream, frame).unwrap();
        let bytes = read_frame(stream).unwrap().expect("response");
        super::super::wire::decode_response(&bytes).unwrap()
    }

    #[test]
    fn stateless_server_repeats_identical_responses() {
        let (_, bundle) = test_bundle();
        let handle = serve(bundle, "127.0.0.1:0").unwrap();
        let mut stream = TcpStream::connect(handle.local_addr()).unwrap();

        let frame = encode_request(&FeatureRequest {
            request_id: 11,
            features: vec![0.5, -0.25, 0.125],
        })
        .unwrap();
        write_frame(&mut stream, &frame).unwrap();
        let first = read_frame(&mut stream).unwrap().unwrap();
        write_frame(&mut stream, &frame).unwrap();
        let second = read_frame(&mut stream).unwrap().unwrap();
        assert_eq!(first, second);

        // Response invariants: echoed id, argmax consistency, prob sum.
        match super::super::wire::decode_response(&first).unwrap() {
            ResponseFrame::Class(c) => {
                assert_eq!(c.request_id, 11);
                assert_eq!(crate::tensor::argmax(&c.probs) as u16, c.predicted_class);
                let sum: f32 = c.probs.iter().sum();
                assert!((sum - 1.0).abs() < 1e-3);
            }
            other => panic!("unexpected {other:?}"),
        }
        handle.shutdown();
    }

    #[test]
    fn malformed_frame_gets_error_and_connection_stays_usable() {
        let (_, bundle) = test_bundle();
        let handle = serve(bundle, "127.0.0.1:0").unwrap();
        let mut stream = TcpStream::connect(handle.local_addr()).unwrap();

        // Garbage with a valid length prefix.
        match raw_roundtrip(&mut stream, b"not a frame at all") {
            ResponseFrame::Error(e) => assert_eq!(e.code, ERR_MALFORMED),
            other => panic!("unexpected {other:?}"),
        }

        // The same connection still answers a well-formed request.
        let good = encode_request(&FeatureRequest {
            request_id: 5,
            features: vec![0.0, 0.0, 0.0],
        })
        .unwrap();
        match raw_roundtrip(&mut stream, &good) {
            ResponseFrame::Class(c) => assert_eq!(c.request_id, 5),
            other => panic!("unexpected {other:?}"),
        }
        handle.shutdown();
    }

    #[test]
    fn dimension_mismatch_is_error_code_two_and_recoverable() {
        let (_, bundle) = test_bundle();
        let handle = serve(bundle, "127.0.0.1:0").unwrap();
        let mut stream = TcpStream::connect(handle.local_addr()).unwrap();

        let wrong_k = encode_request(&FeatureRequest {
            request_id: 21,
            features: vec![1.0; 7],
        })
        .unwrap();
        match raw_roundtrip(&mut stream, &wrong_k) {
            ResponseFrame::Error(e) => {
                assert_eq!(e.code, ERR_DIM_MISMATCH);
                assert_eq!(e.request_id, 21);
            }
            other => panic!("unexpected {other:?}"),
        }

        let good = encode_request(&FeatureRequest {
            request_id: 22,
            features: vec![0.1, 0.2, 0.3],
        })
        .unwrap();
        match raw_roundtrip(&mut stream, &good) {
            ResponseFrame::Class(c) => assert_eq!(c.request_id, 22),
            other => panic!("unexpected {other:?}"),
        }
        handle.shutdown();
    }

    #[test]
    fn truncated_connection_does_not_crash_the_server() {
        let (_, bundle) = test_bundle();
        let handle = serve(bundle, "127.0.0.1:0").unwrap();

        // Send a prefix promising more bytes than we deliver, then vanish.
        {
            let mut stream = TcpStream::connect(handle.local_addr()).unwrap();
            stream.write_all(&100u32.to_le_bytes()).unwrap();
            stream.write_all(&[1, 2, 3]).unwrap();
        }

        // Server still serves new connections.
        let mut stream = TcpStream::connect(handle.local_addr()).unwrap();
        let good = encode_request(&FeatureRequest {
            request_id: 1,
            features: vec![0.0, 0.5, 1.0],
        })
        .unwrap();
        match raw_roundtrip(&mut stream, &good) {
            ResponseFrame::Class(c) => assert_eq!(c.request_id, 1),
            other => panic!("unexpected {other:?}"),
        }
        handle.shutdown();
    }

    #[test]
    fn concurrent_clients_get_their_own_request_ids_back() {
        let (_, bundle) = test_bundle();
        let handle = serve(bundle, "127.0.0.1:0").unwrap();
        let addr = handle.local_addr();

        let workers: Vec<_> = (0..2)
            .map(|w| {
                std::thread::spawn(move || {
                    let mut stream = TcpStream::connect(addr).unwrap();
                    for i in 0..100u32 {
                        let id = w * 1000 + i;
                        let frame = encode_request(&FeatureRequest {
                            request_id: id,
                            features: vec![w as f32 * 0.1, i as f32 * 0.01, 0.5],
                        })
                        .unwrap();
                        write_frame(&mut stream, &frame).unwrap();
                        let bytes = read_frame(&mut stream).unwrap().unwrap();
                        match super::super::wire::decode_response(&bytes).unwrap() {
                            ResponseFrame::Class(c) => assert_eq!(c.request_id, id),
                            other => panic!("unexpected {other:?}"),
                        }
                    }
                })
            })
            .collect();
        for w in workers {
            w.join().unwrap();
        }
        handle.shutdown();
    }
}
