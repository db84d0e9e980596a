//! Versioned binary container for models, PCA transforms and client/server
//! bundles.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! file    := "PSV" version-byte | u32 section_count | section*
//! section := tag [4 ASCII bytes] | u64 payload_len | payload
//! ```
//!
//! The only version is `'1'` (magic `PSV1`); loaders reject anything else.
//! Section payloads:
//!
//! ```text
//! NET0 := u32 input_dim | u32 layer_count | layer*
//! layer := u8 kind (0 dense, 1 relu, 2 softmax) | u8 trainable
//!          dense adds: u32 out | u32 in | out*in f64 weights (row-major) | out f64 bias
//! PCA1 := u32 d | u32 k | f64 total_variance | d f64 mean
//!         | k*d f64 components (row-major) | k f64 eigenvalues
//! SIGM := f64 noise sigma
//! ```
//!
//! File schemas: a model file is `[NET0]`, a transform file `[PCA1]`, a
//! client bundle `[NET0, PCA1?, SIGM]`, a server bundle `[NET0, PCA1?]`.

use crate::embedding::{ClientBundle, ServerBundle};
use crate::error::{Error, Result};
use crate::nn::{LayerBase, LayerKind};
use crate::pca::PcaTransformBase;
use crate::{Network, PcaTransform, Tensor};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 3] = b"PSV";
const VERSION: u8 = b'1';
const TAG_NET: [u8; 4] = *b"NET0";
const TAG_PCA: [u8; 4] = *b"PCA1";
const TAG_SIGMA: [u8; 4] = *b"SIGM";
/// Sanity cap on a single section payload.
const MAX_SECTION: u64 = 1 << 30;

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_container(path.as_ref(), &[(TAG_NET, encode_network(net))])
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let mut sections = read_container(path)?;
    let net = take_section(&mut sections, TAG_NET, path)?;
    reject_leftovers(&sections, path)?;
    decode_network(&net, path)
}

pub fn save_pca(t: &PcaTransform, path: impl AsRef<Path>) -> Result<()> {
    write_container(path.as_ref(), &[(TAG_PCA, encode_pca(t))])
}

pub fn load_pca(path: impl AsRef<Path>) -> Result<PcaTransform> {
    let path = path.as_ref();
    let mut sections = read_container(path)?;
    let pca = take_section(&mut sections, TAG_PCA, path)?;
    reject_leftovers(&sections, path)?;
    decode_pca(&pca, path)
}

pub fn save_client_bundle(b: &ClientBundle, path: impl AsRef<Path>) -> Result<()> {
    let mut sections = vec![(TAG_NET, encode_network(&b.front))];
    if let Some(pca) = &b.pca {
        sections.push((TAG_PCA, encode_pca(pca)));
    }
    sections.push((TAG_SIGMA, b.sigma.to_le_bytes().to_vec()));
    write_container(path.as_ref(), &sections)
}

pub fn load_client_bundle(path: impl AsRef<Path>) -> Result<ClientBundle> {
    let path = path.as_ref();
    let mut sections = read_container(path)?;
    let front = decode_network(&take_section(&mut sections, TAG_NET, path)?, path)?;
    let pca = match take_optional(&mut sections, TAG_PCA) {
        Some(bytes) => Some(decode_pca(&bytes, path)?),
        None => None,
    };
    let sigma_bytes = take_section(&mut sections, TAG_SIGMA, path)?;
    reject_leftovers(&sections, path)?;
    if sigma_bytes.len() != 8 {
        return Err(corrupt(path, "SIGM section must be 8 bytes"));
    }
    let sigma = f64::from_le_bytes(sigma_bytes.try_into().expect("checked length"));
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(corrupt(path, "noise sigma must be finite and >= 0"));
    }
    Ok(ClientBundle { front, pca, sigma })
}

pub fn save_server_bundle(b: &ServerBundle, path: impl AsRef<Path>) -> Result<()> {
    let mut sections = vec![(TAG_NET, encode_network(&b.back))];
    if let Some(pca) = &b.pca {
        sections.push((TAG_PCA, encode_pca(pca)));
    }
    write_container(path.as_ref(), &sections)
}

pub fn load_server_bundle(path: impl AsRef<Path>) -> Result<ServerBundle> {
    let path = path.as_ref();
    let mut sections = read_container(path)?;
    let back = decode_network(&take_section(&mut sections, TAG_NET, path)?, path)?;
    let pca = match take_optional(&mut sections, TAG_PCA) {
        Some(bytes) => Some(decode_pca(&bytes, path)?),
        None => None,
    };
    reject_leftovers(&sections, path)?;
    Ok(ServerBundle { back, pca })
}

fn write_container(path: &Path, sections: &[([u8; 4], Vec<u8>)]) -> Result<()> {
    let io_err = |e| Error::io(format!("write {}", path.display()), e);
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&[VERSION]).map_err(io_err)?;
    w.write_all(&(sections.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for (tag, payload) in sections {
        w.write_all(tag).map_err(io_err)?;
        w.write_all(&(payload.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(payload).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_container(path: &Path) -> Result<Vec<([u8; 4], Vec<u8>)>> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 4];
    read_exact(&mut r, &mut head, path, "magic")?;
    if &head[..3] != MAGIC {
        return Err(Error::BadMagic {
            file: path.to_path_buf(),
        });
    }
    if head[3] != VERSION {
        return Err(Error::UnsupportedVersion {
            file: path.to_path_buf(),
            got: head[3] as char,
        });
    }
    let count = read_u32(&mut r, path, "section count")?;
    let mut sections = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut tag = [0u8; 4];
        read_exact(&mut r, &mut tag, path, "section tag")?;
        let len = read_u64(&mut r, path, "section length")?;
        if len > MAX_SECTION {
            return Err(corrupt(path, &format!("section {} bytes exceeds cap", len)));
        }
        let mut payload = vec![0u8; len as usize];
        read_exact(&mut r, &mut payload, path, "section payload")?;
        sections.push((tag, payload));
    }
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(sections),
        Ok(_) => Err(corrupt(path, "trailing bytes after last section")),
        Err(e) => Err(Error::io(format!("read {}", path.display()), e)),
    }
}

fn take_section(
    sections: &mut Vec<([u8; 4], Vec<u8>)>,
    tag: [u8; 4],
    path: &Path,
) -> Result<Vec<u8>> {
    take_optional(sections, tag).ok_or_else(|| Error::MissingSection {
        file: path.to_path_buf(),
        tag: tag_name(tag),
    })
}

fn take_optional(sections: &mut Vec<([u8; 4], Vec<u8>)>, tag: [u8; 4]) -> Option<Vec<u8>> {
    let idx = sections.iter().position(|(t, _)| *t == tag)?;
    Some(sections.remove(idx).1)
}

fn reject_leftovers(sections: &[([u8; 4], Vec<u8>)], path: &Path) -> Result<()> {
    if let Some((tag, _)) = sections.first() {
        return Err(corrupt(
            path,
            &format!("unexpected section {:?}", String::from_utf8_lossy(tag)),
        ));
    }
    Ok(())
}

fn tag_name(tag: [u8; 4]) -> &'static str {
    match tag {
        TAG_NET => "NET0",
        TAG_PCA => "PCA1",
        TAG_SIGMA => "SIGM",
        _ => "unknown",
    }
}

fn corrupt(path: &Path, detail: &str) -> Error {
    Error::Corrupt {
        file: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            corrupt(path, &format!("truncated while reading {what}"))
        }
        _ => Error::io(format!("read {}", path.display()), e),
    })
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path, what)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn encode_network(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(net.input_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(net.n_layers() as u32).to_le_bytes());
    for layer in net.layers() {
        match layer.kind() {
            LayerKind::Dense { weights, bias } => {
                out.push(0);
                out.push(layer.is_trainable() as u8);
                out.extend_from_slice(&(weights.shape()[0] as u32).to_le_bytes());
                out.extend_from_slice(&(weights.shape()[1] as u32).to_le_bytes());
                for v in weights.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for v in bias.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            LayerKind::Relu => {
                out.push(1);
                out.push(layer.is_trainable() as u8);
            }
            LayerKind::Softmax => {
                out.push(2);
                out.push(layer.is_trainable() as u8);
            }
        }
    }
    out
}

pub(crate) fn decode_network(bytes: &[u8], path: &Path) -> Result<Network> {
    let mut cur = Cursor::new(bytes, path);
    let input_dim = cur.u32()? as usize;
    let n_layers = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = cur.u8()?;
        let trainable = match cur.u8()? {
            0 => false,
            1 => true,
            other => return Err(corrupt(path, &format!("bad trainable flag {other}"))),
        };
        let mut layer = match kind {
            0 => {
                let out = cur.u32()? as usize;
                let inp = cur.u32()? as usize;
                let weights = Tensor::new([out, inp], cur.f64s(out * inp)?)?;
                let bias = Tensor::new([out], cur.f64s(out)?)?;
                LayerBase::dense(weights, bias)?
            }
            1 => LayerBase::relu(),
            2 => LayerBase::softmax(),
            other => return Err(corrupt(path, &format!("unknown layer kind {other}"))),
        };
        if !trainable {
            layer = LayerBase {
                trainable: false,
                ..layer
            };
        }
        layers.push(layer);
    }
    cur.finish()?;
    Network::with_input_dim(layers, input_dim)
}

pub(crate) fn encode_pca(t: &PcaTransform) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(t.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(t.k() as u32).to_le_bytes());
    out.extend_from_slice(&t.total_variance().to_le_bytes());
    for v in t.mean().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in t.components().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in t.eigenvalues().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode_pca(bytes: &[u8], path: &Path) -> Result<PcaTransform> {
    let mut cur = Cursor::new(bytes, path);
    let d = cur.u32()? as usize;
    let k = cur.u32()? as usize;
    let total_variance = cur.f64()?;
    let mean = Tensor::new([d], cur.f64s(d)?)?;
    let components = Tensor::new([k, d], cur.f64s(k * d)?)?;
    let eigenvalues = Tensor::new([k], cur.f64s(k)?)?;
    cur.finish()?;
    PcaTransformBase::new(mean, components, eigenvalues, total_variance)
}

/// Bounds-checked little-endian reader over a section payload.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path,
        }
    }

    fn chunk(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(
                self.path,
                &format!(
                    "truncated section: need {} bytes at offset {}, have {}",
                    n,
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.chunk(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.chunk(4)?.try_into().expect("4")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.chunk(8)?.try_into().expect("8")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.chunk(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(corrupt(
                self.path,
                &format!(
                    "{} trailing bytes in section",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        Ok(())
    }
}
