//! Binary tensor files.
//!
//! Layout: magic `FQT1`, little-endian `u32` rank, `rank` little-endian `u32`
//! extents, then the payload as little-endian `f32` values in row-major order.
//! Complex payloads interleave `(re, im)` per element, so a complex file has
//! twice the payload of a real file with the same extents.

use std::fs;
use std::path::Path;

use super::{Spectrum, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"FQT1";

fn header(shape: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * shape.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out
}

pub fn encode_real<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = header(t.shape());
    out.reserve(4 * t.numel());
    for &v in t.data() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out
}

pub fn encode_complex<T: Real>(s: &Spectrum<T>) -> Vec<u8> {
    let mut out = header(s.shape());
    out.reserve(8 * s.numel());
    for (&re, &im) in s.re().iter().zip(s.im()) {
        out.extend_from_slice(&(re.f64() as f32).to_le_bytes());
        out.extend_from_slice(&(im.f64() as f32).to_le_bytes());
    }
    out
}

/// Element kind deduced from the payload length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    Real,
    Complex,
}

struct Parsed<'a> {
    shape: Vec<usize>,
    kind: Payload,
    payload: &'a [u8],
}

fn parse(bytes: &[u8]) -> Result<Parsed<'_>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing FQT1 magic".into()));
    }
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format("truncated header".into()))
    };
    let rank = word(4)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for r in 0..rank {
        let e = word(8 + 4 * r)? as usize;
        if e == 0 {
            return Err(Error::Format("zero extent".into()));
        }
        shape.push(e);
    }
    let payload = &bytes[8 + 4 * rank..];
    let n: usize = shape.iter().product();
    let kind = if payload.len() == 4 * n {
        Payload::Real
    } else if payload.len() == 8 * n {
        Payload::Complex
    } else {
        return Err(Error::Format(format!(
            "payload of {} bytes does not match shape {shape:?}",
            payload.len()
        )));
    };
    Ok(Parsed {
        shape,
        kind,
        payload,
    })
}

fn floats(payload: &[u8]) -> impl Iterator<Item = f32> + '_ {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
}

pub fn payload_kind(bytes: &[u8]) -> Result<Payload> {
    parse(bytes).map(|p| p.kind)
}

pub fn decode_real<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let p = parse(bytes)?;
    if p.kind != Payload::Real {
        return Err(Error::Format("expected a real payload".into()));
    }
    let data = floats(p.payload).map(|v| T::of(v as f64)).collect();
    Tensor::new(p.shape, data)
}

/// Decodes a complex payload. The file carries no layout metadata, so the
/// caller states whether the spectrum is centered and over which dimensions.
pub fn decode_complex<T: Real>(bytes: &[u8], centered: bool, dims: Vec<usize>) -> Result<Spectrum<T>> {
    let p = parse(bytes)?;
    if p.kind != Payload::Complex {
        return Err(Error::Format("expected a complex payload".into()));
    }
    let vals: Vec<f32> = floats(p.payload).collect();
    let re = vals.iter().step_by(2).map(|&v| T::of(v as f64)).collect();
    let im = vals.iter().skip(1).step_by(2).map(|&v| T::of(v as f64)).collect();
    Spectrum::new(p.shape, re, im, centered, dims)
}

pub fn write_real<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_real(t)).map_err(|e| Error::io(path, e))
}

pub fn write_complex<T: Real>(path: &Path, s: &Spectrum<T>) -> Result<()> {
    fs::write(path, encode_complex(s)).map_err(|e| Error::io(path, e))
}

pub fn read_real<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_real(&bytes)
}
