//! DSEQ: `"DSEQ"`, u16 version, T/H/W/C as u32, fps as f32, then the
//! frames as row-major f32, all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::FrameSequence;
use crate::error::{format_err, Result};
use crate::tensor::Tensor;

pub const DSEQ_MAGIC: &[u8; 4] = b"DSEQ";
pub const DSEQ_VERSION: u16 = 1;
pub const DSEQ_HEADER_LEN: usize = 4 + 2 + 4 * 4 + 4;

pub fn write_sequence<W: Write>(seq: &FrameSequence, mut out: W) -> Result<()> {
    let shape = seq.frame_shape();
    let mut buf = Vec::with_capacity(DSEQ_HEADER_LEN + seq.len() * seq.frames()[0].len() * 4);
    buf.extend_from_slice(DSEQ_MAGIC);
    buf.extend_from_slice(&DSEQ_VERSION.to_le_bytes());
    for d in [seq.len(), shape[0], shape[1], shape[2]] {
        let d = u32::try_from(d).map_err(|_| crate::Error::Domain(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(&seq.fps().to_le_bytes());
    for f in seq.frames() {
        for v in f.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_sequence(seq: &FrameSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_sequence(seq, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses a complete DSEQ image. Nothing is returned unless the whole
/// buffer validates.
pub fn parse_sequence(bytes: &[u8]) -> Result<FrameSequence> {
    if bytes.len() < 4 || &bytes[..4] != DSEQ_MAGIC {
        return format_err(0, "bad magic, expected \"DSEQ\"");
    }
    if bytes.len() < DSEQ_HEADER_LEN {
        return format_err(bytes.len() as u64, format!("header truncated, need {DSEQ_HEADER_LEN} bytes"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DSEQ_VERSION {
        return format_err(4, format!("unsupported version {version}, expected {DSEQ_VERSION}"));
    }
    let dims: Vec<u32> = (0..4).map(|k| u32_at(bytes, 6 + 4 * k)).collect();
    if let Some(k) = dims.iter().position(|&d| d == 0) {
        return format_err(6 + 4 * k as u64, "zero dimension");
    }
    let fps = f32::from_le_bytes(bytes[22..26].try_into().expect("4 bytes"));
    if !(fps > 0.0) || !fps.is_finite() {
        return format_err(22, format!("fps must be positive, got {fps}"));
    }
    let count = dims.iter().try_fold(4u64, |acc, &d| acc.checked_mul(d as u64)).filter(|&n| n <= usize::MAX as u64);
    let Some(payload_len) = count else {
        return format_err(6, "dimensions overflow the addressable payload size");
    };
    let found = (bytes.len() - DSEQ_HEADER_LEN) as u64;
    if found != payload_len {
        return format_err(
            DSEQ_HEADER_LEN as u64 + found.min(payload_len),
            format!("payload holds {found} bytes, header declares {payload_len}"),
        );
    }
    let (t, h, w, c) = (dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize);
    let frame_len = h * w * c;
    let mut frames = Vec::with_capacity(t);
    for i in 0..t {
        let start = DSEQ_HEADER_LEN + i * frame_len * 4;
        let mut data = Vec::with_capacity(frame_len);
        for (j, chunk) in bytes[start..start + frame_len * 4].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !(0.0..=1.0).contains(&v) {
                return format_err((start + j * 4) as u64, format!("pixel value {v} outside [0, 1]"));
            }
            data.push(v);
        }
        frames.push(Tensor::new(vec![h, w, c], data)?);
    }
    FrameSequence::new(frames, fps)
}

pub fn read_sequence<R: Read>(mut input: R) -> Result<FrameSequence> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_sequence(&bytes)
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<FrameSequence> {
    parse_sequence(&std::fs::read(path)?)
}
