use std::fs;
use std::path::Path;

use super::{AudioClip, FrameSequence};
use crate::error::{Error, Result};

pub const UEFB_MAGIC: &[u8; 4] = b"UEFB";
pub const UEFB_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Serialises a feature matrix: magic, version, D, L (u32 LE) followed by
/// `D * L` little-endian f32 values, one row per coefficient.
pub fn encode_uefb(seq: &FrameSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * seq.features().len());
    out.extend_from_slice(UEFB_MAGIC);
    out.extend_from_slice(&UEFB_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    for v in seq.features() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_uefb(bytes: &[u8]) -> Result<FrameSequence> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != UEFB_MAGIC {
        return Err(Error::format("UEFB file", "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != UEFB_VERSION {
        return Err(Error::format("UEFB file", format!("unsupported version {version}")));
    }
    let (dim, len) = (word(8) as usize, word(12) as usize);
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * dim * len {
        return Err(Error::format(
            "UEFB file",
            format!("{} payload bytes for {dim} x {len}", body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FrameSequence::new(dim, len, values)
}

/// Writes a feature file. The utterance id and label are not stored.
pub fn write_uefb(path: &Path, seq: &FrameSequence) -> Result<()> {
    fs::write(path, encode_uefb(seq)).map_err(|e| Error::io(path, e))
}

/// Reads a feature file; the utterance id is taken from the file stem.
pub fn read_uefb(path: &Path) -> Result<FrameSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let seq = decode_uefb(&bytes)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(seq.with_id(id))
}

/// Reads a 16-bit PCM mono WAV file, scaling samples into `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::format("WAV file", e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format("WAV file", "expected 16-bit PCM mono"));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format("WAV file", e.to_string()))?;
    AudioClip::new(samples, spec.sample_rate)
}
