//! Frame-level acoustic features: extraction, voice activity detection,
//! mean normalisation, length normalisation for batching, a synthetic
//! corpus generator and the on-disk feature format.

mod crop;
mod fbank;
mod io;
mod norm;
mod synth;
mod vad;

pub use crop::crop_or_extend;
pub use fbank::{fbank, power_spectrum, FbankConfig, MelFilterbank};
pub use io::{decode_uefb, encode_uefb, read_uefb, read_wav, write_uefb, UEFB_MAGIC, UEFB_VERSION};
pub use norm::sliding_cmn;
pub use synth::{synth_corpus, SynthConfig};
pub use vad::{energy_vad, frame_energy_db};

use ndtensor::{Real, Tensor};

use crate::error::{Error, Result};

/// Mono audio at 8 or 16 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != 8000 && sample_rate != 16000 {
            return Err(Error::Config(format!(
                "sample rate {sample_rate} Hz not supported (8000 or 16000)"
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Degenerate("non-finite audio sample".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

/// A `D x L` feature matrix stored row-major with one row per coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    features: Vec<f32>,
    dim: usize,
    len: usize,
    pub utterance_id: String,
    pub label: Option<usize>,
}

impl FrameSequence {
    pub fn new(dim: usize, len: usize, features: Vec<f32>) -> Result<Self> {
        if dim == 0 || len == 0 {
            return Err(Error::EmptyInput(format!("{dim} x {len} feature matrix")));
        }
        if features.len() != dim * len {
            return Err(Error::format(
                "feature matrix",
                format!("{} values for {dim} x {len}", features.len()),
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite feature value".into()));
        }
        Ok(FrameSequence {
            features,
            dim,
            len,
            utterance_id: String::new(),
            label: None,
        })
    }

    /// Builds from frames given as `L` vectors of length `D`.
    pub fn from_frames(frames: &[Vec<f32>]) -> Result<Self> {
        let len = frames.len();
        let dim = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != dim) {
            return Err(Error::format("feature matrix", "ragged frames"));
        }
        let mut features = vec![0.0; dim * len];
        for (t, frame) in frames.iter().enumerate() {
            for (d, &v) in frame.iter().enumerate() {
                features[d * len + t] = v;
            }
        }
        Self::new(dim, len, features)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.utterance_id = id.into();
        self
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn get(&self, coeff: usize, frame: usize) -> f32 {
        self.features[coeff * self.len + frame]
    }

    pub fn frame(&self, t: usize) -> Vec<f32> {
        (0..self.dim).map(|d| self.get(d, t)).collect()
    }

    /// Keeps the frames whose mask entry is true, preserving order.
    pub fn select_frames(&self, mask: &[bool]) -> Result<Self> {
        let kept: Vec<usize> = (0..self.len).filter(|&t| mask.get(t) == Some(&true)).collect();
        self.gather(&kept)
    }

    /// New sequence made of the listed frame indices.
    pub(crate) fn gather(&self, frames: &[usize]) -> Result<Self> {
        let len = frames.len();
        let mut out = vec![0.0; self.dim * len];
        for d in 0..self.dim {
            for (j, &t) in frames.iter().enumerate() {
                out[d * len + j] = self.get(d, t);
            }
        }
        let mut seq = Self::new(self.dim, len, out)?;
        seq.utterance_id = self.utterance_id.clone();
        seq.label = self.label;
        Ok(seq)
    }

    /// `[1, 1, D, L]` network input.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, 1, self.dim, self.len], |i| T::of(self.features[i] as f64))
    }
}
