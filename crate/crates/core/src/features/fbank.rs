use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioClip, FrameSequence};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FbankConfig {
    pub n_mels: usize,
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub preemphasis: f64,
    /// Added to every filter energy before the log.
    pub log_floor: f64,
    pub low_hz: f64,
    /// `None` means Nyquist.
    pub high_hz: Option<f64>,
}

impl Default for FbankConfig {
    fn default() -> Self {
        FbankConfig {
            n_mels: 64,
            frame_len_ms: 25.0,
            frame_shift_ms: 10.0,
            preemphasis: 0.97,
            log_floor: 1e-10,
            low_hz: 20.0,
            high_hz: None,
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the mel scale, evaluated on the
/// `n_fft / 2 + 1` non-negative DFT bins.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels + 2` edge frequencies in Hz; filter `j` spans
    /// `edges[j]..edges[j + 2]` and peaks at `edges[j + 1]`.
    edges: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, low_hz: f64, high_hz: f64) -> Self {
        let (lo, hi) = (hz_to_mel(low_hz), hz_to_mel(high_hz));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let weights = (0..n_mels)
            .map(|j| {
                let (l, c, r) = (edges[j], edges[j + 1], edges[j + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect();
        MelFilterbank { edges, weights }
    }

    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    pub fn center_hz(&self, j: usize) -> f64 {
        self.edges[j + 1]
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// `|X_k|^2` for `k = 0..=n_fft/2` of the zero-padded frame.
pub fn power_spectrum(frame: &[f64], n_fft: usize) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    power_spectrum_with(&mut planner, frame, n_fft)
}

fn power_spectrum_with(planner: &mut FftPlanner<f64>, frame: &[f64], n_fft: usize) -> Vec<f64> {
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf: Vec<Complex<f64>> = (0..n_fft)
        .map(|i| Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    fft.process(&mut buf);
    buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Log mel filterbank energies. Frames that would run past the end of the
/// clip are dropped.
pub fn fbank(clip: &AudioClip, cfg: &FbankConfig) -> Result<FrameSequence> {
    let sr = clip.sample_rate() as f64;
    let frame_len = (sr * cfg.frame_len_ms / 1000.0).round() as usize;
    let shift = (sr * cfg.frame_shift_ms / 1000.0).round() as usize;
    if frame_len == 0 || shift == 0 {
        return Err(Error::Config("frame length and shift must be positive".into()));
    }
    let samples = clip.samples();
    if samples.len() < frame_len {
        return Err(Error::EmptyInput(format!(
            "{} samples is shorter than one {frame_len}-sample frame",
            samples.len()
        )));
    }
    let n_frames = 1 + (samples.len() - frame_len) / shift;
    let n_fft = frame_len.next_power_of_two();
    let high = cfg.high_hz.unwrap_or(sr / 2.0);
    let bank = MelFilterbank::new(cfg.n_mels, n_fft, clip.sample_rate(), cfg.low_hz, high);
    let window = hamming(frame_len);
    let mut planner = FftPlanner::new();

    let mut out = vec![0.0f32; cfg.n_mels * n_frames];
    let mut frame = vec![0.0; frame_len];
    for t in 0..n_frames {
        let raw = &samples[t * shift..t * shift + frame_len];
        for i in (1..frame_len).rev() {
            frame[i] = (raw[i] - cfg.preemphasis * raw[i - 1]) * window[i];
        }
        frame[0] = (raw[0] - cfg.preemphasis * raw[0]) * window[0];
        let power = power_spectrum_with(&mut planner, &frame, n_fft);
        for (j, e) in bank.apply(&power).into_iter().enumerate() {
            out[j * n_frames + t] = (e + cfg.log_floor).ln() as f32;
        }
    }
    FrameSequence::new(cfg.n_mels, n_frames, out)
}
