use std::f64::consts::LN_10;

use super::FrameSequence;

/// Per-frame energy in dB, taken as the total filterbank energy
/// `10 log10(sum_d exp(x_dt))` of log-energy features.
pub fn frame_energy_db(seq: &FrameSequence) -> Vec<f64> {
    (0..seq.len())
        .map(|t| {
            let m = (0..seq.dim()).map(|d| seq.get(d, t) as f64).fold(f64::MIN, f64::max);
            let lse = m + (0..seq.dim())
                .map(|d| (seq.get(d, t) as f64 - m).exp())
                .sum::<f64>()
                .ln();
            10.0 * lse / LN_10
        })
        .collect()
}

/// Keeps frames whose energy exceeds the utterance maximum minus
/// `offset_db`. The loudest frame is always kept.
pub fn energy_vad(seq: &FrameSequence, offset_db: f64) -> Vec<bool> {
    let energy = frame_energy_db(seq);
    let (loudest, max) = energy
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (t, e)| if e > best.1 { (t, e) } else { best });
    let threshold = max - offset_db;
    energy
        .iter()
        .enumerate()
        .map(|(t, &e)| t == loudest || e > threshold)
        .collect()
}
