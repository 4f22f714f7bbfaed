use super::FrameSequence;

/// Subtracts from each frame the mean of a centred window of `window`
/// frames (truncated at the edges), per coefficient. The window spans
/// `(window - 1) / 2` frames to the left and the remainder to the right.
pub fn sliding_cmn(seq: &FrameSequence, window: usize) -> FrameSequence {
    let window = window.max(1);
    let (dim, len) = (seq.dim(), seq.len());
    let left = (window - 1) / 2;
    let right = window - 1 - left;
    let mut out = vec![0.0f32; dim * len];
    let mut prefix = vec![0.0f64; len + 1];
    for d in 0..dim {
        for t in 0..len {
            prefix[t + 1] = prefix[t] + seq.get(d, t) as f64;
        }
        for t in 0..len {
            let lo = t.saturating_sub(left);
            let hi = (t + right).min(len - 1);
            let mean = (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64;
            out[d * len + t] = (seq.get(d, t) as f64 - mean) as f32;
        }
    }
    let mut normed = FrameSequence::new(dim, len, out).expect("shape preserved");
    normed.utterance_id = seq.utterance_id.clone();
    normed.label = seq.label;
    normed
}
