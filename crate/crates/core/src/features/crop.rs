use rand::Rng;

use super::FrameSequence;

/// Length-normalises a sequence to `target_len` frames: a uniformly random
/// contiguous window when longer, cyclic repetition when shorter.
pub fn crop_or_extend(seq: &FrameSequence, target_len: usize, rng: &mut impl Rng) -> FrameSequence {
    let len = seq.len();
    let target_len = target_len.max(1);
    let frames: Vec<usize> = if len > target_len {
        let start = rng.random_range(0..=len - target_len);
        (start..start + target_len).collect()
    } else {
        (0..target_len).map(|t| t % len).collect()
    };
    seq.gather(&frames).expect("non-empty selection")
}
