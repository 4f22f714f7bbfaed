use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uttnet::features::{
    crop_or_extend, energy_vad, fbank, power_spectrum, sliding_cmn, synth_corpus, AudioClip, FbankConfig,
    FrameSequence, SynthConfig,
};

fn direct_dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
    (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            re * re + im * im
        })
        .collect()
}

#[test]
fn power_spectrum_matches_direct_dft_on_chirp() {
    let frame: Vec<f64> = (0..400)
        .map(|n| {
            let t = n as f64 / 16000.0;
            (2.0 * PI * (200.0 * t + 0.5 * 150_000.0 * t * t)).sin()
        })
        .collect();
    let fast = power_spectrum(&frame, 512);
    let slow = direct_dft_power(&frame, 512);
    assert_eq!(fast.len(), 257);
    for (k, (a, b)) in fast.iter().zip(&slow).enumerate() {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-9), "bin {k}: {a} vs {b}");
    }
}

#[test]
fn fbank_is_translation_covariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<f64> = (0..16000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cfg = FbankConfig::default();
    let full = fbank(&AudioClip::new(samples.clone(), 16000).unwrap(), &cfg).unwrap();
    for k in [1, 3, 7] {
        let shifted = fbank(&AudioClip::new(samples[k * 160..].to_vec(), 16000).unwrap(), &cfg).unwrap();
        assert_eq!(shifted.len(), full.len() - k);
        for t in 0..shifted.len() {
            for d in 0..cfg.n_mels {
                assert!((shifted.get(d, t) - full.get(d, t + k)).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn vad_matches_brute_force_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dim = 6;
    let frames: Vec<Vec<f32>> = (0..100)
        .map(|_| {
            let level = rng.random_range(-20.0..5.0);
            (0..dim).map(|_| level + rng.random_range(-1.0f32..1.0)).collect()
        })
        .collect();
    let seq = FrameSequence::from_frames(&frames).unwrap();
    let energy: Vec<f64> = frames
        .iter()
        .map(|f| 10.0 * f.iter().map(|&v| (v as f64).exp()).sum::<f64>().log10())
        .collect();
    let max = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for offset in [3.0, 10.0, 40.0] {
        let expected: Vec<bool> = energy.iter().map(|&e| e > max - offset || e == max).collect();
        assert_eq!(energy_vad(&seq, offset), expected, "offset {offset}");
    }
}

fn brute_cmn(seq: &FrameSequence, window: usize) -> Vec<f64> {
    let (left, right) = ((window - 1) / 2, window - 1 - (window - 1) / 2);
    let mut out = vec![0.0; seq.dim() * seq.len()];
    for d in 0..seq.dim() {
        for t in 0..seq.len() {
            let lo = t.saturating_sub(left);
            let hi = (t + right).min(seq.len() - 1);
            let mut sum = 0.0;
            for s in lo..=hi {
                sum += seq.get(d, s) as f64;
            }
            out[d * seq.len() + t] = seq.get(d, t) as f64 - sum / (hi - lo + 1) as f64;
        }
    }
    out
}

#[test]
fn cmn_matches_brute_force_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seq = FrameSequence::new(4, 10, (0..40).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    for window in [1, 2, 3, 4, 7, 30] {
        let out = sliding_cmn(&seq, window);
        for (a, b) in out.features().iter().zip(brute_cmn(&seq, window)) {
            assert!((*a as f64 - b).abs() < 1e-5, "window {window}");
        }
    }
}

#[test]
fn cmn_removes_linear_trends_where_window_is_symmetric() {
    let (len, window) = (40, 7);
    let features: Vec<f32> = (0..2 * len).map(|i| 0.25 * (i % len) as f32 - 3.0 * (i / len) as f32).collect();
    let seq = FrameSequence::new(2, len, features).unwrap();
    let out = sliding_cmn(&seq, window);
    let half = window / 2;
    for d in 0..2 {
        for t in half..len - half {
            assert!(out.get(d, t).abs() < 1e-5);
        }
    }
}

#[test]
fn long_crop_is_a_contiguous_slice() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frames: Vec<Vec<f32>> = (0..800).map(|t| vec![t as f32, (t * 7 % 13) as f32]).collect();
    let seq = FrameSequence::from_frames(&frames).unwrap();
    for _ in 0..20 {
        let out = crop_or_extend(&seq, 300, &mut rng);
        let first = out.frame(0);
        let start = (0..800).find(|&t| seq.frame(t) == first).unwrap();
        assert!(start + 300 <= 800);
        for t in 0..300 {
            assert_eq!(out.frame(t), seq.frame(start + t));
        }
    }
}

#[test]
fn nearest_class_mean_beats_chance_on_synthetic_corpus() {
    let cfg = SynthConfig { seed: 21, ..SynthConfig::default() };
    let corpus = synth_corpus(&cfg).unwrap();
    let pool = |s: &FrameSequence| -> Vec<f64> {
        (0..s.dim()).map(|d| (0..s.len()).map(|t| s.get(d, t) as f64).sum::<f64>() / s.len() as f64).collect()
    };
    let per = cfg.utts_per_class;
    let mut means = vec![vec![0.0; cfg.dim]; cfg.n_classes];
    for s in &corpus {
        let u: usize = s.utterance_id[6..].parse().unwrap();
        if u < per / 2 {
            for (m, v) in means[s.label.unwrap()].iter_mut().zip(pool(s)) {
                *m += v / (per / 2) as f64;
            }
        }
    }
    let (mut right, mut total) = (0, 0);
    for s in &corpus {
        let u: usize = s.utterance_id[6..].parse().unwrap();
        if u < per / 2 {
            continue;
        }
        let p = pool(s);
        let dist = |m: &Vec<f64>| m.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let guess = (0..cfg.n_classes).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
        right += usize::from(guess == s.label.unwrap());
        total += 1;
    }
    let acc = right as f64 / total as f64;
    assert!(acc > 1.0 / cfg.n_classes as f64, "accuracy {acc}");
}

#[test]
fn synthetic_lengths_stay_in_range() {
    let cfg = SynthConfig { min_len: 17, max_len: 40, seed: 8, ..SynthConfig::default() };
    for s in synth_corpus(&cfg).unwrap() {
        assert!((17..=40).contains(&s.len()));
    }
}

proptest! {
    #[test]
    fn crop_always_hits_target(len in 1usize..60, target in 1usize..120, seed in any::<u64>()) {
        let seq = FrameSequence::new(2, len, (0..2 * len).map(|i| i as f32).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(crop_or_extend(&seq, target, &mut rng).len(), target);
    }

    #[test]
    fn cmn_of_constant_is_zero(value in -50.0f32..50.0, len in 1usize..40, window in 1usize..50) {
        let seq = FrameSequence::new(3, len, vec![value; 3 * len]).unwrap();
        let out = sliding_cmn(&seq, window);
        prop_assert!(out.features().iter().all(|v| v.abs() < 1e-5));
    }
}
