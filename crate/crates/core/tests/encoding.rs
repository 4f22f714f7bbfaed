use ndtensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uttnet::encoding::{lde, lde_assignments, sap, sap_weights, tap, EncoderKind, LdeAggregation};
use uttnet::features::FrameSequence;
use uttnet::frontend::FrontendConfig;
use uttnet::model::{ModelConfig, Network};

/// `x[d][t]` as a `[1, D, L]` tensor.
fn seq_tensor(x: &[Vec<f64>]) -> Tensor<f64> {
    let (d, l) = (x.len(), x[0].len());
    Tensor::new(&[1, d, l], x.concat()).unwrap()
}

fn run_tap(x: &[Vec<f64>]) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(seq_tensor(x));
    let y = tap(&mut tape, v).unwrap();
    tape.value(y).data().to_vec()
}

struct Sap {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    u: Vec<f64>,
}

fn run_sap(x: &[Vec<f64>], p: &Sap) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let v = tape.constant(seq_tensor(x));
    let w = tape.constant(Tensor::new(&[p.w.len(), p.w[0].len()], p.w.concat()).unwrap());
    let b = tape.constant(Tensor::new(&[p.b.len()], p.b.clone()).unwrap());
    let u = tape.constant(Tensor::new(&[p.u.len()], p.u.clone()).unwrap());
    let weights = sap_weights(&mut tape, v, w, b, u).unwrap();
    let y = sap(&mut tape, v, w, b, u).unwrap();
    (tape.value(y).data().to_vec(), tape.value(weights).data().to_vec())
}

struct Lde {
    mu: Vec<Vec<f64>>,
    s: Vec<f64>,
}

fn run_lde(x: &[Vec<f64>], p: &Lde, agg: LdeAggregation) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let v = tape.constant(seq_tensor(x));
    let mu = tape.constant(Tensor::new(&[p.mu.len(), p.mu[0].len()], p.mu.concat()).unwrap());
    let s = tape.constant(Tensor::new(&[p.s.len()], p.s.clone()).unwrap());
    let (_, w) = lde_assignments(&mut tape, v, mu, s).unwrap();
    let y = lde(&mut tape, v, mu, s, agg).unwrap();
    (tape.value(y).data().to_vec(), tape.value(w).data().to_vec())
}

fn sap_oracle(x: &[Vec<f64>], p: &Sap) -> Vec<f64> {
    let (d, l) = (x.len(), x[0].len());
    let scores: Vec<f64> = (0..l)
        .map(|t| {
            let h: Vec<f64> = (0..p.b.len())
                .map(|k| ((0..d).map(|j| p.w[k][j] * x[j][t]).sum::<f64>() + p.b[k]).tanh())
                .collect();
            h.iter().zip(&p.u).map(|(a, b)| a * b).sum()
        })
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let w: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
    (0..d).map(|j| (0..l).map(|t| w[t] * x[j][t]).sum()).collect()
}

fn lde_oracle(x: &[Vec<f64>], p: &Lde, agg: LdeAggregation) -> Vec<f64> {
    let (d, l, c) = (x.len(), x[0].len(), p.s.len());
    let mut e = vec![0.0; c * d];
    let mut mass = vec![0.0; c];
    for t in 0..l {
        let dist: Vec<f64> = (0..c)
            .map(|k| (0..d).map(|j| (x[j][t] - p.mu[k][j]).powi(2)).sum())
            .collect();
        let z: f64 = (0..c).map(|k| (-p.s[k] * dist[k]).exp()).sum();
        for k in 0..c {
            let w = (-p.s[k] * dist[k]).exp() / z;
            mass[k] += w;
            for j in 0..d {
                e[k * d + j] += w * (x[j][t] - p.mu[k][j]);
            }
        }
    }
    for k in 0..c {
        let denom = match agg {
            LdeAggregation::Length => l as f64,
            LdeAggregation::Weight => mass[k],
        };
        for j in 0..d {
            e[k * d + j] /= denom;
        }
    }
    e
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

#[test]
fn tap_examples() {
    assert!(close(&run_tap(&[vec![1.0, 2.0, 3.0, 6.0]]), &[3.0], 1e-12));
    let x = vec![vec![0.5; 6], vec![-2.0; 6]];
    assert!(close(&run_tap(&x), &[0.5, -2.0], 1e-12));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_matrix(5, 7, &mut rng);
    let direct: Vec<f64> = x.iter().map(|row| row.iter().sum::<f64>() / 7.0).collect();
    assert!(close(&run_tap(&x), &direct, 1e-7));
}

#[test]
fn sap_matches_three_step_oracle() {
    let x = vec![vec![1.0, -0.5, 2.0], vec![0.3, 0.8, -1.2]];
    let p = Sap {
        w: vec![vec![0.5, -1.0], vec![0.25, 0.75]],
        b: vec![0.1, -0.2],
        u: vec![1.5, -0.7],
    };
    let (y, w) = run_sap(&x, &p);
    assert!(close(&y, &sap_oracle(&x, &p), 1e-12));
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn sap_with_zero_context_is_tap() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_matrix(4, 9, &mut rng);
    let p = Sap { w: random_matrix(3, 4, &mut rng), b: vec![0.2, 0.0, -0.1], u: vec![0.0; 3] };
    assert!(close(&run_sap(&x, &p).0, &run_tap(&x), 1e-6));
}

#[test]
fn sap_on_one_frame_returns_it() {
    let x = vec![vec![1.25], vec![-3.0]];
    let p = Sap { w: vec![vec![1.0, 2.0]], b: vec![0.5], u: vec![4.0] };
    assert!(close(&run_sap(&x, &p).0, &[1.25, -3.0], 1e-12));
}

#[test]
fn lde_matches_explicit_loops() {
    let x = vec![vec![0.2, -1.0, 0.7], vec![1.1, 0.4, -0.3]];
    let p = Lde { mu: vec![vec![0.0, 0.5], vec![-0.5, -0.5]], s: vec![1.3, 0.6] };
    for agg in [LdeAggregation::Length, LdeAggregation::Weight] {
        assert!(close(&run_lde(&x, &p, agg).0, &lde_oracle(&x, &p, agg), 1e-12));
    }
}

#[test]
fn lde_with_one_component_is_mean_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_matrix(3, 8, &mut rng);
    let mu = vec![0.4, -0.2, 1.0];
    let p = Lde { mu: vec![mu.clone()], s: vec![0.7] };
    let (y, w) = run_lde(&x, &p, LdeAggregation::Length);
    let expected: Vec<f64> = (0..3).map(|j| x[j].iter().map(|v| v - mu[j]).sum::<f64>() / 8.0).collect();
    assert!(close(&y, &expected, 1e-6));
    assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn lde_component_at_the_frames_is_zero() {
    let mu1 = vec![0.3, -0.8];
    let x = vec![vec![0.3; 5], vec![-0.8; 5]];
    let p = Lde { mu: vec![mu1, vec![1.0, 1.0]], s: vec![1.0, 1.0] };
    let (y, _) = run_lde(&x, &p, LdeAggregation::Length);
    assert_eq!(&y[..2], &[0.0, 0.0]);
    assert!(y[2..].iter().any(|&v| v != 0.0));
}

#[test]
fn embedding_is_128_wide_at_any_length() {
    let model = ModelConfig {
        frontend: FrontendConfig { width_multiplier: 0.25, ..FrontendConfig::default() },
        encoder: EncoderKind::Lde,
        n_classes: 4,
        ..ModelConfig::default()
    };
    let net = Network::<f32>::new(&model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for len in [8, 300, 800] {
        let seq = FrameSequence::new(64, len, (0..64 * len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let e = net.embed(&seq).unwrap();
        assert_eq!(e.len(), 128);
        assert_eq!(e, net.embed(&seq).unwrap());
    }
}

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, u64)> {
    (1usize..5, 1usize..10).prop_flat_map(|(d, l)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, l), d),
            Just((0..l).collect::<Vec<usize>>()).prop_shuffle(),
            any::<u64>(),
        )
    })
}

fn permute(x: &[Vec<f64>], order: &[usize]) -> Vec<Vec<f64>> {
    x.iter().map(|row| order.iter().map(|&t| row[t]).collect()).collect()
}

fn duplicate(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter().map(|row| [row.as_slice(), row.as_slice()].concat()).collect()
}

fn random_sap(d: usize, seed: u64) -> Sap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 3;
    Sap {
        w: random_matrix(h, d, &mut rng),
        b: (0..h).map(|_| rng.random_range(-1.0..1.0)).collect(),
        u: (0..h).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

fn random_lde(d: usize, seed: u64) -> Lde {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Lde { mu: random_matrix(3, d, &mut rng), s: (0..3).map(|_| rng.random_range(0.1..2.0)).collect() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pooling_ignores_frame_order((x, order, seed) in instance()) {
        let px = permute(&x, &order);
        prop_assert!(close(&run_tap(&x), &run_tap(&px), 1e-6));
        let sp = random_sap(x.len(), seed);
        prop_assert!(close(&run_sap(&x, &sp).0, &run_sap(&px, &sp).0, 1e-6));
        let lp = random_lde(x.len(), seed);
        for agg in [LdeAggregation::Length, LdeAggregation::Weight] {
            prop_assert!(close(&run_lde(&x, &lp, agg).0, &run_lde(&px, &lp, agg).0, 1e-6));
        }
    }

    #[test]
    fn pooling_ignores_duplication((x, _, seed) in instance()) {
        let dx = duplicate(&x);
        prop_assert!(close(&run_tap(&x), &run_tap(&dx), 1e-6));
        let sp = random_sap(x.len(), seed);
        prop_assert!(close(&run_sap(&x, &sp).0, &run_sap(&dx, &sp).0, 1e-6));
        let lp = random_lde(x.len(), seed);
        prop_assert!(close(&run_lde(&x, &lp, LdeAggregation::Length).0, &run_lde(&dx, &lp, LdeAggregation::Length).0, 1e-6));
    }

    #[test]
    fn attention_weights_are_a_distribution((x, _, seed) in instance()) {
        let (_, w) = run_sap(&x, &random_sap(x.len(), seed));
        prop_assert!(w.iter().all(|&v| v > 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let (_, a) = run_lde(&x, &random_lde(x.len(), seed), LdeAggregation::Length);
        for frame in a.chunks(3) {
            prop_assert!((frame.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sap_and_lde_match_loop_oracles((x, _, seed) in instance()) {
        let sp = random_sap(x.len(), seed);
        prop_assert!(close(&run_sap(&x, &sp).0, &sap_oracle(&x, &sp), 1e-9));
        let lp = random_lde(x.len(), seed);
        for agg in [LdeAggregation::Length, LdeAggregation::Weight] {
            prop_assert!(close(&run_lde(&x, &lp, agg).0, &lde_oracle(&x, &lp, agg), 1e-9));
        }
    }
}
