use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use uttnet::evalkit::{
    cavg, cosine_score, det_points, eer, evaluate, format_scores, min_cdet, parse_scores, parse_trials,
    run_verification, topk_accuracy, CostParams, Trial,
};
use uttnet::features::{synth_corpus, SynthConfig};
use uttnet::frontend::FrontendConfig;
use uttnet::model::{ModelConfig, Network};

fn random_trials(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let t = i % 3 == 0 || rng.random_bool(0.2);
        // Coarse values so that ties occur.
        let shift = if t { 0.4 } else { 0.0 };
        let s = ((rng.random_range(-1.0..1.0) + shift) * 100.0f64).round() / 100.0;
        scores.push(s);
        targets.push(t);
    }
    (scores, targets)
}

/// Rates at threshold `t` by a full scan.
fn rates_at(scores: &[f64], targets: &[bool], t: f64) -> (f64, f64) {
    let nt = targets.iter().filter(|&&x| x).count() as f64;
    let nn = targets.len() as f64 - nt;
    let miss = scores.iter().zip(targets).filter(|(&s, &y)| y && s < t).count() as f64;
    let fa = scores.iter().zip(targets).filter(|(&s, &y)| !y && s >= t).count() as f64;
    (miss / nt, fa / nn)
}

fn brute_sweep(scores: &[f64], targets: &[bool]) -> Vec<(f64, f64, f64)> {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    thresholds
        .into_iter()
        .map(|t| {
            let (m, f) = rates_at(scores, targets, t);
            (t, m, f)
        })
        .collect()
}

fn brute_eer(scores: &[f64], targets: &[bool]) -> f64 {
    let sweep = brute_sweep(scores, targets);
    for w in sweep.windows(2) {
        let (d0, d1) = (w[0].1 - w[0].2, w[1].1 - w[1].2);
        if d0 == 0.0 {
            return w[0].1;
        }
        if d0 < 0.0 && d1 >= 0.0 {
            return w[0].1 + d0 / (d0 - d1) * (w[1].1 - w[0].1);
        }
    }
    panic!("no crossing")
}

#[test]
fn eer_and_cost_match_brute_force_sweep() {
    let (scores, targets) = random_trials(1000, 1);
    let points = det_points(&scores, &targets).unwrap();
    let sweep = brute_sweep(&scores, &targets);
    assert_eq!(points.len(), sweep.len());
    for (p, (t, m, f)) in points.iter().zip(&sweep) {
        assert_eq!((p.threshold, p.p_miss, p.p_fa), (*t, *m, *f));
    }
    assert!((eer(&scores, &targets).unwrap() - brute_eer(&scores, &targets)).abs() < 1e-12);

    for params in [CostParams::default(), CostParams { p_target: 0.3, c_miss: 2.0, c_fa: 0.5 }] {
        let norm = (params.c_miss * params.p_target).min(params.c_fa * (1.0 - params.p_target));
        let expected = sweep
            .iter()
            .map(|(_, m, f)| params.c_miss * m * params.p_target + params.c_fa * f * (1.0 - params.p_target))
            .fold(f64::INFINITY, f64::min)
            / norm;
        assert!((min_cdet(&scores, &targets, &params).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn identical_distributions_give_half_eer() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let scores: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
    let targets: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
    let e = eer(&scores, &targets).unwrap();
    assert!((e - 0.5).abs() <= 0.05, "EER {e}");
}

#[test]
fn single_class_trials_are_rejected() {
    assert!(eer(&[0.1, 0.2], &[true, true]).is_err());
    assert!(min_cdet(&[0.1, 0.2], &[false, false], &CostParams::default()).is_err());
}

#[test]
fn cosine_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let a: Vec<f32> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((cosine_score(&a, &b).unwrap() - dot / (na * nb)).abs() < 1e-7);
    }
}

fn cavg_loop(scores: &[Vec<f64>], truth: &[usize]) -> f64 {
    let n = scores[0].len();
    let mut total = 0.0;
    for lt in 0..n {
        let own: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == lt).collect();
        let p_miss = own.iter().filter(|&&i| scores[i][lt] < 0.0).count() as f64 / own.len() as f64;
        let mut fa_sum = 0.0;
        for ln in (0..n).filter(|&l| l != lt) {
            let other: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == ln).collect();
            fa_sum += other.iter().filter(|&&i| scores[i][lt] >= 0.0).count() as f64 / other.len() as f64;
        }
        total += 0.5 * p_miss + 0.5 * fa_sum / (n - 1) as f64;
    }
    total / n as f64
}

#[test]
fn cavg_matches_loop_oracle_for_fourteen_languages() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth: Vec<usize> = (0..280).map(|i| i % 14).collect();
    let scores: Vec<Vec<f64>> = truth
        .iter()
        .map(|&y| (0..14).map(|l| rng.random_range(-2.0..1.0) + if l == y { 1.5 } else { 0.0 }).collect())
        .collect();
    assert!((cavg(&scores, &truth).unwrap() - cavg_loop(&scores, &truth)).abs() < 1e-12);
}

#[test]
fn cavg_edge_cases() {
    let truth = [0, 1, 2];
    let oracle: Vec<Vec<f64>> = truth.iter().map(|&y| (0..3).map(|l| if l == y { 2.0 } else { -2.0 }).collect()).collect();
    assert_eq!(cavg(&oracle, &truth).unwrap(), 0.0);
    let zeros = vec![vec![0.0; 2]; 4];
    assert!((cavg(&zeros, &[0, 1, 0, 1]).unwrap() - 0.5).abs() < 1e-15);
    assert!(cavg(&[vec![0.0, 1.0], vec![1.0]], &[0, 1]).is_err());
}

fn topk_sort(scores: &[Vec<f64>], truth: &[usize], k: usize) -> f64 {
    let hits = scores
        .iter()
        .zip(truth)
        .filter(|(row, &y)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order[..k].contains(&y)
        })
        .count();
    hits as f64 / truth.len() as f64
}

#[test]
fn topk_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores: Vec<Vec<f64>> = (0..50).map(|_| (0..8).map(|_| rng.random_range(0..6) as f64).collect()).collect();
    let truth: Vec<usize> = (0..50).map(|_| rng.random_range(0..8)).collect();
    let mut last = 0.0;
    for k in 1..=8 {
        let acc = topk_accuracy(&scores, &truth, k).unwrap();
        assert_eq!(acc, topk_sort(&scores, &truth, k), "k = {k}");
        assert!(acc >= last);
        last = acc;
    }
    assert_eq!(last, 1.0);
    assert!(topk_accuracy(&scores, &truth, 0).is_err());
}

#[test]
fn score_files_round_trip() {
    let trials = parse_trials("1 a b\n0 a c\n").unwrap();
    let text = format_scores(&trials, &[0.25, -0.125]);
    assert_eq!(text, "a b 0.250000\na c -0.125000\n");
    assert_eq!(parse_scores(&text, &trials).unwrap(), vec![0.25, -0.125]);
    let (report, points) = evaluate(&[0.25, -0.125], &trials, &CostParams::default()).unwrap();
    assert_eq!((report.eer, report.n_trials, report.n_target), (0.0, 2, 1));
    assert_eq!(points.last().unwrap().p_miss, 1.0);
}

#[test]
fn verification_of_self_pairs_is_perfect_and_repeatable() {
    let corpus = synth_corpus(&SynthConfig { n_classes: 3, utts_per_class: 2, min_len: 30, max_len: 60, ..SynthConfig::default() })
        .unwrap();
    let model = ModelConfig {
        frontend: FrontendConfig { width_multiplier: 0.25, ..FrontendConfig::default() },
        n_classes: 3,
        ..ModelConfig::default()
    };
    let net = Network::<f32>::new(&model).unwrap();
    let mut trials: Vec<Trial> = corpus
        .iter()
        .map(|s| Trial { enroll: s.utterance_id.clone(), test: s.utterance_id.clone(), target: true })
        .collect();
    let lookup = |id: &str| {
        corpus
            .iter()
            .find(|s| s.utterance_id == id)
            .cloned()
            .ok_or_else(|| uttnet::Error::MissingUtterance(id.to_string()))
    };
    trials.push(Trial { enroll: corpus[0].utterance_id.clone(), test: corpus[5].utterance_id.clone(), target: false });
    let (scores, report, _) = run_verification(&net, &trials, lookup, &CostParams::default(), 2).unwrap();
    assert!(scores[..corpus.len()].iter().all(|&s| s == 1.0));
    assert_eq!(report.eer, 0.0);
    let (again, report2, _) = run_verification(&net, &trials, lookup, &CostParams::default(), 1).unwrap();
    assert_eq!(scores, again);
    assert_eq!(report.eer, report2.eer);

    trials.push(Trial { enroll: "nobody".into(), test: corpus[0].utterance_id.clone(), target: false });
    let err = run_verification(&net, &trials, lookup, &CostParams::default(), 1).unwrap_err();
    assert!(err.to_string().contains("nobody"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_increasing_transforms(seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let (scores, targets) = random_trials(200, seed);
        let moved: Vec<f64> = scores.iter().map(|s| (scale * s + shift).exp()).collect();
        prop_assert!((eer(&scores, &targets).unwrap() - eer(&moved, &targets).unwrap()).abs() < 1e-12);
        let p = CostParams::default();
        prop_assert!((min_cdet(&scores, &targets, &p).unwrap() - min_cdet(&moved, &targets, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn eer_stays_in_range(seed in any::<u64>()) {
        let (scores, targets) = random_trials(100, seed);
        let e = eer(&scores, &targets).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn cosine_ignores_positive_scaling(
        a in proptest::collection::vec(-5.0f64..5.0, 8),
        b in proptest::collection::vec(-5.0f64..5.0, 8),
        ka in 0.01f64..100.0,
        kb in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let sa: Vec<f64> = a.iter().map(|v| v * ka).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * kb).collect();
        prop_assert!((cosine_score(&a, &b).unwrap() - cosine_score(&sa, &sb).unwrap()).abs() < 1e-12);
    }
}
