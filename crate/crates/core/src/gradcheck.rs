//! Finite-difference checks of every layer and loss at f64.

use ndtensor::{Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoding::{self, EncoderKind, LdeAggregation};
use crate::error::Result;
use crate::frontend::{conv2d, BatchNorm, FrontendConfig};
use crate::losses::{self, LossKind, MarginConfig};
use crate::model::{ModelConfig, Network};
use crate::params::{Mode, ParamKind, ParamStore, Session};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor, so that gradients which are zero up to rounding do
/// not count as relative failures.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub component: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// `sum(v * R)` for a fixed random `R`, turning any output into a scalar
/// whose gradient exercises every element. The stream is offset from the
/// one that drew the inputs so that `R` is not correlated with them.
fn project(s: &mut Session<'_, f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ca1e);
    let r = randn(s.tape.shape(v), &mut rng);
    let r = s.constant(r);
    let p = s.tape.mul(v, r)?;
    Ok(s.tape.sum_all(p))
}

fn loss_value<F>(store: &mut ParamStore<f64>, build: &F) -> Result<f64>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let mut s = Session::new(store, Mode::Train);
    let l = build(&mut s)?;
    Ok(s.tape.value(l).item()?)
}

/// Compares backward gradients of every learnable parameter in `store`
/// against central differences, at up to `per_param` coordinates each.
pub fn check_store<F>(
    component: &str,
    store: &mut ParamStore<f64>,
    per_param: usize,
    seed: u64,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    store.zero_grad();
    {
        let mut s = Session::new(store, Mode::Train);
        let l = build(&mut s)?;
        s.backward(l)?;
    }
    let analytic: Vec<Option<Vec<f64>>> =
        store.iter().map(|(_, p)| p.tensor.grad().map(<[f64]>::to_vec)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut coords) = (0.0f64, 0);
    for (index, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let n = grad.len();
        let picks: Vec<usize> = if n <= per_param { (0..n).collect() } else { sample(&mut rng, n, per_param).into_vec() };
        for i in picks {
            let original = param_value(store, index, i);
            set_param_value(store, index, i, original + STEP);
            let up = loss_value(store, &build)?;
            set_param_value(store, index, i, original - STEP);
            let down = loss_value(store, &build)?;
            set_param_value(store, index, i, original);
            let numeric = (up - down) / (2.0 * STEP);
            let denom = grad[i].abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((grad[i] - numeric).abs() / denom);
            coords += 1;
        }
    }
    Ok(GradReport { component: component.to_string(), max_rel_err: worst, coords })
}

fn param_value(store: &ParamStore<f64>, index: usize, i: usize) -> f64 {
    store.iter().nth(index).expect("parameter index").1.tensor.data()[i]
}

fn set_param_value(store: &mut ParamStore<f64>, index: usize, i: usize, v: f64) {
    store.iter_mut().nth(index).expect("parameter index").tensor.data_mut()[i] = v;
}

fn conv(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = store.add("x", randn(&[2, 2, 5, 6], &mut rng), ParamKind::NoDecay);
    let w = store.add("w", randn(&[3, 2, 3, 3], &mut rng), ParamKind::Weight);
    check_store("conv", &mut store, 40, seed, |s| {
        let (x, w) = (s.param(x), s.param(w));
        let y = conv2d(&mut s.tape, x, w, 2, 1)?;
        project(s, y, seed)
    })
}

fn batch_norm(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = store.add("x", randn(&[3, 2, 3, 4], &mut rng), ParamKind::NoDecay);
    let bn = BatchNorm::new(&mut store, "bn", 2);
    bn.jitter(&mut store, &mut rng);
    check_store("batch_norm", &mut store, 40, seed, |s| {
        let x = s.param(x);
        let y = bn.forward(s, x)?;
        project(s, y, seed)
    })
}

fn encoder(kind: EncoderKind, agg: LdeAggregation, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (d, l, h, c) = (3, 5, 4, 3);
    let x = store.add("x", randn(&[2, d, l], &mut rng), ParamKind::NoDecay);
    let name = match (kind, agg) {
        (EncoderKind::Tap, _) => "tap",
        (EncoderKind::Sap, _) => "sap",
        (EncoderKind::Lde, LdeAggregation::Length) => "lde",
        (EncoderKind::Lde, LdeAggregation::Weight) => "lde_weight",
    };
    match kind {
        EncoderKind::Tap => check_store(name, &mut store, 40, seed, |s| {
            let x = s.param(x);
            let y = encoding::tap(&mut s.tape, x)?;
            project(s, y, seed)
        }),
        EncoderKind::Sap => {
            let w = store.add("w", randn(&[h, d], &mut rng), ParamKind::Weight);
            let b = store.add("b", randn(&[h], &mut rng), ParamKind::NoDecay);
            let u = store.add("u", randn(&[h], &mut rng), ParamKind::NoDecay);
            check_store(name, &mut store, 40, seed, |s| {
                let (x, w, b, u) = (s.param(x), s.param(w), s.param(b), s.param(u));
                let y = encoding::sap(&mut s.tape, x, w, b, u)?;
                project(s, y, seed)
            })
        }
        EncoderKind::Lde => {
            let mu = store.add("mu", randn(&[c, d], &mut rng), ParamKind::NoDecay);
            let sm = store.add(
                "s",
                Tensor::from_fn(&[c], |_| rng.random_range(0.3..1.5)),
                ParamKind::NoDecay,
            );
            check_store(name, &mut store, 40, seed, |s| {
                let (x, mu, sm) = (s.param(x), s.param(mu), s.param(sm));
                let y = encoding::lde(&mut s.tape, x, mu, sm, agg)?;
                project(s, y, seed)
            })
        }
    }
}

fn classifier_store(seed: u64, bias: bool) -> (ParamStore<f64>, [Option<crate::params::ParamId>; 3], Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, e, c) = (4, 5, 3);
    let mut store = ParamStore::new();
    let f = store.add("f", randn(&[m, e], &mut rng), ParamKind::NoDecay);
    let w = store.add("w", randn(&[e, c], &mut rng), ParamKind::Weight);
    let b = bias.then(|| store.add("b", randn(&[c], &mut rng), ParamKind::NoDecay));
    let labels = (0..m).map(|_| rng.random_range(0..c)).collect();
    (store, [Some(f), Some(w), b], labels)
}

fn softmax(seed: u64) -> Result<GradReport> {
    let (mut store, [f, w, b], labels) = classifier_store(seed, true);
    check_store("softmax", &mut store, 40, seed, |s| {
        let (f, w, b) = (s.param(f.unwrap()), s.param(w.unwrap()), b.map(|b| s.param(b)));
        losses::softmax_loss(&mut s.tape, f, w, b, &labels)
    })
}

fn center(seed: u64) -> Result<GradReport> {
    let (mut store, [f, w, b], labels) = classifier_store(seed, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc3);
    let centers = randn(&[3, 5], &mut rng);
    check_store("center", &mut store, 40, seed, |s| {
        let (f, w, b) = (s.param(f.unwrap()), s.param(w.unwrap()), b.map(|b| s.param(b)));
        losses::center_loss(&mut s.tape, f, w, b, &centers, &labels, 0.001)
    })
}

/// Smallest distance of any target angle from a margin segment boundary,
/// in units of `pi / m`.
fn boundary_gap(store: &ParamStore<f64>, labels: &[usize], m: u32) -> f64 {
    let mut iter = store.iter();
    let f = iter.next().unwrap().1.tensor.clone();
    let w = iter.next().unwrap().1.tensor.clone();
    let (&[rows, e], &[_, c]) = (f.shape(), w.shape()) else { unreachable!() };
    let mut gap = f64::INFINITY;
    for (i, &y) in labels.iter().enumerate().take(rows) {
        let fi = &f.data()[i * e..(i + 1) * e];
        let wy: Vec<f64> = (0..e).map(|k| w.data()[k * c + y]).collect();
        let dot: f64 = fi.iter().zip(&wy).map(|(a, b)| a * b).sum();
        let nf = fi.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nw = wy.iter().map(|a| a * a).sum::<f64>().sqrt();
        let t = (dot / (nf * nw)).clamp(-1.0, 1.0).acos() * m as f64 / std::f64::consts::PI;
        gap = gap.min((t - t.round()).abs());
    }
    gap
}

fn asoftmax(m: u32, seed: u64) -> Result<GradReport> {
    // Resample until every target angle sits clearly inside a segment.
    let mut attempt = seed;
    let (mut store, [f, w, _], labels) = loop {
        let candidate = classifier_store(attempt, false);
        if boundary_gap(&candidate.0, &candidate.2, m) > 0.02 {
            break candidate;
        }
        attempt += 1000;
    };
    check_store(&format!("asoftmax_m{m}"), &mut store, 40, seed, |s| {
        let (f, w) = (s.param(f.unwrap()), s.param(w.unwrap()));
        losses::asoftmax_loss(&mut s.tape, f, w, &labels, m, None)
    })
}

fn pipeline(encoder: EncoderKind, loss: LossKind, seed: u64) -> Result<GradReport> {
    let cfg = ModelConfig {
        frontend: FrontendConfig {
            base_channels: 2,
            blocks_per_stage: vec![1, 1, 1, 1],
            input_mels: 8,
            width_multiplier: 1.0,
        },
        encoder,
        lde_components: 3,
        embedding_dim: 4,
        n_classes: 3,
        loss,
        margin: MarginConfig { m: 2, anneal: None },
        seed,
        ..ModelConfig::default()
    };
    let mut net = Network::<f64>::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for bn in net.layers.frontend().batch_norms() {
        bn.jitter(&mut net.store, &mut rng);
    }
    if let Some(id) = net.layers.centers() {
        let c = randn(net.store.get(id).shape(), &mut rng);
        *net.store.get_mut(id) = c;
    }
    let input = randn(&[3, 1, 8, 9], &mut rng);
    let labels = vec![0, 2, 1];
    let name = format!("pipeline_{}_{}", format!("{encoder:?}").to_lowercase(), format!("{loss:?}").to_lowercase());
    let layers = net.layers.clone();
    check_store(&name, &mut net.store, 6, seed, |s| {
        let x = s.constant(input.clone());
        let emb = layers.embed_batch(s, x)?;
        layers.loss(s, emb, &labels, None)
    })
}

/// Runs every component check. Takes well under a minute in release-like
/// builds.
pub fn run_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut out = vec![
        conv(seed)?,
        batch_norm(seed)?,
        encoder(EncoderKind::Tap, LdeAggregation::Length, seed)?,
        encoder(EncoderKind::Sap, LdeAggregation::Length, seed)?,
        encoder(EncoderKind::Lde, LdeAggregation::Length, seed)?,
        encoder(EncoderKind::Lde, LdeAggregation::Weight, seed)?,
        softmax(seed)?,
        center(seed)?,
    ];
    for m in 1..=4 {
        out.push(asoftmax(m, seed)?);
    }
    out.push(pipeline(EncoderKind::Tap, LossKind::Softmax, seed)?);
    out.push(pipeline(EncoderKind::Sap, LossKind::Center, seed)?);
    out.push(pipeline(EncoderKind::Lde, LossKind::Asoftmax, seed)?);
    Ok(out)
}
