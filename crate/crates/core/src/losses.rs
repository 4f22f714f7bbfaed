//! Utterance-level training objectives over a batch of embeddings `f`
//! (`[M, E]`) and a classifier head `W` (`[E, C]`), `b` (`[C]`).

use std::f64::consts::PI;

use ndtensor::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Softmax,
    Center,
    Asoftmax,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "softmax" => Ok(LossKind::Softmax),
            "center" | "centerloss" => Ok(LossKind::Center),
            "asoftmax" => Ok(LossKind::Asoftmax),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (softmax, center, asoftmax)"
            ))),
        }
    }
}

/// Multiplicative decay of the A-Softmax blending factor:
/// `lambda(step) = max(floor, start * decay^step)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub start: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            start: 1000.0,
            decay: 0.99,
            floor: 5.0,
        }
    }
}

impl AnnealSchedule {
    pub fn lambda(&self, step: u64) -> f64 {
        (self.start * self.decay.powf(step as f64)).max(self.floor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginConfig {
    pub m: u32,
    pub anneal: Option<AnnealSchedule>,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            m: 4,
            anneal: Some(AnnealSchedule::default()),
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.m) {
            return Err(Error::Config(format!("margin m = {} outside 1..=4", self.m)));
        }
        if let Some(a) = &self.anneal {
            if !(a.start >= a.floor && a.floor >= 0.0 && a.decay > 0.0 && a.decay <= 1.0) {
                return Err(Error::Config(format!("invalid anneal schedule {a:?}")));
            }
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if batch == 0 {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    if labels.len() != batch {
        return Err(Error::Degenerate(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

fn batch_and_classes<T: Real>(tape: &Tape<T>, f: Var, w: Var) -> Result<(usize, usize)> {
    match (tape.shape(f), tape.shape(w)) {
        (&[m, e], &[e2, c]) if e == e2 => Ok((m, c)),
        (fs, ws) => Err(Error::Degenerate(format!(
            "embeddings {fs:?} do not fit head {ws:?}"
        ))),
    }
}

/// Mean negative log-likelihood of the labels under `softmax(logits)`.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(ls, labels)?;
    let mean = tape.mean_all(picked);
    Ok(tape.neg(mean))
}

/// `f W + b`.
pub fn linear_logits<T: Real>(tape: &mut Tape<T>, f: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let z = tape.matmul(f, w)?;
    Ok(match b {
        Some(b) => tape.add(z, b)?,
        None => z,
    })
}

/// Softmax cross-entropy of a linear classifier.
pub fn softmax_loss<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    w: Var,
    b: Option<Var>,
    labels: &[usize],
) -> Result<Var> {
    let (m, c) = batch_and_classes(tape, f, w)?;
    check_labels(labels, m, c)?;
    let logits = linear_logits(tape, f, w, b)?;
    cross_entropy(tape, logits, labels)
}

/// Softmax loss plus `lambda / 2 * sum_i |f_i - c_{y_i}|^2`. Centers are
/// constants here; they move only through [`step_centers`].
pub fn center_loss<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    w: Var,
    b: Option<Var>,
    centers: &Tensor<T>,
    labels: &[usize],
    lambda: T,
) -> Result<Var> {
    let softmax = softmax_loss(tape, f, w, b, labels)?;
    let pull = center_term(tape, f, centers, labels)?;
    let pull = tape.scale(pull, lambda * T::of(0.5));
    Ok(tape.add(softmax, pull)?)
}

/// `sum_i |f_i - c_{y_i}|^2`.
pub fn center_term<T: Real>(tape: &mut Tape<T>, f: Var, centers: &Tensor<T>, labels: &[usize]) -> Result<Var> {
    let &[m, e] = tape.shape(f) else {
        return Err(Error::Degenerate(format!("embeddings of shape {:?}", tape.shape(f))));
    };
    let &[classes, e2] = centers.shape() else {
        return Err(Error::Degenerate(format!("centers of shape {:?}", centers.shape())));
    };
    if e != e2 {
        return Err(Error::Degenerate(format!("{e}-dim embeddings vs {e2}-dim centers")));
    }
    check_labels(labels, m, classes)?;
    let gathered = Tensor::from_fn(&[m, e], |i| centers.data()[labels[i / e] * e + i % e]);
    let c = tape.constant(gathered);
    let diff = tape.sub(f, c)?;
    let sq = tape.square(diff);
    Ok(tape.sum_all(sq))
}

/// Center update: `c_j -= alpha * sum_{i: y_i = j} (c_j - f_i) / (1 + n_j)`.
/// Classes absent from the batch are untouched.
pub fn step_centers<T: Real>(centers: &mut Tensor<T>, f: &Tensor<T>, labels: &[usize], alpha: T) -> Result<()> {
    let (&[classes, e], &[m, e2]) = (centers.shape(), f.shape()) else {
        return Err(Error::Degenerate("centers and embeddings must be matrices".into()));
    };
    if e != e2 {
        return Err(Error::Degenerate(format!("{e}-dim centers vs {e2}-dim embeddings")));
    }
    check_labels(labels, m, classes)?;
    let mut delta = vec![T::zero(); classes * e];
    let mut count = vec![0usize; classes];
    let (c, fv) = (centers.data(), f.data());
    for (i, &y) in labels.iter().enumerate() {
        count[y] += 1;
        for k in 0..e {
            delta[y * e + k] += c[y * e + k] - fv[i * e + k];
        }
    }
    let c = centers.data_mut();
    for j in 0..classes {
        if count[j] == 0 {
            continue;
        }
        let scale = alpha / T::of((1 + count[j]) as f64);
        for k in 0..e {
            c[j * e + k] -= scale * delta[j * e + k];
        }
    }
    Ok(())
}

/// Chebyshev polynomial `T_m(c) = cos(m * acos c)` and its derivative.
pub fn chebyshev<T: Real>(m: u32, c: T) -> (T, T) {
    let k = T::of;
    match m {
        1 => (c, T::one()),
        2 => (k(2.0) * c * c - T::one(), k(4.0) * c),
        3 => (k(4.0) * c * c * c - k(3.0) * c, k(12.0) * c * c - k(3.0)),
        4 => {
            let c2 = c * c;
            (k(8.0) * c2 * c2 - k(8.0) * c2 + T::one(), k(32.0) * c2 * c - k(16.0) * c)
        }
        _ => panic!("margin {m} unsupported"),
    }
}

/// Segment index `k` with `theta in [k pi/m, (k+1) pi/m]`. On a boundary
/// the left segment is chosen.
pub fn margin_segment(m: u32, cos_theta: f64) -> u32 {
    let theta = cos_theta.clamp(-1.0, 1.0).acos();
    let k = (theta * m as f64 / PI).ceil() as i64 - 1;
    k.clamp(0, m as i64 - 1) as u32
}

/// Angular margin function evaluated from `cos(theta)`:
/// `(-1)^k T_m(cos theta) - 2k`, with its derivative in `cos theta`.
pub fn margin_cos<T: Real>(m: u32, c: T) -> (T, T) {
    let k = margin_segment(m, c.to_f64());
    let sign = if k % 2 == 0 { T::one() } else { -T::one() };
    let (t, dt) = chebyshev(m, c);
    (sign * t - T::of(2.0 * k as f64), sign * dt)
}

/// `phi(theta) = (-1)^k cos(m theta) - 2k` for `theta in [0, pi]`.
pub fn phi(m: u32, theta: f64) -> f64 {
    let k = ((theta * m as f64 / PI).ceil() as i64 - 1).clamp(0, m as i64 - 1);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    sign * (m as f64 * theta).cos() - 2.0 * k as f64
}

pub const COS_CLAMP: f64 = 1e-7;

/// Cosines between each embedding and each unit-normalised column of `w`,
/// plus the embedding norms (`[M, C]`, `[M, 1]`).
pub fn angular_cosines<T: Real>(tape: &mut Tape<T>, f: Var, w: Var) -> Result<(Var, Var)> {
    let (m, c) = batch_and_classes(tape, f, w)?;
    let norms = tape.l2norm(f, 1)?;
    if let Some(i) = tape.value(norms).data().iter().position(|&n| n == T::zero()) {
        return Err(Error::Degenerate(format!("embedding {i} has zero norm")));
    }
    let col_norms = tape.l2norm(w, 0)?;
    let col_norms = tape.reshape(col_norms, &[1, c])?;
    let wn = tape.div(w, col_norms)?;
    let dots = tape.matmul(f, wn)?;
    let norms = tape.reshape(norms, &[m, 1])?;
    let cos = tape.div(dots, norms)?;
    let lim = T::one() - T::of(COS_CLAMP);
    Ok((tape.clamp(cos, -lim, lim), norms))
}

/// A-Softmax logits: `|f_i| psi(theta_{y_i})` for the true class and
/// `|f_i| cos(theta_j)` elsewhere, where `psi = phi` or, while annealing,
/// `(lambda cos + phi) / (1 + lambda)`.
pub fn asoftmax_logits<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    w: Var,
    labels: &[usize],
    m: u32,
    anneal_lambda: Option<f64>,
) -> Result<Var> {
    if !(1..=4).contains(&m) {
        return Err(Error::Config(format!("margin m = {m} outside 1..=4")));
    }
    let (batch, c) = batch_and_classes(tape, f, w)?;
    check_labels(labels, batch, c)?;
    let (cos, norms) = angular_cosines(tape, f, w)?;
    let phi = tape.map(cos, move |x| margin_cos(m, x).0, move |x, _| margin_cos(m, x).1);
    let target = match anneal_lambda {
        Some(lambda) => {
            let lc = tape.scale(cos, T::of(lambda));
            let mixed = tape.add(lc, phi)?;
            tape.scale(mixed, T::one() / T::of(1.0 + lambda))
        }
        None => phi,
    };
    let onehot = Tensor::from_fn(&[batch, c], |i| {
        if labels[i / c] == i % c {
            T::one()
        } else {
            T::zero()
        }
    });
    let onehot = tape.constant(onehot);
    let shift = tape.sub(target, cos)?;
    let shift = tape.mul(shift, onehot)?;
    let adjusted = tape.add(cos, shift)?;
    Ok(tape.mul(adjusted, norms)?)
}

pub fn asoftmax_loss<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    w: Var,
    labels: &[usize],
    m: u32,
    anneal_lambda: Option<f64>,
) -> Result<Var> {
    let logits = asoftmax_logits(tape, f, w, labels, m, anneal_lambda)?;
    cross_entropy(tape, logits, labels)
}

/// Rescales every column of an `[E, C]` matrix to unit L2 norm.
pub fn normalize_columns<T: Real>(w: &mut Tensor<T>) {
    let &[e, c] = w.shape() else { return };
    let data = w.data_mut();
    for j in 0..c {
        let norm = (0..e).map(|i| data[i * c + j] * data[i * c + j]).sum::<T>().sqrt();
        if norm > T::zero() {
            for i in 0..e {
                data[i * c + j] /= norm;
            }
        }
    }
}
