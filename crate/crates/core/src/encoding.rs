//! Encoding layers: aggregate a `[N, D, L]` frame-level map into a
//! fixed-size utterance-level vector per example.
//!
//! * TAP averages frames.
//! * SAP scores each frame with a one-layer perceptron
//!   `h_t = tanh(W x_t + b)` against a learned context vector `u`,
//!   softmax-normalises the scores over time and returns the weighted sum.
//! * LDE softly assigns every frame to `C` learned centers `mu_c` with
//!   per-center smoothing `s_c` and aggregates the residuals
//!   `r_tc = x_t - mu_c` per center, giving a `C * D` vector laid out as
//!   `[e_1; e_2; ...; e_C]`.
//!
//! All three are sums over frames of per-frame terms, so they are invariant
//! to frame order.

use ndtensor::{Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Tap,
    Sap,
    Lde,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tap" => Ok(EncoderKind::Tap),
            "sap" => Ok(EncoderKind::Sap),
            "lde" => Ok(EncoderKind::Lde),
            other => Err(Error::Config(format!("unknown encoder `{other}` (tap, sap, lde)"))),
        }
    }
}

/// How LDE normalises the per-center residual sums.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LdeAggregation {
    /// Divide by the number of frames `L`.
    #[default]
    Length,
    /// Divide by the total assignment weight `sum_t w_tc`.
    Weight,
}

fn frames_first<T: Real>(tape: &mut Tape<T>, x: Var, op: &str) -> Result<(usize, usize, usize, Var)> {
    let &[n, d, l] = tape.shape(x) else {
        return Err(Error::Degenerate(format!(
            "{op} expects [N, D, L], got {:?}",
            tape.shape(x)
        )));
    };
    if l == 0 {
        return Err(Error::EmptyInput(format!("{op} on a zero-length sequence")));
    }
    let xt = tape.transpose(x)?;
    Ok((n, d, l, xt))
}

/// Temporal average pooling: `[N, D, L] -> [N, D]`.
pub fn tap<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    frames_first(tape, x, "tap")?;
    Ok(tape.mean(x, 2)?)
}

/// Attention weights of self-attentive pooling, `[N, L]`. `w` is
/// `[H, D]`, `b` and `u` are `[H]`.
pub fn sap_weights<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, u: Var) -> Result<Var> {
    let (n, d, l, xt) = frames_first(tape, x, "sap")?;
    let hidden = tape.shape(u).iter().product::<usize>();
    let flat = tape.reshape(xt, &[n * l, d])?;
    let wt = tape.transpose(w)?;
    let proj = tape.matmul(flat, wt)?;
    let pre = tape.add(proj, b)?;
    let h = tape.tanh(pre);
    let u_col = tape.reshape(u, &[hidden, 1])?;
    let scores = tape.matmul(h, u_col)?;
    let scores = tape.reshape(scores, &[n, l])?;
    Ok(tape.softmax(scores, 1)?)
}

/// Self-attentive pooling: `sum_t w_t x_t`, `[N, D, L] -> [N, D]`.
pub fn sap<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, u: Var) -> Result<Var> {
    let weights = sap_weights(tape, x, w, b, u)?;
    let (n, _, l, xt) = frames_first(tape, x, "sap")?;
    let weights = tape.reshape(weights, &[n, l, 1])?;
    let weighted = tape.mul(xt, weights)?;
    Ok(tape.sum(weighted, 1)?)
}

/// Residuals `[N, L, C, D]` and soft assignments `[N, L, C]` of LDE.
/// `mu` is `[C, D]`, `s` is `[C]`.
pub fn lde_assignments<T: Real>(tape: &mut Tape<T>, x: Var, mu: Var, s: Var) -> Result<(Var, Var)> {
    let (n, d, l, xt) = frames_first(tape, x, "lde")?;
    let xt = tape.reshape(xt, &[n, l, 1, d])?;
    let r = tape.sub(xt, mu)?;
    let sq = tape.square(r);
    let dist = tape.sum(sq, 3)?;
    let scaled = tape.mul(dist, s)?;
    let logits = tape.neg(scaled);
    let w = tape.softmax(logits, 2)?;
    Ok((r, w))
}

/// Learnable dictionary encoding, `[N, D, L] -> [N, C * D]`.
pub fn lde<T: Real>(tape: &mut Tape<T>, x: Var, mu: Var, s: Var, agg: LdeAggregation) -> Result<Var> {
    let (r, w) = lde_assignments(tape, x, mu, s)?;
    let &[n, l, c, d] = tape.shape(r) else {
        unreachable!("residuals are rank 4")
    };
    let w4 = tape.reshape(w, &[n, l, c, 1])?;
    let wr = tape.mul(w4, r)?;
    let summed = tape.sum(wr, 1)?;
    let e = match agg {
        LdeAggregation::Length => tape.scale(summed, T::one() / T::of(l as f64)),
        LdeAggregation::Weight => {
            let mass = tape.sum(w, 1)?;
            let mass = tape.reshape(mass, &[n, c, 1])?;
            tape.div(summed, mass)?
        }
    };
    Ok(tape.reshape(e, &[n, c * d])?)
}

#[derive(Clone, Debug)]
pub struct SapParams {
    pub w: ParamId,
    pub b: ParamId,
    pub u: ParamId,
}

#[derive(Clone, Debug)]
pub struct LdeParams {
    pub mu: ParamId,
    pub s: ParamId,
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Tap,
    Sap(SapParams),
    Lde(LdeParams, LdeAggregation),
}

impl Encoder {
    /// Registers the encoder's parameters for `dim`-dimensional frames.
    pub fn new<T: Real>(
        kind: EncoderKind,
        dim: usize,
        sap_hidden: usize,
        lde_components: usize,
        aggregation: LdeAggregation,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            EncoderKind::Tap => Encoder::Tap,
            EncoderKind::Sap => {
                if sap_hidden == 0 {
                    return Err(Error::Config("sap_hidden must be positive".into()));
                }
                let he = Normal::new(0.0, (2.0 / dim as f64).sqrt()).expect("valid std");
                let small = Normal::new(0.0, 0.1).expect("valid std");
                Encoder::Sap(SapParams {
                    w: store.add(
                        "encoder.sap.w",
                        Tensor::from_fn(&[sap_hidden, dim], |_| T::of(he.sample(rng))),
                        ParamKind::Weight,
                    ),
                    b: store.add("encoder.sap.b", Tensor::zeros(&[sap_hidden]), ParamKind::NoDecay),
                    u: store.add(
                        "encoder.sap.u",
                        Tensor::from_fn(&[sap_hidden], |_| T::of(small.sample(rng))),
                        ParamKind::NoDecay,
                    ),
                })
            }
            EncoderKind::Lde => {
                if lde_components == 0 {
                    return Err(Error::Config("lde_components must be at least 1".into()));
                }
                let bound = 1.0 / (lde_components as f64).sqrt();
                Encoder::Lde(
                    LdeParams {
                        mu: store.add(
                            "encoder.lde.mu",
                            Tensor::from_fn(&[lde_components, dim], |_| T::of(rng.random_range(-bound..bound))),
                            ParamKind::NoDecay,
                        ),
                        s: store.add("encoder.lde.s", Tensor::ones(&[lde_components]), ParamKind::NoDecay),
                    },
                    aggregation,
                )
            }
        })
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Tap => EncoderKind::Tap,
            Encoder::Sap(_) => EncoderKind::Sap,
            Encoder::Lde(..) => EncoderKind::Lde,
        }
    }

    pub fn output_dim(&self, dim: usize, lde_components: usize) -> usize {
        match self {
            Encoder::Lde(..) => dim * lde_components,
            _ => dim,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self {
            Encoder::Tap => tap(&mut s.tape, x),
            Encoder::Sap(p) => {
                let (w, b, u) = (s.param(p.w), s.param(p.b), s.param(p.u));
                sap(&mut s.tape, x, w, b, u)
            }
            Encoder::Lde(p, agg) => {
                let (mu, sm) = (s.param(p.mu), s.param(p.s));
                lde(&mut s.tape, x, mu, sm, *agg)
            }
        }
    }

    /// Clamps LDE smoothing factors to be non-negative.
    pub fn clamp_smoothing<T: Real>(&self, store: &mut ParamStore<T>) {
        if let Encoder::Lde(p, _) = self {
            for v in store.get_mut(p.s).data_mut() {
                *v = v.max(T::zero());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x_of(d: usize, l: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[1, d, l], |i| f(i / l, i % l))
    }

    #[test]
    fn tap_hand_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let y = tap(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
    }

    #[test]
    fn tap_of_equal_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(x_of(3, 5, |d, _| d as f64 - 0.5));
        let y = tap(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.5, 0.5, 1.5]);
    }

    #[test]
    fn sap_single_frame_returns_it() {
        let mut tape = Tape::new();
        let x = tape.constant(x_of(3, 1, |d, _| d as f64 * 2.0 - 1.0));
        let w = tape.constant(Tensor::from_fn(&[3, 3], |i| (i as f64).cos()));
        let b = tape.constant(Tensor::from_fn(&[3], |i| i as f64));
        let u = tape.constant(Tensor::from_fn(&[3], |i| 1.0 - i as f64));
        let y = sap(&mut tape, x, w, b, u).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0, 3.0]);
    }

    #[test]
    fn lde_single_center_is_mean_residual() {
        let mut tape = Tape::new();
        let xv = x_of(2, 4, |d, t| (d * 4 + t) as f64 * 0.3);
        let x = tape.constant(xv.clone());
        let mu = tape.constant(Tensor::new(&[1, 2], vec![0.25, -1.0]).unwrap());
        let s = tape.constant(Tensor::new(&[1], vec![0.7]).unwrap());
        let e = lde(&mut tape, x, mu, s, LdeAggregation::Length).unwrap();
        for d in 0..2 {
            let mean = (0..4).map(|t| xv.at(&[0, d, t])).sum::<f64>() / 4.0;
            let expected = mean - [0.25, -1.0][d];
            assert!((tape.value(e).data()[d] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn lde_frames_on_a_center_zero_its_residual() {
        let mut tape = Tape::new();
        let mu1 = [0.5, -0.25];
        let x = tape.constant(x_of(2, 3, |d, _| mu1[d]));
        let mu = tape.constant(Tensor::new(&[2, 2], vec![0.5, -0.25, 1.5, 2.0]).unwrap());
        let s = tape.constant(Tensor::ones(&[2]));
        let e = lde(&mut tape, x, mu, s, LdeAggregation::Length).unwrap();
        let v = tape.value(e).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!(v[2..].iter().all(|&x| x != 0.0));
    }

    #[test]
    fn zero_length_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 0]));
        assert!(matches!(tap(&mut tape, x), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn encoder_kind_parses() {
        assert_eq!("LDE".parse::<EncoderKind>().unwrap(), EncoderKind::Lde);
        assert!("vlad".parse::<EncoderKind>().is_err());
    }
}
