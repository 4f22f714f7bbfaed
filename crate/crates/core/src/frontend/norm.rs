use ndtensor::{Real, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Mode, ParamId, ParamKind, ParamStore, Session};
use ndtensor::Var;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation over every axis except axis 1.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::NoDecay),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::NoDecay),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), ParamKind::Buffer),
        }
    }

    /// Perturbs the affine parameters away from the identity; used by
    /// gradient checks so that `gamma` and `beta` gradients are generic.
    pub fn jitter<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for v in store.get_mut(self.gamma).data_mut() {
            *v = T::of(rng.random_range(0.5..1.5));
        }
        for v in store.get_mut(self.beta).data_mut() {
            *v = T::of(rng.random_range(-0.5..0.5));
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let shape = s.tape.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Degenerate(format!("batch norm on shape {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let count = n * inner;
        let train = s.mode() == Mode::Train;
        if train && n < 2 {
            return Err(Error::Degenerate(
                "batch norm in train mode needs a batch of at least 2".into(),
            ));
        }

        let xs = s.tape.value(x).data();
        let (mean, var) = if train {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut sum = T::zero();
                for b in 0..n {
                    sum += xs[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().copied().sum::<T>();
                }
                let m = sum / T::of(count as f64);
                let mut ss = T::zero();
                for b in 0..n {
                    for &v in &xs[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                        ss += (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = ss / T::of(count as f64);
            }
            (mean, var)
        } else {
            (
                s.store().get(self.running_mean).data().to_vec(),
                s.store().get(self.running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt()).collect();

        let (g, bt) = (s.tape.value(gamma).data(), s.tape.value(beta).data());
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                for i in range {
                    let h = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let out = Tensor::new(&shape, out)?;

        if train {
            let momentum = T::of(BN_MOMENTUM);
            let unbias = T::of(count as f64 / (count - 1).max(1) as f64);
            let store = s.store_mut()?;
            for (rm, &m) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                *rm = (T::one() - momentum) * *rm + momentum * m;
            }
            for (rv, &v) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                *rv = (T::one() - momentum) * *rv + momentum * v * unbias;
            }
        }

        Ok(s.tape.custom(
            &[x, gamma, beta],
            out,
            Box::new(move |args| {
                let (gy, g) = (args.grad, args.inputs[1].data());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                            dbeta[ch] += gy[i];
                            dgamma[ch] += gy[i] * xhat[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); gy.len()];
                let cnt = T::of(count as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let scale = g[ch] * inv_std[ch];
                        for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                            dx[i] = if train {
                                scale * (gy[i] - dbeta[ch] / cnt - xhat[i] * dgamma[ch] / cnt)
                            } else {
                                scale * gy[i]
                            };
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }
}
