//! Residual CNN mapping a `1 x mels x L` map to a `channels x L/8` sequence.
//!
//! Layout (width 1): a 3x3 stem with 16 channels, four residual stages of
//! 3/4/6/3 basic blocks at 16/32/64/128 channels with stride-2 downsampling
//! on both axes at the start of stages 2-4, then an average over the
//! remaining frequency rows.

mod conv;
mod norm;

pub use conv::conv2d;
pub use norm::{BatchNorm, BN_EPS, BN_MOMENTUM};

use ndtensor::{Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub base_channels: usize,
    pub blocks_per_stage: Vec<usize>,
    pub input_mels: usize,
    pub width_multiplier: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            base_channels: 16,
            blocks_per_stage: vec![3, 4, 6, 3],
            input_mels: 64,
            width_multiplier: 1.0,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.blocks_per_stage.len() != 4 {
            problems.push(format!(
                "blocks_per_stage needs 4 entries, got {}",
                self.blocks_per_stage.len()
            ));
        }
        if self.blocks_per_stage.contains(&0) {
            problems.push("every stage needs at least one block".to_string());
        }
        if self.input_mels == 0 || self.input_mels % 8 != 0 {
            problems.push(format!("input_mels {} is not a positive multiple of 8", self.input_mels));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            problems.push("width_multiplier must be positive".into());
        }
        if self.base_channels == 0 {
            problems.push("base_channels must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Channel count of stage `i` (0-based).
    pub fn stage_channels(&self, stage: usize) -> usize {
        let base = ((self.base_channels as f64 * self.width_multiplier).round() as usize).max(1);
        base << stage
    }

    pub fn output_dim(&self) -> usize {
        self.stage_channels(3)
    }
}

/// Time extent after the three stride-2 stages.
pub fn output_len(input_len: usize) -> usize {
    (0..3).fold(input_len, |l, _| l.div_ceil(2))
}

fn he_normal<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

#[derive(Clone, Debug)]
struct ConvBn {
    weight: ParamId,
    bn: BatchNorm,
    stride: usize,
    pad: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvBn {
            weight: store.add(
                format!("{name}.weight"),
                he_normal(&[c_out, c_in, kernel, kernel], rng),
                ParamKind::Weight,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
            stride,
            pad: kernel / 2,
        }
    }

    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = conv2d(&mut s.tape, x, w, self.stride, self.pad)?;
        self.bn.forward(s, y)
    }
}

/// Two 3x3 conv + batch-norm layers with an identity or 1x1 projection
/// shortcut.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv1 = ConvBn::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, rng);
        let conv2 = ConvBn::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, rng);
        let shortcut = (stride != 1 || c_in != c_out)
            .then(|| ConvBn::new(store, &format!("{name}.shortcut"), c_in, c_out, 1, stride, rng));
        ResidualBlock {
            conv1,
            conv2,
            shortcut,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = s.tape.relu(h);
        let h = self.conv2.forward(s, h)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(s, x)?,
            None => x,
        };
        let sum = s.tape.add(h, skip)?;
        Ok(s.tape.relu(sum))
    }

    fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm> {
        [&self.conv1, &self.conv2]
            .into_iter()
            .chain(self.shortcut.as_ref())
            .map(|c| &c.bn)
    }
}

#[derive(Clone, Debug)]
pub struct Frontend {
    config: FrontendConfig,
    stem: ConvBn,
    stages: Vec<Vec<ResidualBlock>>,
}

impl Frontend {
    pub fn new<T: Real>(config: &FrontendConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::new(store, "frontend.conv1", 1, config.stage_channels(0), 3, 1, rng);
        let mut stages = Vec::new();
        let mut c_in = config.stage_channels(0);
        for (i, &blocks) in config.blocks_per_stage.iter().enumerate() {
            let c_out = config.stage_channels(i);
            let stage = (0..blocks)
                .map(|b| {
                    let stride = if i > 0 && b == 0 { 2 } else { 1 };
                    let block = ResidualBlock::new(
                        store,
                        &format!("frontend.res{}.{}", i + 1, b),
                        c_in,
                        c_out,
                        stride,
                        rng,
                    );
                    c_in = c_out;
                    block
                })
                .collect();
            stages.push(stage);
        }
        Ok(Frontend {
            config: config.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    /// `[N, 1, mels, L]` -> `[N, C, ceil(L/8)]`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        self.forward_traced(s, x, |_, _| {})
    }

    /// As [`Frontend::forward`], reporting the output shape of every
    /// named stage (`conv1`, `res1`..`res4`, `avgpool`, `reshape`).
    pub fn forward_traced<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        mut trace: impl FnMut(&str, &[usize]),
    ) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        match shape.as_slice() {
            &[_, 1, mels, len] if mels == self.config.input_mels => {
                if len < 8 {
                    return Err(Error::Degenerate(format!(
                        "input of {len} frames is shorter than the 8-frame minimum"
                    )));
                }
            }
            _ => {
                return Err(Error::Degenerate(format!(
                    "frontend expects [N, 1, {}, L], got {shape:?}",
                    self.config.input_mels
                )))
            }
        }
        let h = self.stem.forward(s, x)?;
        let mut h = s.tape.relu(h);
        trace("conv1", s.tape.shape(h));
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                h = block.forward(s, h)?;
            }
            trace(&format!("res{}", i + 1), s.tape.shape(h));
        }
        let pooled = s.tape.mean(h, 2)?;
        let pooled_shape = s.tape.shape(pooled).to_vec();
        trace(
            "avgpool",
            &[pooled_shape[0], pooled_shape[1], 1, pooled_shape[2]],
        );
        trace("reshape", &pooled_shape);
        Ok(pooled)
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm> {
        std::iter::once(&self.stem.bn).chain(self.stages.iter().flatten().flat_map(|b| b.batch_norms()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &FrontendConfig) -> (Frontend, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fe = Frontend::new(cfg, &mut store, &mut rng).unwrap();
        (fe, store)
    }

    #[test]
    fn table_shapes_at_width_one() {
        let (fe, mut store) = build(&FrontendConfig::default());
        let mut s = Session::new(&mut store, Mode::Eval);
        let x = s.constant(Tensor::zeros(&[1, 1, 64, 80]));
        let mut seen = Vec::new();
        let y = fe
            .forward_traced(&mut s, x, |name, shape| seen.push((name.to_string(), shape.to_vec())))
            .unwrap();
        assert_eq!(s.tape.shape(y), &[1, 128, 10]);
        let expect = [
            ("conv1", vec![1, 16, 64, 80]),
            ("res1", vec![1, 16, 64, 80]),
            ("res2", vec![1, 32, 32, 40]),
            ("res3", vec![1, 64, 16, 20]),
            ("res4", vec![1, 128, 8, 10]),
            ("avgpool", vec![1, 128, 1, 10]),
            ("reshape", vec![1, 128, 10]),
        ];
        for ((name, shape), (en, es)) in seen.iter().zip(expect.iter()) {
            assert_eq!(name, en);
            assert_eq!(shape, es, "{name}");
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let cfg = FrontendConfig {
            width_multiplier: 0.25,
            ..FrontendConfig::default()
        };
        let (fe, mut store) = build(&cfg);
        let mut s = Session::new(&mut store, Mode::Eval);
        let x = s.constant(Tensor::zeros(&[1, 1, 64, 8]));
        let y = fe.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y), &[1, 32, 1]);
        assert!(s.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_short_and_misshaped_inputs() {
        let (fe, mut store) = build(&FrontendConfig {
            width_multiplier: 0.25,
            ..FrontendConfig::default()
        });
        let mut s = Session::new(&mut store, Mode::Eval);
        let short = s.constant(Tensor::zeros(&[1, 1, 64, 7]));
        assert!(fe.forward(&mut s, short).is_err());
        let wrong = s.constant(Tensor::zeros(&[1, 1, 40, 16]));
        assert!(fe.forward(&mut s, wrong).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = FrontendConfig {
            input_mels: 60,
            blocks_per_stage: vec![1, 0, 1],
            ..FrontendConfig::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("input_mels"));
        assert!(msg.contains("4 entries"));
        assert!(msg.contains("at least one block"));
    }
}
