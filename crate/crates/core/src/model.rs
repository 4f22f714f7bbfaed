//! The full network: frontend, encoding layer, embedding FC layer and the
//! loss-specific classifier head.

use ndtensor::{Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoding::{Encoder, EncoderKind, LdeAggregation};
use crate::error::{Error, Result};
use crate::features::FrameSequence;
use crate::frontend::{Frontend, FrontendConfig};
use crate::losses::{self, LossKind, MarginConfig};
use crate::params::{Mode, ParamId, ParamKind, ParamStore, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderKind,
    /// Hidden size of the SAP perceptron; defaults to the frame dimension.
    pub sap_hidden: Option<usize>,
    pub lde_components: usize,
    pub lde_aggregation: LdeAggregation,
    pub lde_clamp_smoothing: bool,
    pub embedding_dim: usize,
    pub n_classes: usize,
    pub loss: LossKind,
    pub margin: MarginConfig,
    pub center_lambda: f64,
    pub center_alpha: f64,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frontend: FrontendConfig::default(),
            encoder: EncoderKind::Tap,
            sap_hidden: None,
            lde_components: 64,
            lde_aggregation: LdeAggregation::Length,
            lde_clamp_smoothing: false,
            embedding_dim: 128,
            n_classes: 2,
            loss: LossKind::Softmax,
            margin: MarginConfig::default(),
            center_lambda: 0.001,
            center_alpha: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Collects every problem rather than stopping at the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(Error::Config(msg)) = self.frontend.validate() {
            out.push(format!("frontend: {msg}"));
        }
        if let Err(Error::Config(msg)) = self.margin.validate() {
            out.push(msg);
        }
        if self.n_classes < 2 {
            out.push(format!("n_classes = {} (need at least 2)", self.n_classes));
        }
        if self.embedding_dim == 0 {
            out.push("embedding_dim must be positive".into());
        }
        if self.encoder == EncoderKind::Lde && self.lde_components == 0 {
            out.push("lde_components must be at least 1".into());
        }
        if self.sap_hidden == Some(0) {
            out.push("sap_hidden must be positive".into());
        }
        if self.center_lambda < 0.0 {
            out.push("center_lambda must be non-negative".into());
        }
        if !(self.center_alpha > 0.0) {
            out.push("center_alpha must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn gaussian<T: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

/// Layer wiring: which parameters each layer reads. Holds no tensor data,
/// so a session can borrow the store mutably while layers are read.
#[derive(Clone, Debug)]
pub struct Layers {
    config: ModelConfig,
    frontend: Frontend,
    encoder: Encoder,
    fc_w: ParamId,
    fc_b: ParamId,
    head_w: ParamId,
    head_b: Option<ParamId>,
    centers: Option<ParamId>,
}

impl Layers {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn frontend(&self) -> &Frontend {
        &self.frontend
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head_weight(&self) -> ParamId {
        self.head_w
    }

    pub fn centers(&self) -> Option<ParamId> {
        self.centers
    }

    /// Pooled utterance representation before the FC layer.
    pub fn pooled<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let frames = self.frontend.forward(s, x)?;
        self.encoder.forward(s, frames)
    }

    /// `[N, 1, mels, L]` -> `[N, embedding_dim]`.
    pub fn embed_batch<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let pooled = self.pooled(s, x)?;
        let w = s.param(self.fc_w);
        let b = s.param(self.fc_b);
        losses::linear_logits(&mut s.tape, pooled, w, Some(b))
    }

    /// Scores used for classification accuracy: the linear logits, or for
    /// A-Softmax the margin-free `|f| cos(theta)`.
    pub fn class_scores<T: Real>(&self, s: &mut Session<'_, T>, emb: Var) -> Result<Var> {
        let w = s.param(self.head_w);
        match self.config.loss {
            LossKind::Asoftmax => {
                let (cos, norms) = losses::angular_cosines(&mut s.tape, emb, w)?;
                Ok(s.tape.mul(cos, norms)?)
            }
            _ => {
                let b = self.head_b.map(|b| s.param(b));
                losses::linear_logits(&mut s.tape, emb, w, b)
            }
        }
    }

    /// Training objective for a batch of embeddings.
    pub fn loss<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        emb: Var,
        labels: &[usize],
        anneal_lambda: Option<f64>,
    ) -> Result<Var> {
        let w = s.param(self.head_w);
        let b = self.head_b.map(|b| s.param(b));
        match self.config.loss {
            LossKind::Softmax => losses::softmax_loss(&mut s.tape, emb, w, b, labels),
            LossKind::Center => {
                let centers = s.store().get(self.centers.expect("center bank")).clone();
                let lambda = T::of(self.config.center_lambda);
                losses::center_loss(&mut s.tape, emb, w, b, &centers, labels, lambda)
            }
            LossKind::Asoftmax => {
                losses::asoftmax_loss(&mut s.tape, emb, w, labels, self.config.margin.m, anneal_lambda)
            }
        }
    }

    /// Blending factor for A-Softmax at an optimiser step, if annealing.
    pub fn anneal_lambda(&self, step: u64) -> Option<f64> {
        match self.config.loss {
            LossKind::Asoftmax => self.config.margin.anneal.map(|a| a.lambda(step)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network<T: Real> {
    pub layers: Layers,
    pub store: ParamStore<T>,
}

impl<T: Real> Network<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let frontend = Frontend::new(&config.frontend, &mut store, &mut rng)?;
        let dim = config.frontend.output_dim();
        let encoder = Encoder::new(
            config.encoder,
            dim,
            config.sap_hidden.unwrap_or(dim),
            config.lde_components,
            config.lde_aggregation,
            &mut store,
            &mut rng,
        )?;
        let pooled = encoder.output_dim(dim, config.lde_components);
        let (e, c) = (config.embedding_dim, config.n_classes);
        let fc_w = store.add(
            "fc.weight",
            gaussian(&[pooled, e], (1.0 / pooled as f64).sqrt(), &mut rng),
            ParamKind::Weight,
        );
        let fc_b = store.add("fc.bias", Tensor::zeros(&[e]), ParamKind::NoDecay);
        let mut head = gaussian(&[e, c], (1.0 / e as f64).sqrt(), &mut rng);
        let asoftmax = config.loss == LossKind::Asoftmax;
        if asoftmax {
            losses::normalize_columns(&mut head);
        }
        let head_w = store.add("head.weight", head, ParamKind::Weight);
        let head_b = (!asoftmax).then(|| store.add("head.bias", Tensor::zeros(&[c]), ParamKind::NoDecay));
        let centers = (config.loss == LossKind::Center)
            .then(|| store.add("centers", Tensor::zeros(&[c, e]), ParamKind::Buffer));
        let layers = Layers { config: config.clone(), frontend, encoder, fc_w, fc_b, head_w, head_b, centers };
        Ok(Network { layers, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.layers.config
    }

    /// Learnable parameters of the frame-level frontend.
    pub fn frontend_params(&self) -> usize {
        self.store.num_learnable_under("frontend.")
    }

    /// A training-mode session plus the layers to run in it.
    pub fn train_session(&mut self) -> (&Layers, Session<'_, T>) {
        (&self.layers, Session::new(&mut self.store, Mode::Train))
    }

    /// Moves class centers toward a batch of (detached) embeddings.
    pub fn step_centers(&mut self, emb: &Tensor<T>, labels: &[usize]) -> Result<()> {
        if let Some(id) = self.layers.centers {
            let alpha = T::of(self.layers.config.center_alpha);
            losses::step_centers(self.store.get_mut(id), emb, labels, alpha)?;
        }
        Ok(())
    }

    /// Re-imposes parameter constraints after an optimiser step.
    pub fn project(&mut self) {
        if self.layers.config.loss == LossKind::Asoftmax {
            losses::normalize_columns(self.store.get_mut(self.layers.head_w));
        }
        if self.layers.config.lde_clamp_smoothing {
            self.layers.encoder.clamp_smoothing(&mut self.store);
        }
    }

    /// Eval-mode embedding of one utterance.
    pub fn embed(&self, seq: &FrameSequence) -> Result<Vec<T>> {
        let mut s = Session::frozen(&self.store);
        let x = s.constant(seq.to_tensor());
        let e = self.layers.embed_batch(&mut s, x)?;
        Ok(s.tape.value(e).data().to_vec())
    }

    /// Eval-mode class scores of one utterance.
    pub fn classify(&self, seq: &FrameSequence) -> Result<Vec<T>> {
        let mut s = Session::frozen(&self.store);
        let x = s.constant(seq.to_tensor());
        let e = self.layers.embed_batch(&mut s, x)?;
        let scores = self.layers.class_scores(&mut s, e)?;
        Ok(s.tape.value(scores).data().to_vec())
    }

    /// Embeds many utterances on up to `threads` threads. Output order
    /// follows input order and does not depend on the thread count.
    pub fn embed_all(&self, seqs: &[FrameSequence], threads: usize) -> Result<Vec<Vec<T>>> {
        let threads = threads.clamp(1, seqs.len().max(1));
        if threads == 1 {
            return seqs.iter().map(|s| self.embed(s)).collect();
        }
        let chunk = seqs.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = seqs
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| self.embed(s)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(seqs.len());
            for h in handles {
                out.extend(h.join().expect("embedding thread panicked")?);
            }
            Ok(out)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(encoder: EncoderKind, loss: LossKind) -> ModelConfig {
        ModelConfig {
            frontend: FrontendConfig { base_channels: 4, blocks_per_stage: vec![1, 1, 1, 1], input_mels: 16, width_multiplier: 1.0 },
            encoder,
            lde_components: 4,
            embedding_dim: 8,
            n_classes: 3,
            loss,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn embedding_has_configured_width() {
        let net = Network::<f32>::new(&small(EncoderKind::Lde, LossKind::Asoftmax)).unwrap();
        let seq = FrameSequence::new(16, 20, vec![0.3; 16 * 20]).unwrap();
        assert_eq!(net.embed(&seq).unwrap().len(), 8);
        assert_eq!(net.classify(&seq).unwrap().len(), 3);
    }

    #[test]
    fn head_shape_follows_loss() {
        let soft = Network::<f32>::new(&small(EncoderKind::Tap, LossKind::Softmax)).unwrap();
        assert!(soft.store.find("head.bias").is_some());
        assert!(soft.store.find("centers").is_none());
        let ang = Network::<f32>::new(&small(EncoderKind::Tap, LossKind::Asoftmax)).unwrap();
        assert!(ang.store.find("head.bias").is_none());
        let w = ang.store.get(ang.layers.head_weight());
        let norm: f32 = (0..8).map(|i| w.data()[i * 3] * w.data()[i * 3]).sum();
        assert!((norm - 1.0).abs() < 1e-5);
        let cen = Network::<f32>::new(&small(EncoderKind::Tap, LossKind::Center)).unwrap();
        assert!(cen.store.find("centers").is_some());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Network::<f32>::new(&small(EncoderKind::Sap, LossKind::Softmax)).unwrap();
        let b = Network::<f32>::new(&small(EncoderKind::Sap, LossKind::Softmax)).unwrap();
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.tensor.data(), q.tensor.data());
        }
    }

    #[test]
    fn threaded_embedding_matches_serial() {
        let net = Network::<f32>::new(&small(EncoderKind::Sap, LossKind::Softmax)).unwrap();
        let seqs: Vec<_> = (0..5)
            .map(|k| FrameSequence::new(16, 10 + k, (0..16 * (10 + k)).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap())
            .collect();
        assert_eq!(net.embed_all(&seqs, 1).unwrap(), net.embed_all(&seqs, 3).unwrap());
    }

    #[test]
    fn invalid_config_lists_all_problems() {
        let cfg = ModelConfig { n_classes: 1, embedding_dim: 0, ..ModelConfig::default() };
        let Err(Error::Config(msg)) = Network::<f32>::new(&cfg) else { panic!() };
        assert!(msg.contains("n_classes") && msg.contains("embedding_dim"));
    }
}
