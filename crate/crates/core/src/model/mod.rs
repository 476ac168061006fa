//! The downstream head: layer-weighted pooling of encoder states, a pointwise
//! convolution stack, temporal averaging, optional text fusion and a two-layer
//! MLP that feeds the primary, secondary and attribute heads.
//!
//! All parameters live in one flat `f64` buffer so that optimizers, gradient
//! reduction and checkpoints can treat them uniformly.

mod checkpoint;
mod ensemble;
mod forward;
mod loss;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use ensemble::ensemble_predict;
pub use forward::{backward, batch_gradient, forward, sample_gradient, ModelOutput, TrainItem};
pub use loss::{kl_divergence, kl_loss, total_loss, LossBreakdown, LossConfig, Targets};

use crate::labels::NUM_CLASSES;
use crate::rng::{RngKey, Stream};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("input has zero frames")]
    ZeroFrames,
    #[error("model expects a text embedding")]
    MissingText,
    #[error("target is not a distribution: {0}")]
    TargetNotOnSimplex(String),
    #[error("ensemble needs at least one system")]
    EmptyEnsemble,
    #[error("checkpoint {path}: {message}")]
    CheckpointIo { path: String, message: String },
    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint: unsupported version {0}")]
    VersionMismatch(u32),
    #[error("checkpoint: config digest mismatch (expected {expected}, found {found})")]
    DigestMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Malformed(String),
}

/// Shape of the head. Input dimensions come from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub speech_layers: usize,
    pub speech_dim: usize,
    /// Zero disables the text branch.
    pub text_layers: usize,
    pub text_dim: usize,
    pub conv_channels: usize,
    pub mlp_hidden: usize,
    pub secondary_head: bool,
    pub attribute_head: bool,
    /// Use only the last encoder layer instead of the learned layer mix.
    pub last_layer_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            speech_layers: 1,
            speech_dim: 1,
            text_layers: 0,
            text_dim: 0,
            conv_channels: 256,
            mlp_hidden: 256,
            secondary_head: false,
            attribute_head: false,
            last_layer_only: false,
        }
    }
}

impl ModelConfig {
    pub fn has_text(&self) -> bool {
        self.text_layers > 0 && self.text_dim > 0
    }

    pub fn fused_dim(&self) -> usize {
        self.conv_channels + if self.has_text() { self.text_dim } else { 0 }
    }

    pub fn out_dim(&self) -> usize {
        NUM_CLASSES + if self.secondary_head { NUM_CLASSES } else { 0 } + if self.attribute_head { 3 } else { 0 }
    }

    pub fn secondary_range(&self) -> Option<Range<usize>> {
        self.secondary_head.then_some(NUM_CLASSES..2 * NUM_CLASSES)
    }

    pub fn attribute_range(&self) -> Option<Range<usize>> {
        let start = NUM_CLASSES + if self.secondary_head { NUM_CLASSES } else { 0 };
        self.attribute_head.then_some(start..start + 3)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.speech_layers == 0 || self.speech_dim == 0 || self.conv_channels == 0 || self.mlp_hidden == 0 {
            return Err(ModelError::DimensionMismatch(format!("all sizes must be >= 1: {self:?}")));
        }
        if (self.text_layers == 0) != (self.text_dim == 0) {
            return Err(ModelError::DimensionMismatch("text_layers and text_dim must both be set".into()));
        }
        Ok(())
    }
}

/// Named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

/// Offsets of every parameter group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Offsets {
    pub speech_logits: Range<usize>,
    pub text_logits: Option<Range<usize>>,
    /// (weight d_in × C, bias C) for the three pointwise stages.
    pub conv: [(Range<usize>, Range<usize>); 3],
    /// (W1 fused × H, b1), (W2 H × out, b2)
    pub mlp: [(Range<usize>, Range<usize>); 2],
    pub total: usize,
}

impl Offsets {
    fn new(cfg: &ModelConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let c = cfg.conv_channels;
        let speech_logits = take(cfg.speech_layers);
        let text_logits = cfg.has_text().then(|| take(cfg.text_layers));
        let conv = [
            (take(cfg.speech_dim * c), take(c)),
            (take(c * c), take(c)),
            (take(c * c), take(c)),
        ];
        let mlp = [
            (take(cfg.fused_dim() * cfg.mlp_hidden), take(cfg.mlp_hidden)),
            (take(cfg.mlp_hidden * cfg.out_dim()), take(cfg.out_dim())),
        ];
        Self { speech_logits, text_logits, conv, mlp, total: at }
    }

    fn specs(&self, cfg: &ModelConfig) -> Vec<TensorSpec> {
        let c = cfg.conv_channels;
        let mut out = vec![TensorSpec {
            name: "speech.layer_logits".into(),
            shape: vec![cfg.speech_layers],
            range: self.speech_logits.clone(),
        }];
        if let Some(r) = &self.text_logits {
            out.push(TensorSpec { name: "text.layer_logits".into(), shape: vec![cfg.text_layers], range: r.clone() });
        }
        let conv_in = [cfg.speech_dim, c, c];
        for (k, (w, b)) in self.conv.iter().enumerate() {
            out.push(TensorSpec { name: format!("conv.{k}.weight"), shape: vec![conv_in[k], c], range: w.clone() });
            out.push(TensorSpec { name: format!("conv.{k}.bias"), shape: vec![c], range: b.clone() });
        }
        let mlp_shapes = [(cfg.fused_dim(), cfg.mlp_hidden), (cfg.mlp_hidden, cfg.out_dim())];
        for (k, (w, b)) in self.mlp.iter().enumerate() {
            let (i, o) = mlp_shapes[k];
            out.push(TensorSpec { name: format!("mlp.{k}.weight"), shape: vec![i, o], range: w.clone() });
            out.push(TensorSpec { name: format!("mlp.{k}.bias"), shape: vec![o], range: b.clone() });
        }
        out
    }
}

/// Every trainable value of the head, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    config: ModelConfig,
    pub(crate) offsets: Offsets,
    pub data: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let offsets = Offsets::new(&config);
        let data = vec![0.0; offsets.total];
        Ok(Self { config, offsets, data })
    }

    /// Layer logits start at zero (uniform mix); weights and biases are drawn
    /// from U(-1/√fan_in, 1/√fan_in).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut p = Self::zeros(config)?;
        let mut rng = RngKey::new(seed, 0, "head-init").rng(Stream::Init);
        let groups: Vec<(Range<usize>, Range<usize>, usize)> = {
            let cfg = &p.config;
            let fan_in = [cfg.speech_dim, cfg.conv_channels, cfg.conv_channels];
            let mut g: Vec<_> = p.offsets.conv.iter().zip(fan_in).map(|((w, b), f)| (w.clone(), b.clone(), f)).collect();
            g.push((p.offsets.mlp[0].0.clone(), p.offsets.mlp[0].1.clone(), cfg.fused_dim()));
            g.push((p.offsets.mlp[1].0.clone(), p.offsets.mlp[1].1.clone(), cfg.mlp_hidden));
            g
        };
        for (w, b, fan_in) in groups {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in &mut p.data[w] {
                *x = rng.random_range(-bound..bound);
            }
            for x in &mut p.data[b] {
                *x = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensors(&self) -> Vec<TensorSpec> {
        self.offsets.specs(&self.config)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors()
            .into_iter()
            .find(|t| t.name == name)
            .map(|t| &self.data[t.range])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.tensors().into_iter().find(|t| t.name == name)?.range;
        Some(&mut self.data[range])
    }

    pub(crate) fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.data[r.clone()]
    }

    /// Mixing weights α over the speech layers.
    pub fn speech_layer_weights(&self) -> Vec<f64> {
        softmax(self.slice(&self.offsets.speech_logits))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_covers_buffer() {
        let cfg = ModelConfig {
            speech_layers: 3,
            speech_dim: 5,
            text_layers: 2,
            text_dim: 4,
            conv_channels: 6,
            mlp_hidden: 7,
            secondary_head: true,
            attribute_head: true,
            last_layer_only: false,
        };
        let p = HeadParams::zeros(cfg.clone()).unwrap();
        let specs = p.tensors();
        let mut at = 0;
        for s in &specs {
            assert_eq!(s.range.start, at);
            assert_eq!(s.range.len(), s.shape.iter().product::<usize>());
            at = s.range.end;
        }
        assert_eq!(at, p.len());
        assert_eq!(cfg.out_dim(), 21);
        assert_eq!(cfg.fused_dim(), 10);
        assert_eq!(p.tensor("mlp.1.weight").unwrap().len(), 7 * 21);
        assert_eq!(cfg.attribute_range(), Some(18..21));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig { speech_layers: 2, speech_dim: 8, conv_channels: 16, mlp_hidden: 16, ..Default::default() };
        let a = HeadParams::init(cfg.clone(), 1).unwrap();
        let b = HeadParams::init(cfg.clone(), 1).unwrap();
        let c = HeadParams::init(cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.tensor("speech.layer_logits").unwrap().iter().all(|x| *x == 0.0));
        assert!(a.tensor("conv.0.weight").unwrap().iter().all(|x| x.abs() < 1.0 / 8f64.sqrt()));
    }
}
