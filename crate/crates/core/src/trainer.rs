//! Epoch loop: on-the-fly augmentation, target re-weighting, Adam steps,
//! per-epoch dev scoring and checkpoint selection.

use std::borrow::Cow;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{concat_in_plan_order, decide, mix_embeddings, sampler_for, AugmentConfig, AugmentError};
use crate::error::{Error, Result};
use crate::features::{read_embeddings, EmbeddingSequence};
use crate::labels::{
    class_weights, empirical_distribution, reweight_target, reweight_target_raw, ClassWeights, Split, NUM_CLASSES,
};
use crate::manifest::{write_atomic, Manifest, ManifestEntry, PredictionRecord};
use crate::metrics::MetricsReport;
use crate::model::{
    batch_gradient, forward, save_checkpoint, HeadParams, LossBreakdown, LossConfig, ModelConfig, Targets, TrainItem,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{RngKey, Stream};

pub const CHECKPOINT_FILE: &str = "checkpoint.sckp";
pub const REPORT_FILE: &str = "train_report.json";

/// Head options that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadOptions {
    pub conv_channels: usize,
    pub mlp_hidden: usize,
    pub secondary_head: bool,
    pub attribute_head: bool,
    pub last_layer_only: bool,
    /// Fuse token-level text embeddings (`text_embedding_path`).
    pub use_text: bool,
}

impl Default for HeadOptions {
    fn default() -> Self {
        Self {
            conv_channels: 256,
            mlp_hidden: 256,
            secondary_head: false,
            attribute_head: false,
            last_layer_only: false,
            use_text: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of macro-F1 in the selection score; minority mAP gets the rest.
    pub selection_weight: f64,
    pub reweight_targets: bool,
    /// Renormalize `d ∘ w` onto the simplex.
    pub renormalize_reweighted: bool,
    /// Sum per-sample gradients in sample order rather than completion order.
    pub fixed_reduction_order: bool,
    pub augmentation: AugmentConfig,
    pub loss: LossConfig,
    pub model: HeadOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            epochs: 15,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            selection_weight: 0.5,
            reweight_targets: true,
            renormalize_reweighted: true,
            fixed_reduction_order: true,
            augmentation: AugmentConfig::default(),
            loss: LossConfig::default(),
            model: HeadOptions::default(),
        }
    }
}

impl TrainConfig {
    /// Plain KL training: no dropout, no mixing, no re-weighting.
    pub fn plain(seed: u64) -> Self {
        Self { seed, reweight_targets: false, augmentation: AugmentConfig::disabled(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate={}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.selection_weight) {
            return bad(format!("selection_weight={} not in [0, 1]", self.selection_weight));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("optimizer betas must lie in [0, 1) and eps > 0".into());
        }
        self.augmentation.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn selection_score(&self, dev: &MetricsReport) -> f64 {
        self.selection_weight * dev.macro_f1 + (1.0 - self.selection_weight) * dev.minority_map.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: LossBreakdown,
    pub n_mixed: usize,
    pub dev: MetricsReport,
    pub selection_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
    pub selection_score: f64,
    pub selection_rule: String,
    pub class_weights: Option<[f64; NUM_CLASSES]>,
    pub n_train: usize,
    pub n_dev: usize,
    pub model: ModelConfig,
    /// Relative to the report.
    pub checkpoint: String,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub params: HeadParams,
}

/// Loaded inputs of one sample.
#[derive(Debug, Clone)]
pub struct SampleData {
    pub entry: ManifestEntry,
    pub speech: EmbeddingSequence,
    pub text: Option<EmbeddingSequence>,
}

fn load_one(manifest: &Manifest, entry: &ManifestEntry, text: bool) -> Result<SampleData> {
    let read = |rel: &Option<String>, what: &str| -> Result<EmbeddingSequence> {
        let rel = rel.as_ref().ok_or_else(|| Error::MissingEmbedding(format!("{} ({what})", entry.sample_id)))?;
        let path = manifest.resolve(rel);
        read_embeddings(&path).map_err(|source| Error::Embedding {
            sample_id: entry.sample_id.clone(),
            path: path.display().to_string(),
            source,
        })
    };
    Ok(SampleData {
        entry: entry.clone(),
        speech: read(&entry.embedding_path, "speech")?,
        text: if text { Some(read(&entry.text_embedding_path, "text")?) } else { None },
    })
}

/// Reads every entry's embeddings, in manifest order.
pub fn load_samples(manifest: &Manifest, text: bool) -> Result<Vec<SampleData>> {
    manifest.entries.par_iter().map(|e| load_one(manifest, e, text)).collect()
}

fn model_config(first: &SampleData, opts: &HeadOptions) -> ModelConfig {
    let (text_layers, text_dim) = match &first.text {
        Some(t) => (t.n_layers, t.dim),
        None => (0, 0),
    };
    ModelConfig {
        speech_layers: first.speech.n_layers,
        speech_dim: first.speech.dim,
        text_layers,
        text_dim,
        conv_channels: opts.conv_channels,
        mlp_hidden: opts.mlp_hidden,
        secondary_head: opts.secondary_head,
        attribute_head: opts.attribute_head,
        last_layer_only: opts.last_layer_only,
    }
}

/// Sample visiting order of one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngKey::new(seed, epoch, "shuffle").rng(Stream::Shuffle));
    order
}

/// Training target of an entry. Weights apply to train-split entries only.
pub fn training_target(
    entry: &ManifestEntry,
    probs: &[f64; NUM_CLASSES],
    weights: Option<&ClassWeights>,
    renormalize: bool,
) -> Result<[f64; NUM_CLASSES]> {
    match weights {
        Some(w) if entry.split == Split::Train => {
            if renormalize {
                let label = crate::labels::SoftLabel { probs: *probs, n_annotations: entry.n_annotations };
                Ok(reweight_target(&label, w)?)
            } else {
                Ok(reweight_target_raw(probs, &w.w))
            }
        }
        _ => Ok(*probs),
    }
}

/// Per-sample probabilities in input order.
pub fn predict(params: &HeadParams, samples: &[SampleData]) -> Result<Vec<[f64; NUM_CLASSES]>> {
    samples
        .par_iter()
        .map(|s| Ok(forward(&s.speech, s.text.as_ref(), params)?.primary_probs))
        .collect()
}

pub fn score(samples: &[SampleData], probs: &[[f64; NUM_CLASSES]]) -> Result<MetricsReport> {
    let consensus: Vec<_> = samples.iter().map(|s| s.entry.consensus).collect();
    Ok(MetricsReport::score(&consensus, probs)?)
}

/// Forward every entry without augmentation or re-weighting.
pub fn evaluate(params: &HeadParams, manifest: &Manifest) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    let samples = load_samples(manifest, params.config().has_text())?;
    let probs = predict(params, &samples)?;
    let report = score(&samples, &probs)?;
    let preds = samples
        .iter()
        .zip(probs)
        .map(|(s, probs)| PredictionRecord { sample_id: s.entry.sample_id.clone(), probs })
        .collect();
    Ok((report, preds))
}

/// Trains on the train manifest, selects the best dev epoch and, when
/// `out_dir` is given, writes the checkpoint and report there.
pub fn train(train_set: &Manifest, dev_set: &Manifest, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let use_text = cfg.model.use_text;
    let train_data = load_samples(train_set, use_text)?;
    let dev_data = load_samples(dev_set, use_text)?;
    train_loaded(&train_data, &dev_data, cfg, out_dir)
}

pub fn train_loaded(
    train_data: &[SampleData],
    dev_data: &[SampleData],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train_data.first().ok_or_else(|| Error::Config("empty training set".into()))?;
    let model_cfg = model_config(first, &cfg.model);
    let mut params = HeadParams::init(model_cfg.clone(), cfg.seed)?;

    let entries: Vec<ManifestEntry> = train_data.iter().map(|s| s.entry.clone()).collect();
    let weights = if cfg.reweight_targets {
        let labels: Vec<_> = entries.iter().map(|e| e.soft_label()).collect();
        Some(class_weights(&empirical_distribution(&labels)?)?)
    } else {
        None
    };
    let aug = AugmentConfig { seed: cfg.seed, ..cfg.augmentation.clone() };
    let sampler = match sampler_for(&entries, &aug) {
        Ok(s) => s,
        Err(AugmentError::EmptyMinorityPool) => None,
        Err(e) => return Err(e.into()),
    };

    let mut opt = Adam::new(cfg.adam(), params.len());
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, HeadParams)> = None;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch as u64, train_data.len());
        let mut epoch_loss = LossBreakdown::default();
        let mut n_mixed = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<TrainItem> = chunk
                .par_iter()
                .map(|&i| {
                    let d = decide(i, &entries, sampler.as_ref(), &aug, epoch as u64);
                    build_item(i, train_data, &d, weights.as_ref(), cfg)
                })
                .collect::<Result<_>>()?;
            n_mixed += items.iter().filter(|it| matches!(it.speech, Cow::Owned(_))).count();
            let (loss, grad) = batch_gradient(&items, &params, &cfg.loss, cfg.fixed_reduction_order)?;
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { epoch: epoch + 1, batch: b });
            }
            let mut scaled = loss;
            scaled.scale(chunk.len() as f64);
            epoch_loss.add(&scaled);
            opt.step(&mut params.data, &grad);
        }
        epoch_loss.scale(1.0 / train_data.len() as f64);

        let probs = predict(&params, dev_data)?;
        let dev = score(dev_data, &probs)?;
        let s = cfg.selection_score(&dev);
        if best.as_ref().is_none_or(|(_, bs, _)| s > *bs) {
            best = Some((epoch + 1, s, params.clone()));
        }
        records.push(EpochRecord { epoch: epoch + 1, train_loss: epoch_loss, n_mixed, dev, selection_score: s });
    }

    let (selected_epoch, selection_score, params) = best.expect("at least one epoch");
    let report = TrainReport {
        epochs: records,
        selected_epoch,
        selection_score,
        selection_rule: format!(
            "{w}*macro_f1 + {r}*minority_map (absent minority_map counts as 0); ties keep the earliest epoch",
            w = cfg.selection_weight,
            r = 1.0 - cfg.selection_weight
        ),
        class_weights: weights.map(|w| w.w),
        n_train: train_data.len(),
        n_dev: dev_data.len(),
        model: model_cfg,
        checkpoint: CHECKPOINT_FILE.to_string(),
    };
    if let Some(dir) = out_dir {
        save_checkpoint(dir.join(CHECKPOINT_FILE), &params)?;
        let path = dir.join(REPORT_FILE);
        write_atomic(&path, report.to_json().as_bytes())
            .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    }
    Ok(TrainOutcome { report, params })
}

fn build_item<'a>(
    i: usize,
    data: &'a [SampleData],
    d: &crate::augment::AugmentDecision,
    weights: Option<&ClassWeights>,
    cfg: &TrainConfig,
) -> Result<TrainItem<'a>> {
    let s = &data[i];
    let primary = training_target(&s.entry, &d.label.probs, weights, cfg.renormalize_reweighted)?;
    Ok(match &d.mix {
        None => TrainItem {
            key: i,
            speech: Cow::Borrowed(&s.speech),
            text: s.text.as_ref().map(Cow::Borrowed),
            targets: Targets { primary, secondary: s.entry.secondary, attributes: s.entry.attributes },
        },
        Some((partner, plan)) => {
            let m = &data[*partner];
            let speech = mix_embeddings(&s.speech, &m.speech, plan)?;
            let text = match (&s.text, &m.text) {
                (Some(a), Some(b)) => Some(Cow::Owned(concat_in_plan_order(a, b, plan)?)),
                _ => None,
            };
            TrainItem { key: i, speech: Cow::Owned(speech), text, targets: Targets::primary_only(primary) }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{Consensus, EmotionClass, SoftLabel};

    fn entry(split: Split, probs: [f64; NUM_CLASSES]) -> ManifestEntry {
        ManifestEntry {
            sample_id: "x".into(),
            split,
            probs,
            n_annotations: 4,
            consensus: Consensus::Class(EmotionClass::Neutral),
            secondary: None,
            attributes: None,
            embedding_path: None,
            audio_path: None,
            text_embedding_path: None,
            mix: None,
        }
    }

    #[test]
    fn reweighting_only_on_train_split() {
        let p = SoftLabel::one_hot(EmotionClass::Neutral, 4).probs;
        let mut mixed = p;
        mixed[0] = 0.5;
        mixed[4] = 0.5;
        let mut q = [0.1; NUM_CLASSES];
        q[0] = 0.2;
        let w = class_weights(&crate::labels::smooth_distribution(&q)).unwrap();
        for split in [Split::Dev, Split::Test] {
            assert_eq!(training_target(&entry(split, mixed), &mixed, Some(&w), true).unwrap(), mixed);
        }
        let t = training_target(&entry(Split::Train, mixed), &mixed, Some(&w), true).unwrap();
        assert_ne!(t, mixed);
        assert!(t[4] > t[0]);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(training_target(&entry(Split::Train, mixed), &mixed, None, true).unwrap(), mixed);
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let a = epoch_order(3, 1, 50);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(3, 1, 50));
        assert_ne!(a, epoch_order(3, 2, 50));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { selection_weight: 1.5, ..Default::default() }.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "model": {"conv_channels": 8}}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert_eq!(parsed.model.conv_channels, 8);
        assert_eq!(parsed.learning_rate, 5e-4);
    }
}
