//! Annotation dropout and majority/minority mixing.
//!
//! Every random choice is keyed by `(seed, epoch, sample_id)` through
//! [`RngKey`], so an epoch's augmentation stream is the same no matter how the
//! samples are scheduled.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError};
use crate::features::{read_embeddings, write_embeddings, EmbeddingSequence, FeatureError};
use crate::labels::{
    build_soft_label, empirical_distribution, AnnotationRecord, Consensus, EmotionClass, SoftLabel, Split,
    NUM_CLASSES,
};
use crate::manifest::{Manifest, ManifestEntry};
use crate::rng::{RngKey, Stream};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("no minority-class samples to mix with")]
    EmptyMinorityPool,
    #[error("cannot mix embeddings: {0}")]
    ShapeMismatch(String),
    #[error("sample {0:?} has no {1} to mix")]
    MissingMedia(String, &'static str),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Labels(#[from] crate::labels::LabelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability of mixing a majority-class sample.
    pub p_mix: f64,
    /// Fraction of a sample's votes removed (majority votes only).
    pub dropout_rate: f64,
    /// Upper bound of the silence/overlap duration.
    pub max_gap_seconds: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { p_mix: 0.3, dropout_rate: 0.2, max_gap_seconds: 2.0, seed: 0 }
    }
}

impl AugmentConfig {
    /// No dropout, no mixing.
    pub fn disabled() -> Self {
        Self { p_mix: 0.0, dropout_rate: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.p_mix) {
            return Err(AugmentError::InvalidConfig(format!("p_mix={} not in [0, 1]", self.p_mix)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(AugmentError::InvalidConfig(format!("dropout_rate={} not in [0, 1)", self.dropout_rate)));
        }
        if !(self.max_gap_seconds >= 0.0) || !self.max_gap_seconds.is_finite() {
            return Err(AugmentError::InvalidConfig(format!("max_gap_seconds={}", self.max_gap_seconds)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    Silence,
    Overlap,
}

/// How two samples are joined. `first`/`second` name the samples in output order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub first: String,
    pub second: String,
    pub mode: MixMode,
    pub t_seconds: f64,
    /// True when the minority sample leads.
    pub order_swapped: bool,
}

/// Removes `⌊rate·n⌋` majority-class votes chosen uniformly; minority and
/// `other` votes are never touched and at least one vote always survives.
pub fn annotation_dropout(annotations: &[AnnotationRecord], cfg: &AugmentConfig, key: &RngKey) -> Vec<AnnotationRecord> {
    let keep = dropout_mask(annotations.iter().map(|a| a.primary), cfg.dropout_rate, key);
    annotations
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(a, _)| a.clone())
        .collect()
}

fn dropout_mask(votes: impl Iterator<Item = EmotionClass>, rate: f64, key: &RngKey) -> Vec<bool> {
    let votes: Vec<EmotionClass> = votes.collect();
    let n = votes.len();
    let mut keep = vec![true; n];
    let eligible: Vec<usize> = (0..n).filter(|&i| votes[i].is_majority()).collect();
    let n_drop = ((rate * n as f64).floor() as usize)
        .min(eligible.len())
        .min(n.saturating_sub(1));
    if n_drop == 0 {
        return keep;
    }
    let mut rng = key.rng(Stream::Dropout);
    for pick in index::sample(&mut rng, eligible.len(), n_drop) {
        keep[eligible[pick]] = false;
    }
    keep
}

/// Dropout applied to a vote-count label. `None` when the label does not
/// decompose into whole votes (e.g. an already mixed label).
pub fn dropout_label(label: &SoftLabel, cfg: &AugmentConfig, key: &RngKey) -> Option<SoftLabel> {
    let votes = label.reconstruct_votes()?;
    let records: Vec<AnnotationRecord> = votes
        .iter()
        .enumerate()
        .map(|(i, c)| AnnotationRecord::vote(&key.sample_id, &i.to_string(), *c))
        .collect();
    let kept = annotation_dropout(&records, cfg, key);
    build_soft_label(&kept).ok()
}

/// Bernoulli(p_mix) for majority-consensus samples, never otherwise.
pub fn should_mix(consensus: Consensus, cfg: &AugmentConfig, key: &RngKey) -> bool {
    if !consensus.is_majority() || cfg.p_mix <= 0.0 {
        return false;
    }
    key.rng(Stream::MixDecision).random_bool(cfg.p_mix.min(1.0))
}

/// Minority-sample pools with class probabilities ∝ 1/q.
#[derive(Debug, Clone, PartialEq)]
pub struct MinoritySampler {
    pools: [Vec<usize>; 4],
    weights: [f64; 4],
}

impl MinoritySampler {
    /// `samples` yields `(index, consensus)`; only minority-consensus samples
    /// are pooled. Classes without samples get zero weight.
    pub fn new(
        samples: impl IntoIterator<Item = (usize, Consensus)>,
        q: &[f64; NUM_CLASSES],
    ) -> Result<Self, AugmentError> {
        let mut pools: [Vec<usize>; 4] = Default::default();
        for (i, c) in samples {
            if let Some(k) = c.class().filter(|k| k.is_minority()) {
                pools[k.index() - 4].push(i);
            }
        }
        let mut weights = [0.0; 4];
        for (j, class) in EmotionClass::MINORITY.iter().enumerate() {
            if !pools[j].is_empty() {
                weights[j] = 1.0 / q[class.index()];
            }
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(AugmentError::EmptyMinorityPool);
        }
        Ok(Self { pools, weights: weights.map(|w| w / total) })
    }

    /// Class sampling probabilities in the order disgust, contempt, fear, surprise.
    pub fn class_weights(&self) -> [f64; 4] {
        self.weights
    }

    pub fn sample_partner(&self, key: &RngKey) -> usize {
        let mut rng = key.rng(Stream::Partner);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut class = self.weights.iter().rposition(|w| *w > 0.0).expect("non-empty sampler");
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if *w > 0.0 && u < acc {
                class = j;
                break;
            }
        }
        let pool = &self.pools[class];
        pool[rng.random_range(0..pool.len())]
    }
}

pub fn make_mix_plan(maj_id: &str, min_id: &str, cfg: &AugmentConfig, key: &RngKey) -> MixPlan {
    let mut rng = key.rng(Stream::MixPlan);
    let order_swapped = rng.random_bool(0.5);
    let mode = if rng.random_bool(0.5) { MixMode::Overlap } else { MixMode::Silence };
    let t_seconds = if cfg.max_gap_seconds > 0.0 {
        rng.random_range(0.0..=cfg.max_gap_seconds)
    } else {
        0.0
    };
    let (first, second) = if order_swapped { (min_id, maj_id) } else { (maj_id, min_id) };
    MixPlan {
        first: first.to_string(),
        second: second.to_string(),
        mode,
        t_seconds,
        order_swapped,
    }
}

/// `(d_maj + d_min) / 2`.
pub fn mix_labels(d_maj: &SoftLabel, d_min: &SoftLabel) -> SoftLabel {
    let mut probs = [0.0; NUM_CLASSES];
    for i in 0..NUM_CLASSES {
        probs[i] = (d_maj.probs[i] + d_min.probs[i]) / 2.0;
    }
    SoftLabel { probs, n_annotations: d_maj.n_annotations + d_min.n_annotations }
}

/// Frame-level analogue of waveform mixing: zero frames for silence, the
/// elementwise mean of the two sides for overlap. Output is capped at 15 s.
pub fn mix_embeddings(
    maj: &EmbeddingSequence,
    min: &EmbeddingSequence,
    plan: &MixPlan,
) -> Result<EmbeddingSequence, AugmentError> {
    if maj.n_layers != min.n_layers || maj.dim != min.dim || maj.frame_rate_hz != min.frame_rate_hz {
        return Err(AugmentError::ShapeMismatch(format!(
            "layers {}/{}, dim {}/{}, frame rate {}/{}",
            maj.n_layers, min.n_layers, maj.dim, min.dim, maj.frame_rate_hz, min.frame_rate_hz
        )));
    }
    let (a, b) = if plan.order_swapped { (min, maj) } else { (maj, min) };
    let gap = audio::gap_len(plan.t_seconds, a.frame_rate_hz as f64);
    let mixed = match plan.mode {
        MixMode::Silence => {
            let n = a.n_frames + gap + b.n_frames;
            let mut out = EmbeddingSequence::zeros(a.n_layers, n, a.dim, a.frame_rate_hz);
            for l in 0..a.n_layers {
                for t in 0..a.n_frames {
                    out.frame_mut(l, t).copy_from_slice(a.frame(l, t));
                }
                for t in 0..b.n_frames {
                    out.frame_mut(l, a.n_frames + gap + t).copy_from_slice(b.frame(l, t));
                }
            }
            out
        }
        MixMode::Overlap => {
            let gap = gap.min(a.n_frames).min(b.n_frames);
            let start = a.n_frames - gap;
            let n = a.n_frames + b.n_frames - gap;
            let mut out = EmbeddingSequence::zeros(a.n_layers, n, a.dim, a.frame_rate_hz);
            for l in 0..a.n_layers {
                for t in 0..start {
                    out.frame_mut(l, t).copy_from_slice(a.frame(l, t));
                }
                for k in 0..gap {
                    let (x, y) = (a.frame(l, start + k), b.frame(l, k));
                    for ((o, x), y) in out.frame_mut(l, start + k).iter_mut().zip(x).zip(y) {
                        *o = (x + y) / 2.0;
                    }
                }
                for t in gap..b.n_frames {
                    out.frame_mut(l, start + t).copy_from_slice(b.frame(l, t));
                }
            }
            out
        }
    };
    Ok(mixed.truncated_to_cap())
}

/// Token sequences are simply concatenated in plan order.
pub fn concat_in_plan_order(
    maj: &EmbeddingSequence,
    min: &EmbeddingSequence,
    plan: &MixPlan,
) -> Result<EmbeddingSequence, AugmentError> {
    let (a, b) = if plan.order_swapped { (min, maj) } else { (maj, min) };
    if a.n_layers != b.n_layers || a.dim != b.dim {
        return Err(AugmentError::ShapeMismatch("text embeddings differ in shape".into()));
    }
    let n = a.n_frames + b.n_frames;
    let mut out = EmbeddingSequence::zeros(a.n_layers, n, a.dim, a.frame_rate_hz);
    for l in 0..a.n_layers {
        for t in 0..a.n_frames {
            out.frame_mut(l, t).copy_from_slice(a.frame(l, t));
        }
        for t in 0..b.n_frames {
            out.frame_mut(l, a.n_frames + t).copy_from_slice(b.frame(l, t));
        }
    }
    Ok(out)
}

/// What happens to one training sample in one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDecision {
    /// Target after dropout and, when mixed, label averaging.
    pub label: SoftLabel,
    /// Partner index and plan when the sample is mixed.
    pub mix: Option<(usize, MixPlan)>,
}

/// Dropout first, then mixing. The mix decision follows the sample's
/// original consensus; the partner contributes its original label.
pub fn decide(
    index: usize,
    entries: &[ManifestEntry],
    sampler: Option<&MinoritySampler>,
    cfg: &AugmentConfig,
    epoch: u64,
) -> AugmentDecision {
    let entry = &entries[index];
    let key = RngKey::new(cfg.seed, epoch, entry.sample_id.clone());
    let original = entry.soft_label();
    let mut label = original;
    if cfg.dropout_rate > 0.0 {
        if let Some(dropped) = dropout_label(&original, cfg, &key) {
            label = dropped;
        }
    }
    let mix = match sampler {
        Some(s) if should_mix(entry.consensus, cfg, &key) => {
            let partner = s.sample_partner(&key);
            let plan = make_mix_plan(&entry.sample_id, &entries[partner].sample_id, cfg, &key);
            label = mix_labels(&label, &entries[partner].soft_label());
            Some((partner, plan))
        }
        _ => None,
    };
    AugmentDecision { label, mix }
}

/// Builds the minority sampler for a training set, or `None` when there is
/// nothing to mix with or mixing is disabled.
pub fn sampler_for(entries: &[ManifestEntry], cfg: &AugmentConfig) -> Result<Option<MinoritySampler>, AugmentError> {
    if cfg.p_mix <= 0.0 {
        return Ok(None);
    }
    let labels: Vec<SoftLabel> = entries.iter().map(ManifestEntry::soft_label).collect();
    let q = empirical_distribution(&labels)?;
    MinoritySampler::new(entries.iter().enumerate().map(|(i, e)| (i, e.consensus)), &q).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MediaMode {
    Waveform,
    Embedding,
}

/// Writes an augmented copy of the training split to `out_dir`.
///
/// Mixed majority samples are replaced by entries named `"{maj}+{min}"` whose
/// media land in `out_dir/mixed/`; every other entry is passed through with
/// absolute media paths. Dev and test entries are never touched.
pub fn materialize(
    manifest: &Manifest,
    cfg: &AugmentConfig,
    mode: MediaMode,
    epoch: u64,
    out_dir: &Path,
) -> Result<Manifest, AugmentError> {
    cfg.validate()?;
    let absolute = |rel: &Option<String>| rel.as_ref().map(|r| manifest.resolve(r).display().to_string());
    let train_idx: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].split == Split::Train)
        .collect();
    let train: Vec<ManifestEntry> = train_idx.iter().map(|&i| manifest.entries[i].clone()).collect();
    let sampler = match sampler_for(&train, cfg) {
        Ok(s) => s,
        Err(AugmentError::EmptyMinorityPool) => None,
        Err(e) => return Err(e),
    };

    let mut out = Vec::with_capacity(manifest.entries.len());
    let mut next_train = 0;
    for entry in &manifest.entries {
        let mut e = entry.clone();
        e.embedding_path = absolute(&entry.embedding_path);
        e.audio_path = absolute(&entry.audio_path);
        e.text_embedding_path = absolute(&entry.text_embedding_path);
        if entry.split != Split::Train {
            out.push(e);
            continue;
        }
        let decision = decide(next_train, &train, sampler.as_ref(), cfg, epoch);
        next_train += 1;
        e.set_label(decision.label);
        if let Some((partner, plan)) = decision.mix {
            let min = &train[partner];
            let id = format!("{}+{}", entry.sample_id, min.sample_id);
            e.sample_id = id.clone();
            e.secondary = None;
            e.attributes = None;
            e.text_embedding_path = None;
            match mode {
                MediaMode::Embedding => {
                    let load = |x: &ManifestEntry| -> Result<EmbeddingSequence, AugmentError> {
                        let rel = x.embedding_path.as_ref().ok_or_else(|| AugmentError::MissingMedia(x.sample_id.clone(), "embedding"))?;
                        Ok(read_embeddings(manifest.resolve(rel))?)
                    };
                    let mixed = mix_embeddings(&load(entry)?, &load(min)?, &plan)?;
                    let path = out_dir.join("mixed").join(format!("{id}.semb"));
                    write_embeddings(&path, &mixed)?;
                    e.embedding_path = Some(path.display().to_string());
                    e.audio_path = None;
                }
                MediaMode::Waveform => {
                    let load = |x: &ManifestEntry| -> Result<audio::Waveform, AugmentError> {
                        let rel = x.audio_path.as_ref().ok_or_else(|| AugmentError::MissingMedia(x.sample_id.clone(), "audio"))?;
                        Ok(audio::read_wav(manifest.resolve(rel))?)
                    };
                    let mixed = audio::truncate_to_default_cap(audio::mix_waveforms(&load(entry)?, &load(min)?, &plan)?);
                    let path = out_dir.join("mixed").join(format!("{id}.wav"));
                    audio::write_wav(&path, &mixed)?;
                    e.audio_path = Some(path.display().to_string());
                    // Embeddings for mixed audio come from re-running the extractor.
                    e.embedding_path = None;
                }
            }
            e.mix = Some(plan);
        }
        out.push(e);
    }
    Ok(Manifest::new(out, PathBuf::from(out_dir)))
}
