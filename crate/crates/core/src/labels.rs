//! Emotion classes, multi-annotator label aggregation and class re-weighting.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Size of the label space: eight scored classes plus `other`.
pub const NUM_CLASSES: usize = 9;

/// Number of classes that take part in scoring (everything except `other`).
pub const NUM_SCORED: usize = 8;

/// Additive smoothing applied to the empirical class distribution.
pub const Q_SMOOTHING: f64 = 1e-6;

/// Tolerance used when checking that a vector lies on the probability simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

const ATTR_MIN: f64 = 1.0;
const ATTR_MAX: f64 = 7.0;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("line {line}: unknown emotion token {token:?}")]
    UnknownEmotion { line: u64, token: String },
    #[error("line {line}: duplicate annotation for sample {sample_id:?} by annotator {annotator_id:?}")]
    DuplicateAnnotation {
        line: u64,
        sample_id: String,
        annotator_id: String,
    },
    #[error("line {line}: {field}={value} is outside [1, 7]")]
    AttributeOutOfRange { line: u64, field: &'static str, value: f64 },
    #[error("line {line}: {field} is not a number: {value:?}")]
    BadNumber { line: u64, field: &'static str, value: String },
    #[error("no annotations")]
    NoAnnotations,
    #[error("annotations for one sample mix sample ids {0:?} and {1:?}")]
    MixedSamples(String, String),
    #[error("empirical distribution needs at least one sample")]
    EmptyDataset,
    #[error("class weight undefined: q[{class}] = {value}")]
    NonPositiveFrequency { class: EmotionClass, value: f64 },
    #[error("re-weighted target has no mass")]
    DisjointSupport,
    #[error("not a distribution: {0}")]
    NotADistribution(String),
}

/// The fixed label space. Discriminants are the class indices used everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EmotionClass {
    Neutral = 0,
    Happy = 1,
    Sad = 2,
    Angry = 3,
    Disgust = 4,
    Contempt = 5,
    Fear = 6,
    Surprise = 7,
    Other = 8,
}

impl EmotionClass {
    pub const ALL: [EmotionClass; NUM_CLASSES] = [
        EmotionClass::Neutral,
        EmotionClass::Happy,
        EmotionClass::Sad,
        EmotionClass::Angry,
        EmotionClass::Disgust,
        EmotionClass::Contempt,
        EmotionClass::Fear,
        EmotionClass::Surprise,
        EmotionClass::Other,
    ];

    pub const MAJORITY: [EmotionClass; 4] = [
        EmotionClass::Neutral,
        EmotionClass::Happy,
        EmotionClass::Sad,
        EmotionClass::Angry,
    ];

    pub const MINORITY: [EmotionClass; 4] = [
        EmotionClass::Disgust,
        EmotionClass::Contempt,
        EmotionClass::Fear,
        EmotionClass::Surprise,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionClass::Neutral => "neutral",
            EmotionClass::Happy => "happy",
            EmotionClass::Sad => "sad",
            EmotionClass::Angry => "angry",
            EmotionClass::Disgust => "disgust",
            EmotionClass::Contempt => "contempt",
            EmotionClass::Fear => "fear",
            EmotionClass::Surprise => "surprise",
            EmotionClass::Other => "other",
        }
    }

    pub fn is_majority(self) -> bool {
        self.index() < 4
    }

    pub fn is_minority(self) -> bool {
        (4..8).contains(&self.index())
    }

    /// True for the eight classes that are scored (everything but `other`).
    pub fn is_scored(self) -> bool {
        self != EmotionClass::Other
    }
}

impl fmt::Display for EmotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| s.to_string())
    }
}

impl Serialize for EmotionClass {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for EmotionClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse()
            .map_err(|t| serde::de::Error::custom(format!("unknown emotion {t:?}")))
    }
}

/// Sample-level agreement: a unique plurality class, or no agreement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Consensus {
    Class(EmotionClass),
    NoAgreement,
}

impl Consensus {
    pub fn class(self) -> Option<EmotionClass> {
        match self {
            Consensus::Class(c) => Some(c),
            Consensus::NoAgreement => None,
        }
    }

    pub fn is_majority(self) -> bool {
        self.class().is_some_and(EmotionClass::is_majority)
    }

    pub fn is_minority(self) -> bool {
        self.class().is_some_and(EmotionClass::is_minority)
    }

    /// Scored classes only: no-agreement and `other` are excluded from evaluation.
    pub fn scored_class(self) -> Option<EmotionClass> {
        self.class().filter(|c| c.is_scored())
    }

    pub fn name(self) -> &'static str {
        match self {
            Consensus::Class(c) => c.name(),
            Consensus::NoAgreement => "no_agreement",
        }
    }
}

impl Serialize for Consensus {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Consensus {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "no_agreement" {
            return Ok(Consensus::NoAgreement);
        }
        s.parse()
            .map(Consensus::Class)
            .map_err(|t| serde::de::Error::custom(format!("unknown consensus {t:?}")))
    }
}

/// One annotator's judgment of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub annotator_id: String,
    pub primary: EmotionClass,
    pub secondary: Vec<EmotionClass>,
    pub arousal: Option<f64>,
    pub valence: Option<f64>,
    pub dominance: Option<f64>,
}

impl AnnotationRecord {
    /// A vote with no secondary emotions or attribute scores.
    pub fn vote(sample_id: &str, annotator_id: &str, primary: EmotionClass) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            annotator_id: annotator_id.to_string(),
            primary,
            secondary: Vec::new(),
            arousal: None,
            valence: None,
            dominance: None,
        }
    }
}

/// A probability distribution over the nine classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftLabel {
    pub probs: [f64; NUM_CLASSES],
    pub n_annotations: u32,
}

impl SoftLabel {
    pub fn new(probs: [f64; NUM_CLASSES], n_annotations: u32) -> Result<Self, LabelError> {
        check_simplex(&probs, SIMPLEX_TOL)?;
        if n_annotations == 0 {
            return Err(LabelError::NotADistribution("n_annotations must be >= 1".into()));
        }
        Ok(Self { probs, n_annotations })
    }

    pub fn one_hot(class: EmotionClass, n_annotations: u32) -> Self {
        let mut probs = [0.0; NUM_CLASSES];
        probs[class.index()] = 1.0;
        Self { probs, n_annotations: n_annotations.max(1) }
    }

    pub fn consensus(&self) -> Consensus {
        consensus_of(&self.probs)
    }

    pub fn prob(&self, c: EmotionClass) -> f64 {
        self.probs[c.index()]
    }

    /// Minority-class probability mass.
    pub fn minority_mass(&self) -> f64 {
        EmotionClass::MINORITY.iter().map(|c| self.prob(*c)).sum()
    }

    /// Recovers the primary vote multiset when every `probs[c] * n_annotations`
    /// is integral. Votes come out grouped by class index.
    pub fn reconstruct_votes(&self) -> Option<Vec<EmotionClass>> {
        let n = self.n_annotations as f64;
        let mut votes = Vec::with_capacity(self.n_annotations as usize);
        for c in EmotionClass::ALL {
            let count = self.probs[c.index()] * n;
            let rounded = count.round();
            if (count - rounded).abs() > 1e-6 {
                return None;
            }
            votes.extend(std::iter::repeat_n(c, rounded as usize));
        }
        (votes.len() == self.n_annotations as usize).then_some(votes)
    }
}

pub fn check_simplex(v: &[f64], tol: f64) -> Result<(), LabelError> {
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(**x >= 0.0) || !x.is_finite()) {
        return Err(LabelError::NotADistribution(format!("entry {i} is {x}")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(LabelError::NotADistribution(format!("entries sum to {s}")));
    }
    Ok(())
}

/// Input split a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Aggregated targets for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample_id: String,
    pub soft_label: SoftLabel,
    pub consensus: Consensus,
    pub secondary: Option<[f64; NUM_CLASSES]>,
    pub attributes: Option<[f64; 3]>,
    pub split: Split,
}

/// Empirical class distribution `q` and its normalized inverse `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub q: [f64; NUM_CLASSES],
    pub w: [f64; NUM_CLASSES],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self {
            q: [1.0 / NUM_CLASSES as f64; NUM_CLASSES],
            w: [1.0 / NUM_CLASSES as f64; NUM_CLASSES],
        }
    }
}

pub fn parse_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>, LabelError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| LabelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_annotations_from_reader(file)
}

/// Parses the annotation CSV. Line numbers in errors count the header as line 1.
///
/// Unknown primary tokens are rejected. Secondary mentions outside the label
/// space are dropped.
pub fn parse_annotations_from_reader<R: Read>(reader: R) -> Result<Vec<AnnotationRecord>, LabelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let expected = ["sample_id", "annotator_id", "primary", "secondary", "arousal", "valence", "dominance"];
    let headers = rdr
        .headers()
        .map_err(|e| LabelError::Csv { line: 1, message: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(LabelError::Csv {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| LabelError::Csv { line, message: e.to_string() })?;
        let field = |k: usize| row.get(k).unwrap_or("");
        let sample_id = field(0).to_string();
        let annotator_id = field(1).to_string();
        if sample_id.is_empty() || annotator_id.is_empty() {
            return Err(LabelError::Csv { line, message: "empty sample_id or annotator_id".into() });
        }
        let primary = field(2)
            .parse::<EmotionClass>()
            .map_err(|token| LabelError::UnknownEmotion { line, token })?;
        let mut secondary = Vec::new();
        for tok in field(3).split(';').map(str::trim).filter(|t| !t.is_empty()) {
            if let Ok(c) = tok.parse::<EmotionClass>() {
                if !secondary.contains(&c) {
                    secondary.push(c);
                }
            }
        }
        let arousal = parse_attribute(field(4), line, "arousal")?;
        let valence = parse_attribute(field(5), line, "valence")?;
        let dominance = parse_attribute(field(6), line, "dominance")?;
        if !seen.insert((sample_id.clone(), annotator_id.clone())) {
            return Err(LabelError::DuplicateAnnotation { line, sample_id, annotator_id });
        }
        out.push(AnnotationRecord {
            sample_id,
            annotator_id,
            primary,
            secondary,
            arousal,
            valence,
            dominance,
        });
    }
    Ok(out)
}

fn parse_attribute(raw: &str, line: u64, field: &'static str) -> Result<Option<f64>, LabelError> {
    if raw.is_empty() {
        return Ok(None);
    }
    let value: f64 = raw.parse().map_err(|_| LabelError::BadNumber {
        line,
        field,
        value: raw.to_string(),
    })?;
    if !(ATTR_MIN..=ATTR_MAX).contains(&value) {
        return Err(LabelError::AttributeOutOfRange { line, field, value });
    }
    Ok(Some(value))
}

/// Groups records by sample id, in order of first appearance.
pub fn group_by_sample(records: &[AnnotationRecord]) -> Vec<(String, Vec<AnnotationRecord>)> {
    let mut order: Vec<(String, Vec<AnnotationRecord>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for r in records {
        match index.get(r.sample_id.as_str()) {
            Some(&i) => order[i].1.push(r.clone()),
            None => {
                index.insert(&r.sample_id, order.len());
                order.push((r.sample_id.clone(), vec![r.clone()]));
            }
        }
    }
    order
}

pub fn build_soft_label(annotations: &[AnnotationRecord]) -> Result<SoftLabel, LabelError> {
    let first = annotations.first().ok_or(LabelError::NoAnnotations)?;
    if let Some(other) = annotations.iter().find(|a| a.sample_id != first.sample_id) {
        return Err(LabelError::MixedSamples(first.sample_id.clone(), other.sample_id.clone()));
    }
    Ok(soft_label_from_votes(annotations.iter().map(|a| a.primary)).expect("non-empty"))
}

/// Vote-count distribution of a multiset of primary votes; `None` when empty.
pub fn soft_label_from_votes(votes: impl IntoIterator<Item = EmotionClass>) -> Option<SoftLabel> {
    let mut counts = [0u32; NUM_CLASSES];
    let mut n = 0u32;
    for v in votes {
        counts[v.index()] += 1;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let mut probs = [0.0; NUM_CLASSES];
    for (p, c) in probs.iter_mut().zip(counts) {
        *p = c as f64 / n as f64;
    }
    Some(SoftLabel { probs, n_annotations: n })
}

/// Unique strict argmax, or no agreement on ties.
pub fn consensus_of(probs: &[f64; NUM_CLASSES]) -> Consensus {
    let mut best = 0;
    let mut tied = false;
    for i in 1..NUM_CLASSES {
        if probs[i] > probs[best] {
            best = i;
            tied = false;
        } else if probs[i] == probs[best] {
            tied = true;
        }
    }
    if tied {
        Consensus::NoAgreement
    } else {
        Consensus::Class(EmotionClass::ALL[best])
    }
}

/// Arithmetic mean of a set of distributions, without smoothing.
pub fn mean_distribution<'a>(
    dists: impl IntoIterator<Item = &'a [f64; NUM_CLASSES]>,
) -> Result<[f64; NUM_CLASSES], LabelError> {
    let mut sum = [0.0; NUM_CLASSES];
    let mut n = 0usize;
    for d in dists {
        for (s, x) in sum.iter_mut().zip(d) {
            *s += x;
        }
        n += 1;
    }
    if n == 0 {
        return Err(LabelError::EmptyDataset);
    }
    Ok(sum.map(|s| s / n as f64))
}

/// Smoothed empirical class distribution `q` of a set of soft labels.
pub fn empirical_distribution<'a>(
    labels: impl IntoIterator<Item = &'a SoftLabel>,
) -> Result<[f64; NUM_CLASSES], LabelError> {
    let mean = mean_distribution(labels.into_iter().map(|l| &l.probs))?;
    Ok(smooth_distribution(&mean))
}

pub fn smooth_distribution(q: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let denom = 1.0 + NUM_CLASSES as f64 * Q_SMOOTHING;
    q.map(|x| (x + Q_SMOOTHING) / denom)
}

pub fn class_weights(q: &[f64; NUM_CLASSES]) -> Result<ClassWeights, LabelError> {
    for c in EmotionClass::ALL {
        let v = q[c.index()];
        if !(v > 0.0) || !v.is_finite() {
            return Err(LabelError::NonPositiveFrequency { class: c, value: v });
        }
    }
    let inv = q.map(|x| 1.0 / x);
    let total: f64 = inv.iter().sum();
    Ok(ClassWeights { q: *q, w: inv.map(|x| x / total) })
}

/// `d ∘ w` renormalized to sum one.
pub fn reweight_target(d: &SoftLabel, weights: &ClassWeights) -> Result<[f64; NUM_CLASSES], LabelError> {
    let raw = reweight_target_raw(&d.probs, &weights.w);
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(LabelError::DisjointSupport);
    }
    Ok(raw.map(|x| x / total))
}

/// Plain elementwise product, no renormalization.
pub fn reweight_target_raw(d: &[f64; NUM_CLASSES], w: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let mut out = [0.0; NUM_CLASSES];
    for i in 0..NUM_CLASSES {
        out[i] = d[i] * w[i];
    }
    out
}

/// Normalized secondary-emotion mention counts; `None` if nobody mentioned any.
pub fn aggregate_secondary(annotations: &[AnnotationRecord]) -> Option<[f64; NUM_CLASSES]> {
    let mut counts = [0.0; NUM_CLASSES];
    let mut n = 0.0;
    for c in annotations.iter().flat_map(|a| a.secondary.iter()) {
        counts[c.index()] += 1.0;
        n += 1.0;
    }
    (n > 0.0).then(|| counts.map(|x| x / n))
}

/// Mean arousal/valence/dominance mapped from [1, 7] onto [0, 1].
/// `None` unless every attribute has at least one score.
pub fn aggregate_attributes(annotations: &[AnnotationRecord]) -> Option<[f64; 3]> {
    let getters: [fn(&AnnotationRecord) -> Option<f64>; 3] =
        [|a| a.arousal, |a| a.valence, |a| a.dominance];
    let mut out = [0.0; 3];
    for (slot, get) in out.iter_mut().zip(getters) {
        let scores: Vec<f64> = annotations.iter().filter_map(get).collect();
        if scores.is_empty() {
            return None;
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        *slot = (mean - ATTR_MIN) / (ATTR_MAX - ATTR_MIN);
    }
    Some(out)
}

/// Groups records into samples and aggregates every target.
pub fn build_samples(records: &[AnnotationRecord], split: Split) -> Result<Vec<LabeledSample>, LabelError> {
    if records.is_empty() {
        return Err(LabelError::NoAnnotations);
    }
    group_by_sample(records)
        .into_iter()
        .map(|(sample_id, anns)| {
            let soft_label = build_soft_label(&anns)?;
            Ok(LabeledSample {
                sample_id,
                consensus: soft_label.consensus(),
                soft_label,
                secondary: aggregate_secondary(&anns),
                attributes: aggregate_attributes(&anns),
                split,
            })
        })
        .collect()
}

/// Consensus histogram: counts per class plus the no-agreement count.
pub fn class_histogram<'a>(
    consensus: impl IntoIterator<Item = &'a Consensus>,
) -> ([usize; NUM_CLASSES], usize) {
    let mut counts = [0; NUM_CLASSES];
    let mut none = 0;
    for c in consensus {
        match c {
            Consensus::Class(k) => counts[k.index()] += 1,
            Consensus::NoAgreement => none += 1,
        }
    }
    (counts, none)
}
