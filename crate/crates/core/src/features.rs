//! Encoder embedding sequences: the `SEMB` container and a synthetic generator.
//!
//! File layout, little-endian:
//!
//! ```text
//! magic "SEMB" | version u32 = 1 | n_layers u32 | n_frames u32 | dim u32 |
//! frame_rate_hz f32 | payload f32[n_layers][n_frames][dim]
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::audio::{self, Waveform, SAMPLE_RATE_HZ};
use crate::labels::{
    aggregate_secondary, consensus_of, soft_label_from_votes, EmotionClass, LabeledSample, Split, NUM_CLASSES,
};
use crate::manifest::{write_atomic, Manifest, ManifestEntry};
use crate::rng::{RngKey, Stream};

pub const MAGIC: &[u8; 4] = b"SEMB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Longest input the model sees.
pub const CAP_SECONDS: f64 = 15.0;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected \"SEMB\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found}, expected {VERSION}")]
    VersionMismatch { found: u32 },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing data: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Hidden states of one utterance: `n_layers × n_frames × dim`, layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub n_layers: usize,
    pub n_frames: usize,
    pub dim: usize,
    pub frame_rate_hz: f32,
    pub data: Vec<f32>,
}

impl EmbeddingSequence {
    pub fn new(
        n_layers: usize,
        n_frames: usize,
        dim: usize,
        frame_rate_hz: f32,
        data: Vec<f32>,
    ) -> Result<Self, FeatureError> {
        if n_layers == 0 || n_frames == 0 || dim == 0 {
            return Err(FeatureError::InvalidShape(format!(
                "layers={n_layers} frames={n_frames} dim={dim} must all be >= 1"
            )));
        }
        if !(frame_rate_hz > 0.0) || !frame_rate_hz.is_finite() {
            return Err(FeatureError::InvalidShape(format!("frame rate {frame_rate_hz}")));
        }
        let expected = n_layers * n_frames * dim;
        if data.len() != expected {
            return Err(FeatureError::InvalidShape(format!(
                "payload has {} values, shape needs {expected}",
                data.len()
            )));
        }
        Ok(Self { n_layers, n_frames, dim, frame_rate_hz, data })
    }

    pub fn zeros(n_layers: usize, n_frames: usize, dim: usize, frame_rate_hz: f32) -> Self {
        Self {
            n_layers,
            n_frames,
            dim,
            frame_rate_hz,
            data: vec![0.0; n_layers * n_frames * dim],
        }
    }

    #[inline]
    pub fn frame(&self, layer: usize, t: usize) -> &[f32] {
        let start = (layer * self.n_frames + t) * self.dim;
        &self.data[start..start + self.dim]
    }

    #[inline]
    pub fn frame_mut(&mut self, layer: usize, t: usize) -> &mut [f32] {
        let start = (layer * self.n_frames + t) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// Frame budget for the input cap at this frame rate.
    pub fn cap_frames(&self) -> usize {
        cap_frames(self.frame_rate_hz)
    }

    /// Keeps at most the first [`cap_frames`] frames.
    pub fn truncated_to_cap(self) -> Self {
        let cap = self.cap_frames();
        self.truncated(cap)
    }

    pub fn truncated(self, max_frames: usize) -> Self {
        if self.n_frames <= max_frames {
            return self;
        }
        let mut out = Self::zeros(self.n_layers, max_frames, self.dim, self.frame_rate_hz);
        for l in 0..self.n_layers {
            for t in 0..max_frames {
                out.frame_mut(l, t).copy_from_slice(self.frame(l, t));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.n_layers, self.n_frames, self.dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.frame_rate_hz.to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(FeatureError::BadMagic { found: bytes[..4].try_into().unwrap() });
            }
            return Err(FeatureError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(FeatureError::BadMagic { found: magic });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(FeatureError::VersionMismatch { found: version });
        }
        let (n_layers, n_frames, dim) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let frame_rate_hz = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
        let expected = n_layers
            .checked_mul(n_frames)
            .and_then(|x| x.checked_mul(dim))
            .and_then(|x| x.checked_mul(4))
            .and_then(|x| x.checked_add(HEADER_LEN))
            .ok_or_else(|| FeatureError::InvalidShape("declared shape overflows".into()))?;
        if bytes.len() < expected {
            return Err(FeatureError::Truncated { expected, actual: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(FeatureError::TrailingBytes { expected, actual: bytes.len() });
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(n_layers, n_frames, dim, frame_rate_hz, data)
    }
}

pub fn cap_frames(frame_rate_hz: f32) -> usize {
    (CAP_SECONDS * frame_rate_hz as f64).ceil() as usize
}

pub fn write_embeddings(path: impl AsRef<Path>, e: &EmbeddingSequence) -> Result<(), FeatureError> {
    let path = path.as_ref();
    write_atomic(path, &e.to_bytes()).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSequence, FeatureError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    EmbeddingSequence::from_bytes(&bytes)
}

/// Parameters of the Gaussian-cluster fixture generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dim: usize,
    pub n_layers: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub frame_rate_hz: f32,
    /// Scale of the class means (each coordinate ~ N(0, mean_scale²)).
    pub mean_scale: f64,
    /// Per-sample offset from the class mean; does not average out over frames.
    pub sample_sigma: f64,
    /// Per-frame noise around the sample center.
    pub noise_sigma: f64,
    pub annotators: u32,
    /// Probability that an annotator votes for a random other class.
    pub vote_noise: f64,
    pub seed: u64,
    /// Require pairwise class-mean distance > 4 × noise level.
    pub separable: bool,
    pub with_attributes: bool,
    pub with_audio: bool,
}

impl SynthSpec {
    /// Well separated clusters with unanimous annotators.
    pub fn separable(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            n_layers: 2,
            frames_min: 4,
            frames_max: 10,
            frame_rate_hz: 50.0,
            mean_scale: 1.0,
            sample_sigma: 0.05,
            noise_sigma: 0.1,
            annotators: 5,
            vote_noise: 0.0,
            seed,
            separable: true,
            with_attributes: false,
            with_audio: false,
        }
    }

    /// Overlapping clusters with noisy annotators.
    pub fn overlapping(dim: usize, seed: u64) -> Self {
        Self {
            sample_sigma: 0.8,
            noise_sigma: 0.5,
            vote_noise: 0.25,
            separable: false,
            ..Self::separable(dim, seed)
        }
    }
}

/// Per-split, per-class sample counts (indexed by class).
pub type ClassCounts = [usize; NUM_CLASSES];

/// Balanced counts over the eight scored classes, none for `other`.
pub fn balanced_counts(n: usize) -> ClassCounts {
    let mut c = [n; NUM_CLASSES];
    c[EmotionClass::Other.index()] = 0;
    c
}

/// Majority classes get `majority` samples each, minority classes `minority`.
pub fn imbalanced_counts(majority: usize, minority: usize, other: usize) -> ClassCounts {
    let mut c = [0; NUM_CLASSES];
    for k in EmotionClass::MAJORITY {
        c[k.index()] = majority;
    }
    for k in EmotionClass::MINORITY {
        c[k.index()] = minority;
    }
    c[EmotionClass::Other.index()] = other;
    c
}

/// Class centers for a spec. The separable preset resamples until centers are
/// far enough apart.
pub fn class_means(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, spec.mean_scale).expect("finite scale");
    let noise = spec.noise_sigma.max(spec.sample_sigma);
    for attempt in 0u64.. {
        let mut rng = RngKey::new(spec.seed, attempt, "class-means").rng(Stream::Synth);
        let means: Vec<Vec<f64>> = (0..NUM_CLASSES)
            .map(|_| (0..spec.dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        if !spec.separable || min_pairwise_distance(&means) > 4.0 * noise {
            return means;
        }
    }
    unreachable!()
}

pub fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

/// Writes a synthetic corpus under `out_dir` (`emb/`, optionally `wav/`) and
/// returns its manifest with paths relative to `out_dir`.
pub fn synth_dataset(
    spec: &SynthSpec,
    splits: &[(Split, ClassCounts)],
    out_dir: impl AsRef<Path>,
) -> Result<Manifest, FeatureError> {
    let out_dir = out_dir.as_ref();
    let means = class_means(spec);
    let mut entries = Vec::new();
    for (split, counts) in splits {
        for class in EmotionClass::ALL {
            for i in 0..counts[class.index()] {
                let sample_id = format!("{}-{}-{i:05}", split_name(*split), class.name());
                let sample = synth_sample(spec, &means, class, &sample_id);
                let emb_rel = format!("emb/{sample_id}.semb");
                write_embeddings(out_dir.join(&emb_rel), &sample.embeddings)?;
                let audio_rel = if spec.with_audio {
                    let rel = format!("wav/{sample_id}.wav");
                    let wav = synth_tone(class, sample.embeddings.n_frames as f64 / spec.frame_rate_hz as f64);
                    audio::write_wav(out_dir.join(&rel), &wav).map_err(|e| FeatureError::Io {
                        path: rel.clone(),
                        source: std::io::Error::other(e.to_string()),
                    })?;
                    Some(rel)
                } else {
                    None
                };
                let labeled = LabeledSample {
                    sample_id: sample_id.clone(),
                    consensus: consensus_of(&sample.label.probs),
                    soft_label: sample.label,
                    secondary: sample.secondary,
                    attributes: sample.attributes,
                    split: *split,
                };
                entries.push(ManifestEntry::from_sample(&labeled, Some(emb_rel), audio_rel));
            }
        }
    }
    Ok(Manifest::new(entries, out_dir))
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

struct SynthSample {
    embeddings: EmbeddingSequence,
    label: crate::labels::SoftLabel,
    secondary: Option<[f64; NUM_CLASSES]>,
    attributes: Option<[f64; 3]>,
}

fn synth_sample(spec: &SynthSpec, means: &[Vec<f64>], class: EmotionClass, sample_id: &str) -> SynthSample {
    let mut rng = RngKey::new(spec.seed, 0, sample_id).rng(Stream::Synth);
    let n_frames = rng.random_range(spec.frames_min..=spec.frames_max.max(spec.frames_min));
    let center: Vec<f64> = means[class.index()]
        .iter()
        .map(|m| m + spec.sample_sigma * gauss(&mut rng))
        .collect();
    let mut e = EmbeddingSequence::zeros(spec.n_layers, n_frames, spec.dim, spec.frame_rate_hz);
    for l in 0..spec.n_layers {
        // Deeper layers carry a cleaner copy of the class signal.
        let gain = (l + 1) as f64 / spec.n_layers as f64;
        for t in 0..n_frames {
            for (x, c) in e.frame_mut(l, t).iter_mut().zip(&center) {
                *x = (gain * c + spec.noise_sigma * gauss(&mut rng)) as f32;
            }
        }
    }

    let votes: Vec<EmotionClass> = (0..spec.annotators.max(1))
        .map(|_| {
            if spec.vote_noise > 0.0 && rng.random_bool(spec.vote_noise.clamp(0.0, 1.0)) {
                let k = rng.random_range(0..NUM_CLASSES - 1);
                EmotionClass::ALL[if k >= class.index() { k + 1 } else { k }]
            } else {
                class
            }
        })
        .collect();
    let label = soft_label_from_votes(votes).expect("at least one annotator");

    let (secondary, attributes) = if spec.with_attributes {
        // Neighbouring class as a secondary mention; attributes from a fixed class profile.
        let neighbour = EmotionClass::ALL[(class.index() + 1) % NUM_CLASSES];
        let anns = [crate::labels::AnnotationRecord {
            secondary: vec![neighbour],
            ..crate::labels::AnnotationRecord::vote(sample_id, "synth", class)
        }];
        let k = class.index() as f64 / (NUM_CLASSES - 1) as f64;
        let jitter = |rng: &mut rand_chacha::ChaCha8Rng| 0.05 * gauss(rng);
        let attrs = [k, 1.0 - k, 0.5 + 0.4 * (k - 0.5)]
            .map(|v| (v + jitter(&mut rng)).clamp(0.0, 1.0));
        (aggregate_secondary(&anns), Some(attrs))
    } else {
        (None, None)
    };
    SynthSample { embeddings: e, label, secondary, attributes }
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// Class-dependent sine tone at 16 kHz, amplitude 0.3.
pub fn synth_tone(class: EmotionClass, seconds: f64) -> Waveform {
    let n = (seconds * SAMPLE_RATE_HZ as f64).round() as usize;
    let freq = 110.0 * (1.0 + class.index() as f64);
    let samples = (0..n)
        .map(|i| (0.3 * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE_HZ as f64).sin()) as f32)
        .collect();
    Waveform { samples, sample_rate_hz: SAMPLE_RATE_HZ }
}
