//! JSON Lines manifests for labeled samples and per-sample predictions.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::MixPlan;
use crate::labels::{check_simplex, consensus_of, Consensus, LabeledSample, SoftLabel, Split, NUM_CLASSES, SIMPLEX_TOL};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}:{line}: sample {sample_id:?}: {message}")]
    Invalid {
        path: String,
        line: usize,
        sample_id: String,
        message: String,
    },
    #[error("{1}: duplicate sample id {0:?}")]
    DuplicateId(String, String),
    #[error("{0}: no entries")]
    Empty(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io { path: path.display().to_string(), source }
}

/// One line of a labeled-sample manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub split: Split,
    pub probs: [f64; NUM_CLASSES],
    pub n_annotations: u32,
    pub consensus: Consensus,
    pub secondary: Option<[f64; NUM_CLASSES]>,
    pub attributes: Option<[f64; 3]>,
    pub embedding_path: Option<String>,
    pub audio_path: Option<String>,
    /// Token-level text embeddings in the same container format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embedding_path: Option<String>,
    /// Present on entries produced by majority/minority mixing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix: Option<MixPlan>,
}

impl ManifestEntry {
    pub fn from_sample(sample: &LabeledSample, embedding_path: Option<String>, audio_path: Option<String>) -> Self {
        Self {
            sample_id: sample.sample_id.clone(),
            split: sample.split,
            probs: sample.soft_label.probs,
            n_annotations: sample.soft_label.n_annotations,
            consensus: sample.consensus,
            secondary: sample.secondary,
            attributes: sample.attributes,
            embedding_path,
            audio_path,
            text_embedding_path: None,
            mix: None,
        }
    }

    pub fn soft_label(&self) -> SoftLabel {
        SoftLabel { probs: self.probs, n_annotations: self.n_annotations }
    }

    pub fn labeled_sample(&self) -> LabeledSample {
        LabeledSample {
            sample_id: self.sample_id.clone(),
            soft_label: self.soft_label(),
            consensus: self.consensus,
            secondary: self.secondary,
            attributes: self.attributes,
            split: self.split,
        }
    }

    /// Replaces the label and recomputes the consensus.
    pub fn set_label(&mut self, label: SoftLabel) {
        self.probs = label.probs;
        self.n_annotations = label.n_annotations;
        self.consensus = consensus_of(&label.probs);
    }

    fn validate(&self) -> Result<(), String> {
        check_simplex(&self.probs, SIMPLEX_TOL).map_err(|e| format!("probs: {e}"))?;
        if self.n_annotations == 0 {
            return Err("n_annotations must be >= 1".into());
        }
        if consensus_of(&self.probs) != self.consensus {
            return Err(format!(
                "consensus {:?} disagrees with probs (expected {:?})",
                self.consensus.name(),
                consensus_of(&self.probs).name()
            ));
        }
        if let Some(s) = &self.secondary {
            check_simplex(s, 1e-6).map_err(|e| format!("secondary: {e}"))?;
        }
        if let Some(a) = &self.attributes {
            if a.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err("attributes must lie in [0, 1]".into());
            }
        }
        Ok(())
    }
}

/// A loaded manifest; relative media paths resolve against `base_dir`.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self { entries, base_dir: base_dir.into() }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let entries = read_jsonl(path, |line, e: &ManifestEntry| {
            e.validate().map_err(|message| ManifestError::Invalid {
                path: path.display().to_string(),
                line,
                sample_id: e.sample_id.clone(),
                message,
            })
        })?;
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(ManifestError::DuplicateId(e.sample_id.clone(), path.display().to_string()));
            }
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { entries, base_dir })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Copy restricted to one split.
    pub fn filtered(&self, split: Split) -> Manifest {
        Manifest {
            entries: self.split(split).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        write_jsonl(path.as_ref(), &self.entries)
    }
}

/// One line of a prediction file: a system's probabilities for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub probs: [f64; NUM_CLASSES],
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, ManifestError> {
    let path = path.as_ref();
    let recs = read_jsonl(path, |line, r: &PredictionRecord| {
        check_simplex(&r.probs, 1e-6).map_err(|e| ManifestError::Invalid {
            path: path.display().to_string(),
            line,
            sample_id: r.sample_id.clone(),
            message: e.to_string(),
        })
    })?;
    let mut seen = HashSet::new();
    for r in &recs {
        if !seen.insert(r.sample_id.as_str()) {
            return Err(ManifestError::DuplicateId(r.sample_id.clone(), path.display().to_string()));
        }
    }
    Ok(recs)
}

pub fn write_predictions(path: impl AsRef<Path>, recs: &[PredictionRecord]) -> Result<(), ManifestError> {
    write_jsonl(path.as_ref(), recs)
}

fn read_jsonl<T, F>(path: &Path, mut check: F) -> Result<Vec<T>, ManifestError>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(usize, &T) -> Result<(), ManifestError>,
{
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| ManifestError::Parse {
            path: path.display().to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        check(line_no, &item)?;
        out.push(item);
    }
    if out.is_empty() {
        return Err(ManifestError::Empty(path.display().to_string()));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ManifestError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("manifest types serialize");
        buf.push(b'\n');
    }
    write_atomic(path, &buf).map_err(io_err(path))
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
