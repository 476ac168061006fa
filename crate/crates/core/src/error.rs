use thiserror::Error;

use crate::audio::AudioError;
use crate::augment::AugmentError;
use crate::features::FeatureError;
use crate::labels::LabelError;
use crate::manifest::ManifestError;
use crate::metrics::MetricsError;
use crate::model::ModelError;

/// Any failure surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Labels(#[from] LabelError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("sample {sample_id}: cannot read embeddings {path}: {source}")]
    Embedding {
        sample_id: String,
        path: String,
        #[source]
        source: FeatureError,
    },
    #[error("sample {0} has no embedding_path")]
    MissingEmbedding(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
