//! Speech emotion recognition under label subjectivity and class imbalance.
//!
//! The toolkit works on precomputed encoder embeddings. Labels are modelled as
//! distributions over nine emotion classes built from annotator votes, the
//! downstream head is trained with a KL objective, and minority classes are
//! helped by annotation dropout, majority/minority mixing and inverse-frequency
//! target re-weighting.

pub mod audio;
pub mod augment;
pub mod error;
pub mod features;
pub mod labels;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use features::EmbeddingSequence;
pub use labels::{ClassWeights, Consensus, EmotionClass, SoftLabel, NUM_CLASSES};
pub use metrics::MetricsReport;
pub use model::{HeadParams, LossConfig, ModelConfig, ModelOutput};
pub use trainer::{TrainConfig, TrainReport};
