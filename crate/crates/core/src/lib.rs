//! Learnable concept-based model (LCBM).
//!
//! An unsupervised concept-bottleneck classifier. Every concept is a Bernoulli
//! variable paired with a per-sample embedding; a learnable prototype per
//! concept turns the embedding into an activation probability. A
//! weight-predicting classifier combines concept scores linearly, and a
//! transposed-convolution decoder reconstructs the input from the masked
//! embeddings. Training maximizes a weighted evidence lower bound.
//!
//! Modules:
//! - [`model`]: the network, its forward/backward passes and the loss.
//! - [`data`]: MNIST Even/Odd and MNIST Addition construction.
//! - [`train`]: seeded, checkpointed training loop.
//! - [`eval`]: accuracy, reconstruction, concept alignment, information plane
//!   and intervention metrics.
//! - [`interpret`]: concept dictionaries, explanations and counterfactual
//!   interventions.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod interpret;
pub mod model;
pub mod nn;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{ArchConfig, BackboneMode, ModelConfig};
pub use data::{DatasetKind, DatasetSplit, LabeledBatch, SampleSource, TensorSource};
pub use error::{Error, Result};
pub use model::loss::{batch_kl, elbo_loss, LossBreakdown};
pub use model::{ConceptActivation, Lcbm, Mode, PredictionBundle};
pub use train::{fit, set_global_seed, EpochLog, FitOutcome, TrainConfig};
