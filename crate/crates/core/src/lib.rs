//! Hierarchical text classification with depth-wise prompts and a
//! local-hierarchy-guided Mixup regularizer.
//!
//! The pipeline: [`taxonomy`] and [`corpus`] load data, [`prompt`] turns an
//! instance into a token sequence with one `[MASK]` per depth, the
//! [`encoder`] produces hidden vectors, [`objective`] scores them against
//! the verbalizer, [`mixup`] builds mixed training signals and [`trainer`]
//! fits everything. [`eval`] computes the reported metrics.

pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod mixup;
pub mod model;
pub mod objective;
pub mod prompt;
pub mod taxonomy;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use corpus::{DatasetSplit, Instance, SyntheticSpec, Vocabulary};
pub use encoder::{EncoderConfig, EncoderParams, HiddenStates, SequenceEncoder};
pub use error::{Error, Result};
pub use mixup::{MixMode, MixPair, MixupConfig};
pub use model::{Example, Model};
pub use taxonomy::{LocalHierarchy, Taxonomy};
pub use trainer::{TrainConfig, Trainer};
