//! Unsupervised sentence embeddings from per-layer transformer hidden states.
//!
//! The toolkit reads hidden states exported in the `WHB1` binary format
//! ([`store`]), turns them into sentence embeddings by token pooling, layer
//! averaging and whitening ([`pipeline`]), scores them on sentence-pair
//! similarity datasets with Spearman's rank correlation ([`evaluation`]) and
//! runs configuration grids over the three axes ([`ablation`]).

pub mod ablation;
pub mod evaluation;
pub mod pipeline;
pub mod store;
pub mod synthetic;

pub use ablation::{GridResult, GridSpec, LayerSets};
pub use evaluation::{DatasetEvalResult, SentencePairExample};
pub use pipeline::{EmbeddingMatrix, PipelineConfig, Pooling, WhiteningTransform};
pub use store::{HiddenStateFileHeader, HiddenStateReader, HiddenStateRecord, RecordKind};

/// Default relative eigenvalue floor used when fitting a whitening transform.
pub const DEFAULT_EIGEN_FLOOR: f64 = 1e-10;
