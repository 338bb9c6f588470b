//! Hidden states to sentence embeddings: token pooling, layer combination, whitening.

mod matrix;
pub mod whitening;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{HiddenStateFileHeader, HiddenStateRecord, RecordKind, StoreError};

pub use matrix::EmbeddingMatrix;
pub use whitening::{apply_whitening, fit_whitening, fit_whitening_with, CovarianceScaling, WhiteningTransform};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("layer out of range: {layer} (file has layers 0..={max})")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid whitening transform: {0}")]
    InvalidTransform(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// How a sentence's token vectors at one layer are reduced to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pooling {
    /// The first token's vector.
    Cls,
    /// The mean over all tokens, first token included.
    Avg,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Cls => "CLS",
            Pooling::Avg => "AVG",
        })
    }
}

impl FromStr for Pooling {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cls" => Ok(Pooling::Cls),
            "avg" | "mean" => Ok(Pooling::Avg),
            other => Err(PipelineError::InvalidConfig(format!("unknown pooling mode {other:?}"))),
        }
    }
}

/// One point on the (pooling, layer set, whitening) grid.
///
/// Layers are kept in ascending order; duplicates are rejected.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub pooling: Pooling,
    layers: Vec<usize>,
    pub whitening: bool,
}

impl PipelineConfig {
    pub fn new(pooling: Pooling, layers: impl IntoIterator<Item = usize>, whitening: bool) -> Result<Self> {
        let mut layers: Vec<usize> = layers.into_iter().collect();
        if layers.is_empty() {
            return Err(PipelineError::InvalidConfig("layer set is empty".into()));
        }
        layers.sort_unstable();
        if let Some(w) = layers.windows(2).find(|w| w[0] == w[1]) {
            return Err(PipelineError::InvalidConfig(format!("duplicate layer {}", w[0])));
        }
        Ok(Self {
            pooling,
            layers,
            whitening,
        })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// Checks every layer index against a file with `num_layers` layers.
    pub fn validate_for(&self, num_layers: u32) -> Result<()> {
        let max = num_layers as usize - 1;
        match self.layers.iter().find(|&&l| l > max) {
            Some(&layer) => Err(PipelineError::LayerOutOfRange { layer, max }),
            None => Ok(()),
        }
    }

    /// `L1+L12` style label.
    pub fn layer_label(&self) -> String {
        layer_label(&self.layers)
    }
}

impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "token={}, layer={}, whitening={}",
            self.pooling,
            self.layer_label(),
            if self.whitening { "T" } else { "F" }
        )
    }
}

pub fn layer_label(layers: &[usize]) -> String {
    layers.iter().map(|l| format!("L{l}")).collect::<Vec<_>>().join("+")
}

/// Parses `1,12`, `1+12` or `L1+L12` into layer indices.
pub fn parse_layer_list(s: &str) -> Result<Vec<usize>> {
    s.split([',', '+'])
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let digits = t.strip_prefix(['L', 'l']).unwrap_or(t);
            digits
                .parse::<usize>()
                .map_err(|_| PipelineError::InvalidConfig(format!("bad layer index {t:?}")))
        })
        .collect()
}

/// Pools one sentence at one layer.
pub fn pool_sentence(record: &HiddenStateRecord, layer: usize, mode: Pooling) -> Result<Vec<f64>> {
    let num_layers = record.num_layers() as usize;
    if layer >= num_layers {
        return Err(PipelineError::LayerOutOfRange {
            layer,
            max: num_layers - 1,
        });
    }
    if record.token_count() == 0 {
        return Err(PipelineError::EmptyInput(format!(
            "sentence {} has no tokens",
            record.sentence_id()
        )));
    }
    let to_f64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    match (mode, record.kind()) {
        (Pooling::Cls, _) => Ok(to_f64(record.first_token(layer))),
        (Pooling::Avg, RecordKind::Pooled) => Ok(to_f64(record.stored_mean(layer).unwrap())),
        (Pooling::Avg, RecordKind::Tokens) => {
            let mut sum = vec![0.0f64; record.hidden_dim() as usize];
            for token in record.tokens(layer).unwrap() {
                for (acc, &x) in sum.iter_mut().zip(token) {
                    *acc += x as f64;
                }
            }
            let n = record.token_count() as f64;
            Ok(sum.into_iter().map(|s| s / n).collect())
        }
    }
}

/// Element-wise arithmetic mean, accumulated in the given order.
pub(crate) fn mean_of(vectors: &[&[f64]]) -> Vec<f64> {
    let mut acc = vectors[0].to_vec();
    for v in &vectors[1..] {
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    acc.into_iter().map(|a| a / n).collect()
}

/// Averages the pooled vectors of the requested layers.
pub fn combine_layers(per_layer: &BTreeMap<usize, Vec<f64>>, layers: &[usize]) -> Result<Vec<f64>> {
    if layers.is_empty() {
        return Err(PipelineError::InvalidConfig("layer set is empty".into()));
    }
    let vectors = layers
        .iter()
        .map(|l| {
            per_layer
                .get(l)
                .map(Vec::as_slice)
                .ok_or_else(|| PipelineError::InvalidConfig(format!("missing pooled vector for layer {l}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(PipelineError::DimensionMismatch(
            "pooled vectors of different dimensions".into(),
        ));
    }
    Ok(mean_of(&vectors))
}

/// Pools every configured layer of one record and combines them.
pub fn sentence_embedding(record: &HiddenStateRecord, config: &PipelineConfig) -> Result<Vec<f64>> {
    let per_layer = config
        .layers()
        .iter()
        .map(|&l| Ok((l, pool_sentence(record, l, config.pooling)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    combine_layers(&per_layer, config.layers())
}

/// Pooling and layer combination over a record stream, without whitening.
///
/// Rows follow the input record order.
pub fn pool_and_combine<I>(records: I, header: &HiddenStateFileHeader, config: &PipelineConfig) -> Result<EmbeddingMatrix>
where
    I: IntoIterator<Item = Result<HiddenStateRecord, StoreError>>,
{
    config.validate_for(header.num_layers)?;
    let mut data = Vec::new();
    let mut ids = Vec::new();
    for record in records {
        let record = record?;
        data.extend(sentence_embedding(&record, config)?);
        ids.push(record.sentence_id());
    }
    if ids.is_empty() {
        return Err(PipelineError::EmptyInput("hidden-state file has no records".into()));
    }
    EmbeddingMatrix::new(data, header.hidden_dim as usize, ids)
}

/// Which embeddings a whitening transform is fitted on.
#[derive(Debug, Clone, Copy)]
pub enum FitCorpus<'a> {
    /// The embeddings being transformed.
    Transductive,
    /// A separately embedded corpus.
    External(&'a EmbeddingMatrix),
}

/// Fits on the chosen corpus and applies the transform to `embeddings`.
pub fn whiten(
    embeddings: &EmbeddingMatrix,
    fit: FitCorpus<'_>,
    eigen_floor_ratio: f64,
) -> Result<(EmbeddingMatrix, WhiteningTransform)> {
    let corpus = match fit {
        FitCorpus::Transductive => embeddings,
        FitCorpus::External(m) => m,
    };
    let transform = fit_whitening(corpus, eigen_floor_ratio)?;
    Ok((apply_whitening(embeddings, &transform)?, transform))
}

/// Full pipeline for one configuration.
pub fn embed_sentences<I>(
    records: I,
    header: &HiddenStateFileHeader,
    config: &PipelineConfig,
    fit: FitCorpus<'_>,
    eigen_floor_ratio: f64,
) -> Result<EmbeddingMatrix>
where
    I: IntoIterator<Item = Result<HiddenStateRecord, StoreError>>,
{
    let pooled = pool_and_combine(records, header, config)?;
    if !config.whitening {
        return Ok(pooled);
    }
    Ok(whiten(&pooled, fit, eigen_floor_ratio)?.0)
}
