//! Configuration grids over pooling mode, layer set and whitening.
//!
//! Datasets are loaded once into a [`LayerCache`] holding the pooled vector of
//! every sentence at every layer the grid touches; each configuration is then
//! a layer average over cached rows, an optional whitening fit, and an STS
//! evaluation. The cache performs exactly the same arithmetic as the
//! streaming [`pipeline::embed_sentences`](crate::pipeline::embed_sentences)
//! path, so a cell computed here equals the single configuration run alone.

mod report;
mod spec_file;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::RangeInclusive;

use rayon::prelude::*;
use thiserror::Error;

use crate::evaluation::{self, average_rho, evaluate_sts, DatasetEvalResult, EvalError, SentencePairExample};
use crate::pipeline::{
    self, apply_whitening, fit_whitening, EmbeddingMatrix, PipelineConfig, PipelineError, Pooling,
};
use crate::store::{HiddenStateFileHeader, HiddenStateReader, HiddenStateRecord, StoreError};

pub use report::{
    format_delta, whitening_delta_report, write_delta_csv, write_grid_csv, write_heatmap_csv, write_sweep_csv,
    DeltaRow,
};

#[derive(Debug, Error)]
pub enum AblationError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("grid spec line {line}: {reason}")]
    SpecParse { line: usize, reason: String },
    #[error("invalid grid: {0}")]
    InvalidSpec(String),
    #[error("config {config} failed: {source}")]
    Config {
        config: String,
        #[source]
        source: Box<AblationError>,
    },
    #[error("dataset {0:?} was not provided")]
    MissingDataset(String),
    #[error("no result for layers {0:?}")]
    MissingCell(Vec<usize>),
    #[error("more than one result for layers {0:?}")]
    AmbiguousCell(Vec<usize>),
    #[error("no configurations with {0} layers")]
    EmptyGroup(usize),
    #[error("{0} has no counterpart with the other whitening flag")]
    Unpaired(String),
}

pub type Result<T, E = AblationError> = std::result::Result<T, E>;

/// Inclusive range of layer indices; `None` means `1..=L`.
pub type LayerRange = Option<RangeInclusive<usize>>;

fn resolve_range(range: &LayerRange, num_layers: u32) -> Result<RangeInclusive<usize>> {
    let max = num_layers as usize - 1;
    let range = range.clone().unwrap_or(1..=max);
    if range.is_empty() || *range.end() > max {
        return Err(AblationError::InvalidSpec(format!(
            "layer range {}..{} is empty or exceeds layer {max}",
            range.start(),
            range.end()
        )));
    }
    Ok(range)
}

/// Which layer sets a grid covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSets {
    Explicit(Vec<Vec<usize>>),
    /// Every unordered pair `{i, j}` in the range plus every singleton `{i}`.
    AllPairs(LayerRange),
    /// Every subset of size `k` of the range.
    AllSubsetsOfSize { k: usize, range: LayerRange },
}

impl LayerSets {
    pub fn resolve(&self, num_layers: u32) -> Result<Vec<Vec<usize>>> {
        match self {
            LayerSets::Explicit(sets) => Ok(sets.clone()),
            LayerSets::AllPairs(range) => {
                let range = resolve_range(range, num_layers)?;
                let mut out = Vec::new();
                for i in range.clone() {
                    for j in i..=*range.end() {
                        out.push(if i == j { vec![i] } else { vec![i, j] });
                    }
                }
                Ok(out)
            }
            LayerSets::AllSubsetsOfSize { k, range } => {
                let range = resolve_range(range, num_layers)?;
                let pool: Vec<usize> = range.collect();
                if *k == 0 || *k > pool.len() {
                    return Err(AblationError::InvalidSpec(format!(
                        "subset size {k} must be between 1 and {}",
                        pool.len()
                    )));
                }
                Ok(combinations(&pool, *k))
            }
        }
    }
}

/// All `k`-element subsets of `items`, in lexicographic order.
pub fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn go(items: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            if items.len() - i < k - cur.len() {
                break;
            }
            cur.push(items[i]);
            go(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(items, k, 0, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Whitening fit corpus for grid runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitScope {
    /// Fit on the sentences of the dataset being evaluated.
    #[default]
    PerDataset,
    /// Fit once on the sentences of all datasets together.
    Pooled,
}

/// Layer-count sweep settings: exhaustive search up to `exhaustive_max_k`,
/// beam search above.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepSpec {
    pub max_k: usize,
    pub range: LayerRange,
    pub exhaustive_max_k: usize,
    pub beam_width: usize,
}

impl SweepSpec {
    pub fn new(max_k: usize) -> Self {
        Self {
            max_k,
            range: None,
            exhaustive_max_k: 3,
            beam_width: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub pooling_modes: Vec<Pooling>,
    pub layer_sets: Vec<LayerSets>,
    pub whitening_flags: Vec<bool>,
    pub datasets: Vec<String>,
    pub eigen_floor: f64,
    pub fit: FitScope,
    pub sweep: Option<SweepSpec>,
}

impl GridSpec {
    pub fn new(
        pooling_modes: Vec<Pooling>,
        layer_sets: Vec<LayerSets>,
        whitening_flags: Vec<bool>,
        datasets: Vec<String>,
    ) -> Self {
        Self {
            pooling_modes,
            layer_sets,
            whitening_flags,
            datasets,
            eigen_floor: crate::DEFAULT_EIGEN_FLOOR,
            fit: FitScope::PerDataset,
            sweep: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        spec_file::parse(text)
    }

    /// Every configuration in the product, sorted by pooling, then layer set,
    /// then whitening flag, without duplicates.
    pub fn configs(&self, num_layers: u32) -> Result<Vec<PipelineConfig>> {
        if self.pooling_modes.is_empty()
            || self.layer_sets.is_empty()
            || self.whitening_flags.is_empty()
            || self.datasets.is_empty()
        {
            return Err(AblationError::InvalidSpec("the configuration product is empty".into()));
        }
        let mut out = BTreeSet::new();
        for sets in &self.layer_sets {
            for layers in sets.resolve(num_layers)? {
                for &pooling in &self.pooling_modes {
                    for &whitening in &self.whitening_flags {
                        let config = PipelineConfig::new(pooling, layers.iter().copied(), whitening)?;
                        config.validate_for(num_layers)?;
                        out.insert(config);
                    }
                }
            }
        }
        Ok(out.into_iter().collect())
    }
}

/// Pooled vectors of every sentence at a chosen set of (pooling, layer) keys.
#[derive(Debug, Clone)]
pub struct LayerCache {
    header: HiddenStateFileHeader,
    sentence_ids: Vec<u64>,
    /// Row-major N×d per key.
    pooled: HashMap<(Pooling, usize), Vec<f64>>,
}

impl LayerCache {
    pub fn load<I>(records: I, header: &HiddenStateFileHeader, poolings: &[Pooling], layers: &[usize]) -> Result<Self>
    where
        I: IntoIterator<Item = Result<HiddenStateRecord, StoreError>>,
    {
        let max = header.num_layers as usize - 1;
        if let Some(&layer) = layers.iter().find(|&&l| l > max) {
            return Err(PipelineError::LayerOutOfRange { layer, max }.into());
        }
        let keys: Vec<(Pooling, usize)> = poolings
            .iter()
            .flat_map(|&p| layers.iter().map(move |&l| (p, l)))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut pooled: HashMap<(Pooling, usize), Vec<f64>> = keys.iter().map(|&k| (k, Vec::new())).collect();
        let mut sentence_ids = Vec::new();
        for record in records {
            let record = record?;
            for &(pooling, layer) in &keys {
                let v = pipeline::pool_sentence(&record, layer, pooling)?;
                pooled.get_mut(&(pooling, layer)).unwrap().extend(v);
            }
            sentence_ids.push(record.sentence_id());
        }
        if sentence_ids.is_empty() {
            return Err(PipelineError::EmptyInput("hidden-state file has no records".into()).into());
        }
        Ok(Self {
            header: *header,
            sentence_ids,
            pooled,
        })
    }

    pub fn open(path: impl AsRef<std::path::Path>, poolings: &[Pooling], layers: &[usize]) -> Result<Self> {
        let reader = HiddenStateReader::open(path)?;
        let header = *reader.header();
        Self::load(reader, &header, poolings, layers)
    }

    pub fn header(&self) -> &HiddenStateFileHeader {
        &self.header
    }

    pub fn sentence_ids(&self) -> &[u64] {
        &self.sentence_ids
    }

    /// Un-whitened embeddings for `config`.
    pub fn embed(&self, config: &PipelineConfig) -> Result<EmbeddingMatrix> {
        config.validate_for(self.header.num_layers)?;
        let d = self.header.hidden_dim as usize;
        let blocks = config
            .layers()
            .iter()
            .map(|&l| {
                self.pooled.get(&(config.pooling, l)).ok_or_else(|| {
                    AblationError::InvalidSpec(format!("layer {l} with {} pooling was not cached", config.pooling))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(self.sentence_ids.len() * d);
        for row in 0..self.sentence_ids.len() {
            let vectors: Vec<&[f64]> = blocks.iter().map(|b| &b[row * d..(row + 1) * d]).collect();
            data.extend(pipeline::mean_of(&vectors));
        }
        Ok(EmbeddingMatrix::new(data, d, self.sentence_ids.clone())?)
    }
}

/// A dataset ready for grid evaluation.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub name: String,
    pub cache: LayerCache,
    pub pairs: Vec<SentencePairExample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridOptions {
    pub eigen_floor: f64,
    pub fit: FitScope,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            eigen_floor: crate::DEFAULT_EIGEN_FLOOR,
            fit: FitScope::PerDataset,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub config: PipelineConfig,
    /// Sorted by dataset name.
    pub per_dataset: Vec<DatasetEvalResult>,
    pub average: f64,
}

/// Evaluates one configuration on every dataset. `datasets` must be sorted by name.
pub fn evaluate_config(config: &PipelineConfig, datasets: &[&PreparedDataset], options: GridOptions) -> Result<GridResult> {
    let wrap = |e: AblationError| AblationError::Config {
        config: config.to_string(),
        source: Box::new(e),
    };
    let run = || -> Result<GridResult> {
        let mut embedded = datasets
            .iter()
            .map(|d| d.cache.embed(config))
            .collect::<Result<Vec<_>>>()?;
        if config.whitening {
            match options.fit {
                FitScope::PerDataset => {
                    for e in &mut embedded {
                        let t = fit_whitening(e, options.eigen_floor)?;
                        *e = apply_whitening(e, &t)?;
                    }
                }
                FitScope::Pooled => {
                    let all = EmbeddingMatrix::vstack(&embedded.iter().collect::<Vec<_>>())?;
                    let t = fit_whitening(&all, options.eigen_floor)?;
                    for e in &mut embedded {
                        *e = apply_whitening(e, &t)?;
                    }
                }
            }
        }
        let per_dataset = datasets
            .iter()
            .zip(&embedded)
            .map(|(d, e)| evaluate_sts(e, &d.pairs, &d.name))
            .collect::<Result<Vec<_>, _>>()?;
        let average = average_rho(&per_dataset)?;
        Ok(GridResult {
            config: config.clone(),
            per_dataset,
            average,
        })
    };
    run().map_err(wrap)
}

fn select<'a>(names: &[String], datasets: &'a BTreeMap<String, PreparedDataset>) -> Result<Vec<&'a PreparedDataset>> {
    let names: BTreeSet<&String> = names.iter().collect();
    let selected = names
        .into_iter()
        .map(|n| datasets.get(n).ok_or_else(|| AblationError::MissingDataset(n.clone())))
        .collect::<Result<Vec<_>>>()?;
    let layers = selected[0].cache.header().num_layers;
    if let Some(d) = selected.iter().find(|d| d.cache.header().num_layers != layers) {
        return Err(AblationError::InvalidSpec(format!(
            "dataset {} has {} layers, others have {layers}",
            d.name,
            d.cache.header().num_layers
        )));
    }
    Ok(selected)
}

/// Number of layers shared by the spec's datasets.
pub fn shared_num_layers(spec: &GridSpec, datasets: &BTreeMap<String, PreparedDataset>) -> Result<u32> {
    if spec.datasets.is_empty() {
        return Err(AblationError::InvalidSpec("no datasets named".into()));
    }
    Ok(select(&spec.datasets, datasets)?[0].cache.header().num_layers)
}

/// Runs every configuration of the grid. Output order is the order of
/// [`GridSpec::configs`], independent of scheduling.
pub fn run_grid(spec: &GridSpec, datasets: &BTreeMap<String, PreparedDataset>) -> Result<Vec<GridResult>> {
    let num_layers = shared_num_layers(spec, datasets)?;
    let selected = select(&spec.datasets, datasets)?;
    let configs = spec.configs(num_layers)?;
    let options = GridOptions {
        eigen_floor: spec.eigen_floor,
        fit: spec.fit,
    };
    configs
        .par_iter()
        .map(|c| evaluate_config(c, &selected, options))
        .collect()
}

/// Square matrix over `layer_range` where cell `(i, j)` is the average for
/// layers `{i, j}` and the diagonal holds single layers.
pub fn two_layer_heatmap(results: &[GridResult], layer_range: RangeInclusive<usize>) -> Result<Vec<Vec<f64>>> {
    let mut by_layers: BTreeMap<&[usize], f64> = BTreeMap::new();
    for r in results {
        if by_layers.insert(r.config.layers(), r.average).is_some() {
            return Err(AblationError::AmbiguousCell(r.config.layers().to_vec()));
        }
    }
    let layers: Vec<usize> = layer_range.collect();
    let mut out = vec![vec![0.0; layers.len()]; layers.len()];
    for (a, &i) in layers.iter().enumerate() {
        for (b, &j) in layers.iter().enumerate().skip(a) {
            let key = if i == j { vec![i] } else { vec![i.min(j), i.max(j)] };
            let v = *by_layers
                .get(key.as_slice())
                .ok_or_else(|| AblationError::MissingCell(key.clone()))?;
            out[a][b] = v;
            out[b][a] = v;
        }
    }
    Ok(out)
}

/// Best configuration for one layer count.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub k: usize,
    pub best_average: f64,
    pub best_layers: Vec<usize>,
}

/// Per layer count `k = 1..=K` (K the largest count present), the maximum
/// average and its layer set; ties go to the lexicographically smallest set.
pub fn layer_count_sweep(results: &[GridResult]) -> Result<Vec<SweepEntry>> {
    let max_k = results.iter().map(|r| r.config.layers().len()).max().ok_or(AblationError::EmptyGroup(1))?;
    (1..=max_k).map(|k| best_of_size(results, k)).collect()
}

fn best_of_size(results: &[GridResult], k: usize) -> Result<SweepEntry> {
    results
        .iter()
        .filter(|r| r.config.layers().len() == k)
        .min_by(|a, b| {
            b.average
                .total_cmp(&a.average)
                .then_with(|| a.config.layers().cmp(b.config.layers()))
        })
        .map(|r| SweepEntry {
            k,
            best_average: r.average,
            best_layers: r.config.layers().to_vec(),
        })
        .ok_or(AblationError::EmptyGroup(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStrategy {
    Exhaustive,
    Beam { width: usize },
}

impl std::fmt::Display for SearchStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SearchStrategy::Exhaustive => f.write_str("exhaustive"),
            SearchStrategy::Beam { width } => write!(f, "beam{width}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub entry: SweepEntry,
    pub strategy: SearchStrategy,
    pub candidates: usize,
}

/// Searches layer sets of growing size for one pooling/whitening pair.
///
/// Sizes up to `exhaustive_max_k` enumerate every subset of the range. Larger
/// sizes extend the `beam_width` best sets of the previous size by one layer;
/// ranking ties are broken lexicographically, so the search is deterministic.
pub fn run_sweep(
    sweep: &SweepSpec,
    pooling: Pooling,
    whitening: bool,
    dataset_names: &[String],
    datasets: &BTreeMap<String, PreparedDataset>,
    options: GridOptions,
) -> Result<Vec<SweepRow>> {
    let selected = select(dataset_names, datasets)?;
    let num_layers = selected[0].cache.header().num_layers;
    let pool: Vec<usize> = resolve_range(&sweep.range, num_layers)?.collect();
    if sweep.max_k == 0 || sweep.max_k > pool.len() {
        return Err(AblationError::InvalidSpec(format!(
            "sweep size {} must be between 1 and {}",
            sweep.max_k,
            pool.len()
        )));
    }
    let mut rows = Vec::new();
    let mut previous: Vec<GridResult> = Vec::new();
    for k in 1..=sweep.max_k {
        let (candidates, strategy) = if k <= sweep.exhaustive_max_k {
            (combinations(&pool, k), SearchStrategy::Exhaustive)
        } else {
            let mut ranked: Vec<&GridResult> = previous.iter().collect();
            ranked.sort_by(|a, b| {
                b.average
                    .total_cmp(&a.average)
                    .then_with(|| a.config.layers().cmp(b.config.layers()))
            });
            let mut next = BTreeSet::new();
            for r in ranked.into_iter().take(sweep.beam_width) {
                for &l in &pool {
                    if !r.config.layers().contains(&l) {
                        let mut set = r.config.layers().to_vec();
                        set.push(l);
                        set.sort_unstable();
                        next.insert(set);
                    }
                }
            }
            (next.into_iter().collect(), SearchStrategy::Beam { width: sweep.beam_width })
        };
        let configs = candidates
            .iter()
            .map(|set| PipelineConfig::new(pooling, set.iter().copied(), whitening))
            .collect::<Result<Vec<_>, _>>()?;
        let results: Vec<GridResult> = configs
            .par_iter()
            .map(|c| evaluate_config(c, &selected, options))
            .collect::<Result<_>>()?;
        let entry = best_of_size(&results, k)?;
        rows.push(SweepRow {
            entry,
            strategy,
            candidates: results.len(),
        });
        previous = results;
    }
    Ok(rows)
}

/// Layers a grid (and its sweep) needs cached.
pub fn required_layers(spec: &GridSpec, num_layers: u32) -> Result<Vec<usize>> {
    let mut layers = BTreeSet::new();
    for config in spec.configs(num_layers)? {
        layers.extend(config.layers().iter().copied());
    }
    if let Some(sweep) = &spec.sweep {
        layers.extend(resolve_range(&sweep.range, num_layers)?);
    }
    Ok(layers.into_iter().collect())
}

pub use evaluation::format_x100;

#[cfg(test)]
mod tests {
    use super::*;

    fn result(layers: &[usize], average: f64) -> GridResult {
        GridResult {
            config: PipelineConfig::new(Pooling::Avg, layers.iter().copied(), false).unwrap(),
            per_dataset: vec![],
            average,
        }
    }

    #[test]
    fn all_pairs_over_twelve_layers_has_78_cells() {
        let sets = LayerSets::AllPairs(Some(1..=12)).resolve(13).unwrap();
        assert_eq!(sets.len(), 78);
        assert_eq!(sets.iter().filter(|s| s.len() == 1).count(), 12);
        assert_eq!(LayerSets::AllPairs(None).resolve(13).unwrap(), sets);
        assert_eq!(LayerSets::AllPairs(Some(1..=3)).resolve(4).unwrap().len(), 6);
    }

    #[test]
    fn subsets_and_range_checks() {
        let sets = LayerSets::AllSubsetsOfSize { k: 3, range: Some(1..=12) }.resolve(13).unwrap();
        assert_eq!(sets.len(), 220);
        assert!(sets.windows(2).all(|w| w[0] < w[1]));
        assert!(LayerSets::AllSubsetsOfSize { k: 4, range: Some(1..=3) }.resolve(13).is_err());
        assert!(LayerSets::AllPairs(Some(1..=12)).resolve(12).is_err());
        assert_eq!(combinations(&[1, 2, 3], 2), vec![vec![1, 2], vec![1, 3], vec![2, 3]]);
    }

    #[test]
    fn config_product_order_and_size() {
        let spec = GridSpec::new(
            vec![Pooling::Avg, Pooling::Cls],
            vec![LayerSets::Explicit(vec![vec![12], vec![1, 12]])],
            vec![true, false],
            vec!["a".into()],
        );
        let configs = spec.configs(13).unwrap();
        assert_eq!(configs.len(), 8);
        let labels: Vec<String> = configs.iter().map(|c| c.to_string()).collect();
        assert_eq!(labels[0], "token=CLS, layer=L1+L12, whitening=F");
        assert_eq!(labels[1], "token=CLS, layer=L1+L12, whitening=T");
        assert_eq!(labels[2], "token=CLS, layer=L12, whitening=F");
        assert_eq!(labels[4], "token=AVG, layer=L1+L12, whitening=F");

        let mut empty = spec.clone();
        empty.whitening_flags.clear();
        assert!(matches!(empty.configs(13), Err(AblationError::InvalidSpec(_))));
    }

    #[test]
    fn heatmap_assembly() {
        let results = [result(&[1], 0.1), result(&[2], 0.2), result(&[1, 2], 0.3)];
        let m = two_layer_heatmap(&results, 1..=2).unwrap();
        assert_eq!(m, vec![vec![0.1, 0.3], vec![0.3, 0.2]]);
        assert!(matches!(
            two_layer_heatmap(&results[..2], 1..=2),
            Err(AblationError::MissingCell(_))
        ));
        let dup = [result(&[1], 0.1), result(&[1], 0.2)];
        assert!(two_layer_heatmap(&dup, 1..=1).is_err());
    }

    #[test]
    fn sweep_picks_max_and_breaks_ties_lexicographically() {
        let results = [
            result(&[3], 0.5),
            result(&[1], 0.4),
            result(&[2, 5], 0.7),
            result(&[1, 9], 0.7),
            result(&[1, 2], 0.6),
        ];
        let sweep = layer_count_sweep(&results).unwrap();
        assert_eq!(sweep[0], SweepEntry { k: 1, best_average: 0.5, best_layers: vec![3] });
        assert_eq!(sweep[1].best_layers, vec![1, 9]);
        assert!(matches!(layer_count_sweep(&[result(&[1, 2], 0.1)]), Err(AblationError::EmptyGroup(1))));
        assert!(layer_count_sweep(&[]).is_err());
    }
}
