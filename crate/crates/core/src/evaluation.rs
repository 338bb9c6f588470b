//! Sentence-pair datasets and the scores computed on them.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::EmbeddingMatrix;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("sequence is constant, correlation is undefined")]
    ConstantInput,
    #[error("need at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("sentence id {0} has no embedding")]
    MissingSentence(u64),
    #[error("gold label {0} is not binary")]
    NonBinaryGold(f64),
    #[error("no results to average")]
    Empty,
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentencePairExample {
    pub id_a: u64,
    pub id_b: u64,
    pub gold_score: f64,
}

/// Allowed gold values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GoldScale {
    /// Graded similarity in `[0, 5]`.
    #[default]
    Graded,
    /// Binary labels `0` / `1`.
    Binary,
}

impl GoldScale {
    fn check(self, score: f64) -> std::result::Result<(), String> {
        let ok = match self {
            GoldScale::Graded => (0.0..=5.0).contains(&score),
            GoldScale::Binary => score == 0.0 || score == 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("gold score {score} out of range for {self:?} scale"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairFormat {
    /// `gold<TAB>sentence_a<TAB>sentence_b`, one pair per line.
    #[default]
    Tsv,
}

/// Parsed pairs plus the deduplicated sentence table; a sentence's id is its index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<SentencePairExample>,
    pub sentences: Vec<String>,
}

/// Reads sentence pairs. Identical sentence strings share one id, assigned in
/// order of first appearance starting from 0. Blank lines are skipped.
pub fn load_pairs<R: BufRead>(source: R, format: PairFormat, scale: GoldScale) -> Result<PairSet> {
    let PairFormat::Tsv = format;
    let mut set = PairSet::default();
    let mut ids: HashMap<String, u64> = HashMap::new();
    let mut intern = |text: &str, set: &mut PairSet| -> u64 {
        if let Some(&id) = ids.get(text) {
            return id;
        }
        let id = set.sentences.len() as u64;
        set.sentences.push(text.to_owned());
        ids.insert(text.to_owned(), id);
        id
    };
    for (index, line) in source.lines().enumerate() {
        let line_no = index + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(EvalError::Parse {
                line: line_no,
                reason: format!("expected 3 tab-separated columns, found {}", fields.len()),
            });
        }
        let gold_score: f64 = fields[0].trim().parse().map_err(|_| EvalError::Parse {
            line: line_no,
            reason: format!("unparsable score {:?}", fields[0]),
        })?;
        scale
            .check(gold_score)
            .map_err(|reason| EvalError::Parse { line: line_no, reason })?;
        let id_a = intern(fields[1], &mut set);
        let id_b = intern(fields[2], &mut set);
        set.pairs.push(SentencePairExample { id_a, id_b, gold_score });
    }
    Ok(set)
}

/// Writes pairs in the TSV layout `load_pairs` reads.
pub fn write_pairs_tsv<W: Write>(mut sink: W, pairs: &[(f64, &str, &str)]) -> std::io::Result<()> {
    for (gold, a, b) in pairs {
        writeln!(sink, "{gold}\t{a}\t{b}")?;
    }
    Ok(())
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(EvalError::DimensionMismatch(format!(
            "vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman_rho(predicted: &[f64], gold: &[f64]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(EvalError::DimensionMismatch(format!(
            "{} predictions for {} gold scores",
            predicted.len(),
            gold.len()
        )));
    }
    if predicted.len() < 2 {
        return Err(EvalError::TooFewValues(predicted.len()));
    }
    if predicted.iter().chain(gold).any(|v| !v.is_finite()) {
        return Err(EvalError::DimensionMismatch("non-finite score".into()));
    }
    pearson(&fractional_ranks(predicted), &fractional_ranks(gold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEvalResult {
    pub dataset_name: String,
    pub spearman_rho: f64,
    pub n_pairs: usize,
}

struct RowIndex<'a> {
    embeddings: &'a EmbeddingMatrix,
    rows: HashMap<u64, usize>,
}

impl<'a> RowIndex<'a> {
    fn new(embeddings: &'a EmbeddingMatrix) -> Self {
        let rows = embeddings
            .sentence_ids()
            .iter()
            .enumerate()
            .map(|(row, &id)| (id, row))
            .collect();
        Self { embeddings, rows }
    }

    fn cosine(&self, pair: &SentencePairExample) -> Result<f64> {
        let row = |id: u64| {
            self.rows
                .get(&id)
                .map(|&r| self.embeddings.row(r))
                .ok_or(EvalError::MissingSentence(id))
        };
        cosine_similarity(row(pair.id_a)?, row(pair.id_b)?)
    }
}

/// Cosine similarity of each pair's embeddings, in pair order.
pub fn pair_cosines(embeddings: &EmbeddingMatrix, pairs: &[SentencePairExample]) -> Result<Vec<f64>> {
    let index = RowIndex::new(embeddings);
    pairs.iter().map(|p| index.cosine(p)).collect()
}

pub fn evaluate_sts(
    embeddings: &EmbeddingMatrix,
    pairs: &[SentencePairExample],
    dataset_name: &str,
) -> Result<DatasetEvalResult> {
    let predicted = pair_cosines(embeddings, pairs)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold_score).collect();
    Ok(DatasetEvalResult {
        dataset_name: dataset_name.to_owned(),
        spearman_rho: spearman_rho(&predicted, &gold)?,
        n_pairs: pairs.len(),
    })
}

/// Unweighted mean of per-dataset rho.
pub fn average_rho(results: &[DatasetEvalResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(results.iter().map(|r| r.spearman_rho).sum::<f64>() / results.len() as f64)
}

/// Fraction of pairs whose thresholded cosine (`cos >= threshold` means 1) matches the label.
pub fn threshold_accuracy(embeddings: &EmbeddingMatrix, pairs: &[SentencePairExample], threshold: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(EvalError::TooFewValues(0));
    }
    if let Some(p) = pairs.iter().find(|p| p.gold_score != 0.0 && p.gold_score != 1.0) {
        return Err(EvalError::NonBinaryGold(p.gold_score));
    }
    let cosines = pair_cosines(embeddings, pairs)?;
    let correct = cosines
        .iter()
        .zip(pairs)
        .filter(|(c, p)| (**c >= threshold) == (p.gold_score == 1.0))
        .count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// `rho * 100` rounded to an integer count of hundredths.
pub fn hundredths_x100(value: f64) -> i64 {
    (value * 10_000.0).round() as i64
}

/// Renders a count of hundredths as fixed point, `6776` as `67.76`.
pub fn format_hundredths(h: i64) -> String {
    let sign = if h < 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", h.abs() / 100, h.abs() % 100)
}

/// Two-decimal fixed point of `rho * 100`.
pub fn format_x100(value: f64) -> String {
    format_hundredths(hundredths_x100(value))
}

/// CSV with columns `dataset,n_pairs,rho_x100`, rows sorted by dataset name.
pub fn write_results_csv<W: Write>(mut sink: W, results: &[DatasetEvalResult]) -> std::io::Result<()> {
    let mut sorted: Vec<&DatasetEvalResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.dataset_name.cmp(&b.dataset_name));
    writeln!(sink, "dataset,n_pairs,rho_x100")?;
    for r in sorted {
        writeln!(sink, "{},{},{}", r.dataset_name, r.n_pairs, format_x100(r.spearman_rho))?;
    }
    Ok(())
}
