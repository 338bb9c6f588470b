//! Seeded synthetic hidden-state datasets with a known best configuration.
//!
//! Token vectors are standard normal plus a per-layer offset shared by every
//! token, which gives each layer the narrow-cone geometry whitening is meant to
//! undo. Gold similarity of a pair is `2.5 * (1 + cos)` where `cos` is the
//! cosine between the two sentences' embeddings under one chosen pooling mode
//! and layer, so that configuration ranks every pair exactly like the gold.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::pipeline::Pooling;
use crate::store::{self, HiddenStateFileHeader, HiddenStateRecord, RecordKind, StoreError};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub num_sentences: usize,
    pub num_pairs: usize,
    pub num_layers: u32,
    pub hidden_dim: u32,
    pub max_tokens: u32,
    pub kind: RecordKind,
    /// Pooling mode and layer whose cosine defines the gold score.
    pub gold_from: (Pooling, usize),
    /// Size of the shared per-layer offset relative to the token noise.
    pub offset_scale: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            num_sentences: 120,
            num_pairs: 200,
            num_layers: 13,
            hidden_dim: 16,
            max_tokens: 8,
            kind: RecordKind::Tokens,
            gold_from: (Pooling::Avg, 1),
            offset_scale: 3.0,
            seed: 2021,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub header: HiddenStateFileHeader,
    pub records: Vec<HiddenStateRecord>,
    /// `(gold, sentence_a, sentence_b)` rows in file order.
    pub pairs: Vec<(f64, String, String)>,
}

pub fn sentence_text(index: usize) -> String {
    format!("synthetic sentence {index}")
}

// Independent of the pipeline pooling code: the gold score is
// an oracle the pipeline is checked against.
fn reference_embedding(layers: &[Vec<Vec<f32>>], (pooling, layer): (Pooling, usize)) -> Vec<f64> {
    let tokens = &layers[layer];
    match pooling {
        Pooling::Cls => tokens[0].iter().map(|&x| x as f64).collect(),
        Pooling::Avg => {
            let d = tokens[0].len();
            (0..d)
                .map(|j| tokens.iter().map(|t| t[j] as f64).sum::<f64>() / tokens.len() as f64)
                .collect()
        }
    }
}

fn reference_cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// Builds the fixture. Sentence `i` gets id `i`: the first pairs are
/// `(0, 1), (2, 3), ...`, so ids assigned by first appearance in the pair file
/// match the record ids.
pub fn generate(spec: &FixtureSpec) -> Result<Fixture, StoreError> {
    assert!(spec.num_sentences >= 2, "fixture needs at least 2 sentences");
    assert!(
        spec.num_pairs >= spec.num_sentences.div_ceil(2),
        "fixture needs enough pairs to mention every sentence"
    );
    assert!(spec.gold_from.1 < spec.num_layers as usize, "gold layer out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.hidden_dim as usize;
    let offsets: Vec<Vec<f64>> = (0..spec.num_layers)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.offset_scale * z
                })
                .collect::<Vec<f64>>()
        })
        .collect();

    let mut token_data = Vec::with_capacity(spec.num_sentences);
    for _ in 0..spec.num_sentences {
        let n = rng.random_range(1..=spec.max_tokens.max(1)) as usize;
        let layers: Vec<Vec<Vec<f32>>> = offsets
            .iter()
            .map(|offset| {
                (0..n)
                    .map(|_| {
                        offset
                            .iter()
                            .map(|o| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                (o + z) as f32
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        token_data.push(layers);
    }

    let gold_vectors: Vec<Vec<f64>> = token_data
        .iter()
        .map(|layers| reference_embedding(layers, spec.gold_from))
        .collect();
    let mut index_pairs: Vec<(usize, usize)> = (0..spec.num_sentences)
        .step_by(2)
        .map(|i| (i, (i + 1) % spec.num_sentences))
        .collect();
    while index_pairs.len() < spec.num_pairs {
        let a = rng.random_range(0..spec.num_sentences);
        let b = rng.random_range(0..spec.num_sentences);
        if a != b {
            index_pairs.push((a, b));
        }
    }
    let pairs = index_pairs
        .into_iter()
        .map(|(a, b)| {
            let gold = 2.5 * (1.0 + reference_cosine(&gold_vectors[a], &gold_vectors[b]));
            (gold, sentence_text(a), sentence_text(b))
        })
        .collect();

    let records = token_data
        .iter()
        .enumerate()
        .map(|(id, layers)| match spec.kind {
            RecordKind::Tokens => HiddenStateRecord::from_tokens(id as u64, layers),
            RecordKind::Pooled => {
                let pooled: Vec<(Vec<f32>, Vec<f32>)> = (0..layers.len())
                    .map(|l| {
                        let mean = reference_embedding(layers, (Pooling::Avg, l));
                        (layers[l][0].clone(), mean.into_iter().map(|x| x as f32).collect())
                    })
                    .collect();
                HiddenStateRecord::from_pooled(id as u64, layers[0].len() as u32, &pooled)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let header = HiddenStateFileHeader::new(spec.num_layers, spec.hidden_dim, spec.kind, records.len() as u64)?;
    Ok(Fixture { header, records, pairs })
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub hidden_states: PathBuf,
    pub pairs: PathBuf,
}

impl Fixture {
    /// Writes `<stem>.whb` and `<stem>.tsv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<FixturePaths, StoreError> {
        let dir = dir.as_ref();
        let hidden_states = dir.join(format!("{stem}.whb"));
        let pairs = dir.join(format!("{stem}.tsv"));
        store::write_hidden_states_file(&hidden_states, &self.header, &self.records)?;
        let mut out = BufWriter::new(File::create(&pairs)?);
        for (gold, a, b) in &self.pairs {
            writeln!(out, "{gold}\t{a}\t{b}")?;
        }
        out.flush()?;
        Ok(FixturePaths { hidden_states, pairs })
    }
}
