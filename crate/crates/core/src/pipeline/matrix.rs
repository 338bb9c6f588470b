use nalgebra::DMatrix;

use super::{PipelineError, Result};

/// N×d sentence embeddings, one row per sentence, rows aligned with `sentence_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    sentence_ids: Vec<u64>,
}

impl EmbeddingMatrix {
    /// `data` is row-major with `sentence_ids.len()` rows of `dim` entries.
    pub fn new(data: Vec<f64>, dim: usize, sentence_ids: Vec<u64>) -> Result<Self> {
        let rows = sentence_ids.len();
        if rows == 0 || dim == 0 {
            return Err(PipelineError::EmptyInput(format!(
                "embedding matrix needs at least one row and one column, got {rows}x{dim}"
            )));
        }
        if data.len() != rows * dim {
            return Err(PipelineError::DimensionMismatch(format!(
                "{} values do not form {rows} rows of {dim}",
                data.len()
            )));
        }
        if let Some(at) = data.iter().position(|v| !v.is_finite()) {
            return Err(PipelineError::NonFinite(format!(
                "entry ({}, {}) is not finite",
                at / dim,
                at % dim
            )));
        }
        Ok(Self {
            rows,
            dim,
            data,
            sentence_ids,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], sentence_ids: Vec<u64>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != sentence_ids.len() {
            return Err(PipelineError::DimensionMismatch(format!(
                "{} rows but {} sentence ids",
                rows.len(),
                sentence_ids.len()
            )));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != dim) {
            return Err(PipelineError::DimensionMismatch(format!(
                "row {i} has {} entries, expected {dim}",
                rows[i].len()
            )));
        }
        Self::new(rows.concat(), dim, sentence_ids)
    }

    pub(crate) fn from_dmatrix(m: &DMatrix<f64>, sentence_ids: Vec<u64>) -> Result<Self> {
        let mut data = Vec::with_capacity(m.len());
        for row in m.row_iter() {
            data.extend(row.iter().copied());
        }
        Self::new(data, m.ncols(), sentence_ids)
    }

    pub(crate) fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.dim, &self.data)
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn sentence_ids(&self) -> &[u64] {
        &self.sentence_ids
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.data.iter().map(|v| v * factor).collect(),
            self.dim,
            self.sentence_ids.clone(),
        )
    }

    /// Stacks matrices of equal width vertically.
    pub fn vstack(parts: &[&EmbeddingMatrix]) -> Result<Self> {
        let dim = parts.first().map_or(0, |m| m.dim);
        if let Some(bad) = parts.iter().find(|m| m.dim != dim) {
            return Err(PipelineError::DimensionMismatch(format!(
                "cannot stack a {}-dim matrix onto {dim}-dim ones",
                bad.dim
            )));
        }
        let data = parts.iter().flat_map(|m| m.data.iter().copied()).collect();
        let ids = parts.iter().flat_map(|m| m.sentence_ids.iter().copied()).collect();
        Self::new(data, dim, ids)
    }
}
