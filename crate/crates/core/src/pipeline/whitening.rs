//! Whitening of a set of sentence embeddings.
//!
//! Given embeddings `E` (N×d) with column mean `m`, the covariance
//! `C = (E − m)ᵀ(E − m)` is decomposed as `U D Uᵀ` and every row is mapped to
//! `(x − m) U D^{-1/2}`. On the fitted set this yields `ÊᵀÊ = I`.
//!
//! Eigenpairs are kept in descending eigenvalue order. Eigenvalues below
//! `eigen_floor_ratio * λ_max` are dropped together with their eigenvectors,
//! so rank-deficient inputs produce a narrower output instead of amplified
//! noise. Each eigenvector is sign-canonicalized so that its largest-magnitude
//! entry is positive, which makes fits bit-reproducible.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{EmbeddingMatrix, PipelineError, Result};

/// Scaling applied to the centered scatter matrix before decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceScaling {
    /// `(E − m)ᵀ(E − m)` as is.
    #[default]
    Unnormalized,
    /// `(E − m)ᵀ(E − m) / N`.
    PerSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    mean: DVector<f64>,
    /// d×k, columns are the retained eigenvectors.
    rotation: DMatrix<f64>,
    inv_sqrt_eigenvalues: DVector<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-8;

impl WhiteningTransform {
    /// Assembles a transform from its parts, checking the invariants.
    pub fn from_parts(mean: Vec<f64>, rotation_rows: Vec<f64>, inv_sqrt_eigenvalues: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        let k = inv_sqrt_eigenvalues.len();
        if d == 0 || k == 0 || k > d {
            return Err(PipelineError::InvalidTransform(format!(
                "input dim {d} and retained dim {k} are inconsistent"
            )));
        }
        if rotation_rows.len() != d * k {
            return Err(PipelineError::InvalidTransform(format!(
                "rotation has {} entries, expected {d}x{k}",
                rotation_rows.len()
            )));
        }
        if mean.iter().chain(&rotation_rows).any(|v| !v.is_finite()) {
            return Err(PipelineError::InvalidTransform("non-finite entry".into()));
        }
        if inv_sqrt_eigenvalues.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(PipelineError::InvalidTransform(
                "scales must be finite and strictly positive".into(),
            ));
        }
        if inv_sqrt_eigenvalues.windows(2).any(|w| w[1] < w[0]) {
            return Err(PipelineError::InvalidTransform(
                "scales must follow descending eigenvalue order".into(),
            ));
        }
        let transform = Self {
            mean: DVector::from_vec(mean),
            rotation: DMatrix::from_row_slice(d, k, &rotation_rows),
            inv_sqrt_eigenvalues: DVector::from_vec(inv_sqrt_eigenvalues),
        };
        let deviation = transform.orthonormality_error();
        if deviation > ORTHONORMAL_TOL {
            return Err(PipelineError::InvalidTransform(format!(
                "rotation columns deviate from orthonormal by {deviation:e}"
            )));
        }
        Ok(transform)
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn retained_dim(&self) -> usize {
        self.inv_sqrt_eigenvalues.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    /// Column `j` is the `j`-th retained eigenvector.
    pub fn rotation(&self) -> &DMatrix<f64> {
        &self.rotation
    }

    pub fn inv_sqrt_eigenvalues(&self) -> &[f64] {
        self.inv_sqrt_eigenvalues.as_slice()
    }

    /// Max absolute entry of `UᵀU − I`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * &self.rotation;
        let k = gram.nrows();
        (gram - DMatrix::<f64>::identity(k, k)).amax()
    }

    /// Whitens a single vector.
    pub fn apply_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(PipelineError::DimensionMismatch(format!(
                "vector has dimension {}, transform expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let centered = DVector::from_column_slice(x) - &self.mean;
        let projected = self.rotation.tr_mul(&centered);
        Ok(projected.component_mul(&self.inv_sqrt_eigenvalues).as_slice().to_vec())
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> io::Result<()> {
        let d = self.input_dim();
        let k = self.retained_dim();
        let mut buf = Vec::with_capacity(16 + 8 * (d + d * k + k));
        buf.extend_from_slice(&TRANSFORM_MAGIC);
        buf.extend_from_slice(&TRANSFORM_VERSION.to_le_bytes());
        buf.extend_from_slice(&(d as u32).to_le_bytes());
        buf.extend_from_slice(&(k as u32).to_le_bytes());
        let rows = self.rotation.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>());
        for v in self.mean.iter().copied().chain(rows).chain(self.inv_sqrt_eigenvalues.iter().copied()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
        sink.flush()
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self> {
        let bad = |what: String| PipelineError::InvalidTransform(what);
        let mut head = [0u8; 16];
        source
            .read_exact(&mut head)
            .map_err(|e| bad(format!("cannot read transform header: {e}")))?;
        if head[0..4] != TRANSFORM_MAGIC {
            return Err(bad(format!("bad magic {:?}, expected \"WHT1\"", &head[0..4])));
        }
        let u32_at = |at: usize| u32::from_le_bytes(head[at..at + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != TRANSFORM_VERSION {
            return Err(bad(format!("unsupported transform version {version}")));
        }
        let (d, k) = (u32_at(8) as usize, u32_at(12) as usize);
        if k > d {
            return Err(bad(format!("retained dim {k} exceeds input dim {d}")));
        }
        let mut read_block = |len: usize| -> Result<Vec<f64>> {
            let mut raw = Vec::new();
            (&mut source)
                .take(len as u64 * 8)
                .read_to_end(&mut raw)
                .map_err(|e| bad(e.to_string()))?;
            if raw.len() != len * 8 {
                return Err(bad("truncated transform file".into()));
            }
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mean = read_block(d)?;
        let rotation = read_block(d * k)?;
        let scales = read_block(k)?;
        Self::from_parts(mean, rotation, scales)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path).map_err(|e| PipelineError::InvalidTransform(e.to_string()))?;
        Self::read_from(BufReader::new(file))
    }
}

pub const TRANSFORM_MAGIC: [u8; 4] = *b"WHT1";
pub const TRANSFORM_VERSION: u32 = 1;

pub fn fit_whitening(embeddings: &EmbeddingMatrix, eigen_floor_ratio: f64) -> Result<WhiteningTransform> {
    fit_whitening_with(embeddings, eigen_floor_ratio, CovarianceScaling::Unnormalized)
}

pub fn fit_whitening_with(
    embeddings: &EmbeddingMatrix,
    eigen_floor_ratio: f64,
    scaling: CovarianceScaling,
) -> Result<WhiteningTransform> {
    if !(eigen_floor_ratio.is_finite() && eigen_floor_ratio > 0.0) {
        return Err(PipelineError::InvalidConfig(format!(
            "eigen floor ratio must be positive and finite, got {eigen_floor_ratio}"
        )));
    }
    let n = embeddings.nrows();
    if n < 2 {
        return Err(PipelineError::EmptyInput(format!(
            "whitening needs at least 2 embeddings, got {n}"
        )));
    }
    let e = embeddings.to_dmatrix();
    let mean = e.row_mean().transpose();
    let mut centered = e;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.tr_mul(&centered);
    if scaling == CovarianceScaling::PerSample {
        cov /= n as f64;
    }
    // gemm output is symmetric only up to rounding
    let cov = (&cov + cov.transpose()) * 0.5;

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let lambda_max = eig.eigenvalues[order[0]];
    if !(lambda_max > 0.0 && lambda_max.is_finite()) {
        return Err(PipelineError::Degenerate(
            "covariance has no positive eigenvalue (all embeddings identical?)".into(),
        ));
    }
    let floor = eigen_floor_ratio * lambda_max;
    let kept: Vec<usize> = order
        .into_iter()
        .take_while(|&j| eig.eigenvalues[j] >= floor)
        .collect();
    if kept.is_empty() {
        return Err(PipelineError::Degenerate("every eigenvalue is below the floor".into()));
    }

    let d = embeddings.dim();
    let mut rotation = DMatrix::<f64>::zeros(d, kept.len());
    for (out, &j) in kept.iter().enumerate() {
        let mut v = eig.eigenvectors.column(j).clone_owned();
        if v[v.iamax()] < 0.0 {
            v.neg_mut();
        }
        rotation.set_column(out, &v);
    }
    let inv_sqrt = DVector::from_iterator(kept.len(), kept.iter().map(|&j| eig.eigenvalues[j].sqrt().recip()));
    Ok(WhiteningTransform {
        mean,
        rotation,
        inv_sqrt_eigenvalues: inv_sqrt,
    })
}

/// Maps every row `x` to `(x − m) U D^{-1/2}`; output width is the retained dimension.
pub fn apply_whitening(embeddings: &EmbeddingMatrix, transform: &WhiteningTransform) -> Result<EmbeddingMatrix> {
    if embeddings.dim() != transform.input_dim() {
        return Err(PipelineError::DimensionMismatch(format!(
            "embeddings have dimension {}, transform expects {}",
            embeddings.dim(),
            transform.input_dim()
        )));
    }
    let mut centered = embeddings.to_dmatrix();
    for mut row in centered.row_iter_mut() {
        row -= transform.mean.transpose();
    }
    let mut out = centered * &transform.rotation;
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= transform.inv_sqrt_eigenvalues[j];
    }
    EmbeddingMatrix::from_dmatrix(&out, embeddings.sentence_ids().to_vec())
}
