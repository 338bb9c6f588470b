//! Python bindings: `import pysentwhite`.

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use sentwhite::ablation::format_delta as core_format_delta;
use sentwhite::evaluation::{self, GoldScale, PairFormat, PairSet};
use sentwhite::pipeline::{self, FitCorpus};
use sentwhite::store::{self, HiddenStateReader, HiddenStateRecord, RecordKind, StoreError};
use sentwhite::{DatasetEvalResult, EmbeddingMatrix, HiddenStateFileHeader, Pooling};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn store_err(e: StoreError) -> PyErr {
    match e {
        StoreError::Io(io) => PyIOError::new_err(io.to_string()),
        other => value_err(other),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<EmbeddingMatrix> {
    let ids = (0..rows.len() as u64).collect();
    EmbeddingMatrix::from_rows(&rows, ids).map_err(value_err)
}

fn to_rows(m: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    m.rows().map(<[f64]>::to_vec).collect()
}

/// A pooling mode, layer set and whitening flag.
#[pyclass(name = "PipelineConfig", frozen, eq, hash, from_py_object)]
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PyPipelineConfig {
    inner: sentwhite::PipelineConfig,
}

#[pymethods]
impl PyPipelineConfig {
    #[new]
    #[pyo3(signature = (token, layers, whitening=false))]
    fn new(token: &str, layers: Vec<usize>, whitening: bool) -> PyResult<Self> {
        let pooling: Pooling = token.parse().map_err(value_err)?;
        let inner = sentwhite::PipelineConfig::new(pooling, layers, whitening).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn token(&self) -> String {
        self.inner.pooling.to_string()
    }

    #[getter]
    fn layers(&self) -> Vec<usize> {
        self.inner.layers().to_vec()
    }

    #[getter]
    fn whitening(&self) -> bool {
        self.inner.whitening
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!(
            "PipelineConfig({:?}, {:?}, whitening={})",
            self.token(),
            self.layers(),
            if self.inner.whitening { "True" } else { "False" }
        )
    }
}

/// A fitted whitening map `x -> (x - mean) U diag(scales)`.
#[pyclass(name = "WhiteningTransform", frozen)]
pub struct PyWhiteningTransform {
    inner: sentwhite::WhiteningTransform,
}

#[pymethods]
impl PyWhiteningTransform {
    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn retained_dim(&self) -> usize {
        self.inner.retained_dim()
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean().to_vec()
    }

    #[getter]
    fn inv_sqrt_eigenvalues(&self) -> Vec<f64> {
        self.inner.inv_sqrt_eigenvalues().to_vec()
    }

    fn apply(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let e = matrix(rows)?;
        Ok(to_rows(&pipeline::apply_whitening(&e, &self.inner).map_err(value_err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = sentwhite::WhiteningTransform::load(path).map_err(value_err)?;
        Ok(Self { inner })
    }
}

#[pyfunction]
#[pyo3(signature = (rows, eigen_floor=sentwhite::DEFAULT_EIGEN_FLOOR))]
fn fit_whitening(rows: Vec<Vec<f64>>, eigen_floor: f64) -> PyResult<PyWhiteningTransform> {
    let inner = pipeline::fit_whitening(&matrix(rows)?, eigen_floor).map_err(value_err)?;
    Ok(PyWhiteningTransform { inner })
}

#[pyfunction]
fn cosine_similarity(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    evaluation::cosine_similarity(&u, &v).map_err(value_err)
}

#[pyfunction]
fn spearman_rho(predicted: Vec<f64>, gold: Vec<f64>) -> PyResult<f64> {
    evaluation::spearman_rho(&predicted, &gold).map_err(value_err)
}

#[pyfunction]
fn average_rho(values: Vec<f64>) -> PyResult<f64> {
    let results: Vec<DatasetEvalResult> = values
        .into_iter()
        .map(|v| DatasetEvalResult {
            dataset_name: String::new(),
            spearman_rho: v,
            n_pairs: 0,
        })
        .collect();
    evaluation::average_rho(&results).map_err(value_err)
}

/// `rho` on the x100 scale with two decimals.
#[pyfunction]
fn format_x100(value: f64) -> String {
    evaluation::format_x100(value)
}

#[pyfunction]
fn format_delta(before: f64, after: f64) -> String {
    core_format_delta(before, after)
}

/// Pools one sentence given as `layers x tokens x dim`.
#[pyfunction]
fn pool_sentence(tokens: Vec<Vec<Vec<f32>>>, layer: usize, token: &str) -> PyResult<Vec<f64>> {
    let mode: Pooling = token.parse().map_err(value_err)?;
    let record = HiddenStateRecord::from_tokens(0, &tokens).map_err(store_err)?;
    pipeline::pool_sentence(&record, layer, mode).map_err(value_err)
}

/// Mean of per-layer vectors over `layers`.
#[pyfunction]
fn combine_layers(per_layer: std::collections::BTreeMap<usize, Vec<f64>>, layers: Vec<usize>) -> PyResult<Vec<f64>> {
    pipeline::combine_layers(&per_layer, &layers).map_err(value_err)
}

/// Writes a TOKENS file from `(sentence_id, layers x tokens x dim)` records.
#[pyfunction]
fn write_hidden_states(path: PathBuf, records: Vec<(u64, Vec<Vec<Vec<f32>>>)>) -> PyResult<u64> {
    let built = records
        .iter()
        .map(|(id, tokens)| HiddenStateRecord::from_tokens(*id, tokens))
        .collect::<Result<Vec<_>, _>>()
        .map_err(store_err)?;
    let first = built.first().ok_or_else(|| value_err("no records"))?;
    let header = HiddenStateFileHeader::new(first.num_layers(), first.hidden_dim(), RecordKind::Tokens, built.len() as u64)
        .map_err(store_err)?;
    store::write_hidden_states_file(path, &header, &built).map_err(store_err)
}

/// Header fields and record count of a WHB1 file; every record is validated.
#[pyfunction]
fn inspect<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let reader = HiddenStateReader::open(&path).map_err(store_err)?;
    let header = *reader.header();
    let mut count = 0u64;
    for record in reader {
        record.map_err(store_err)?;
        count += 1;
    }
    let out = PyDict::new(py);
    out.set_item("version", header.version)?;
    out.set_item("num_layers", header.num_layers)?;
    out.set_item("hidden_dim", header.hidden_dim)?;
    out.set_item("kind", header.kind.to_string())?;
    out.set_item("num_sentences", header.num_sentences)?;
    out.set_item("records", count)?;
    Ok(out)
}

fn embed(path: &PathBuf, config: &sentwhite::PipelineConfig, eigen_floor: f64) -> PyResult<EmbeddingMatrix> {
    let reader = HiddenStateReader::open(path).map_err(store_err)?;
    let header = *reader.header();
    pipeline::embed_sentences(reader, &header, config, FitCorpus::Transductive, eigen_floor).map_err(value_err)
}

/// Returns `(sentence_ids, rows)` for one configuration.
#[pyfunction]
#[pyo3(signature = (path, config, eigen_floor=sentwhite::DEFAULT_EIGEN_FLOOR))]
fn embed_file(path: PathBuf, config: &PyPipelineConfig, eigen_floor: f64) -> PyResult<(Vec<u64>, Vec<Vec<f64>>)> {
    let e = embed(&path, &config.inner, eigen_floor)?;
    Ok((e.sentence_ids().to_vec(), to_rows(&e)))
}

fn read_pairs(path: &PathBuf, scale: GoldScale) -> PyResult<PairSet> {
    let file = File::open(path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
    evaluation::load_pairs(BufReader::new(file), PairFormat::Tsv, scale).map_err(value_err)
}

/// Spearman's rho of one dataset under one configuration.
#[pyfunction]
#[pyo3(signature = (hidden_states, pairs, config, eigen_floor=sentwhite::DEFAULT_EIGEN_FLOOR))]
fn evaluate(hidden_states: PathBuf, pairs: PathBuf, config: &PyPipelineConfig, eigen_floor: f64) -> PyResult<f64> {
    let set = read_pairs(&pairs, GoldScale::Graded)?;
    let e = embed(&hidden_states, &config.inner, eigen_floor)?;
    let name = pairs.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(evaluation::evaluate_sts(&e, &set.pairs, &name).map_err(value_err)?.spearman_rho)
}

/// Accuracy of `cos >= threshold` against 0/1 labels.
#[pyfunction]
#[pyo3(signature = (hidden_states, pairs, config, threshold=0.5, eigen_floor=sentwhite::DEFAULT_EIGEN_FLOOR))]
fn threshold_accuracy(
    hidden_states: PathBuf,
    pairs: PathBuf,
    config: &PyPipelineConfig,
    threshold: f64,
    eigen_floor: f64,
) -> PyResult<f64> {
    let set = read_pairs(&pairs, GoldScale::Binary)?;
    let e = embed(&hidden_states, &config.inner, eigen_floor)?;
    evaluation::threshold_accuracy(&e, &set.pairs, threshold).map_err(value_err)
}

#[pymodule]
fn pysentwhite(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("DEFAULT_EIGEN_FLOOR", sentwhite::DEFAULT_EIGEN_FLOOR)?;
    m.add_class::<PyPipelineConfig>()?;
    m.add_class::<PyWhiteningTransform>()?;
    m.add_function(wrap_pyfunction!(fit_whitening, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(spearman_rho, m)?)?;
    m.add_function(wrap_pyfunction!(average_rho, m)?)?;
    m.add_function(wrap_pyfunction!(format_x100, m)?)?;
    m.add_function(wrap_pyfunction!(format_delta, m)?)?;
    m.add_function(wrap_pyfunction!(pool_sentence, m)?)?;
    m.add_function(wrap_pyfunction!(combine_layers, m)?)?;
    m.add_function(wrap_pyfunction!(write_hidden_states, m)?)?;
    m.add_function(wrap_pyfunction!(inspect, m)?)?;
    m.add_function(wrap_pyfunction!(embed_file, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_accuracy, m)?)?;
    Ok(())
}
