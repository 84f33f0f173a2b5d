//! Python bindings for the selection engine: corpus IO, acquisition scoring,
//! k-NN broadening, lookalike filtering, binary metrics, fusion training,
//! and the end-to-end loop.
//!
//! Build with `cargo build -p lsb-py`, then import the produced shared
//! library as `lsb_py` (see python/smoke_test.py for the copy-and-import
//! dance without maturin).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use lsb_core::datastore::{self, Format};
use lsb_core::fusion::{self, FusionMode, FusionParams};
use lsb_core::knn::{self, KnnConfig, Metric};
use lsb_core::lookalike;
use lsb_core::metrics;
use lsb_core::pipeline;
use lsb_core::synth;
use lsb_core::uncertainty::{self, AcquisitionStrategy, SeedRule};

fn value_error(err: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn parse_format(format: &str) -> PyResult<Format> {
    match format {
        "jsonl" => Ok(Format::Jsonl),
        "packed" => Ok(Format::Packed),
        other => Err(value_error(format!("unknown format {other:?} (jsonl, packed)"))),
    }
}

fn parse_metric(metric: &str) -> PyResult<Metric> {
    match metric {
        "cosine" => Ok(Metric::Cosine),
        "euclidean" => Ok(Metric::Euclidean),
        other => Err(value_error(format!("unknown metric {other:?} (cosine, euclidean)"))),
    }
}

fn parse_strategy(strategy: &str) -> PyResult<AcquisitionStrategy> {
    match strategy {
        "least_confident" => Ok(AcquisitionStrategy::LeastConfident),
        "margin" => Ok(AcquisitionStrategy::Margin),
        "max_entropy" => Ok(AcquisitionStrategy::MaxEntropy),
        other => Err(value_error(format!(
            "unknown strategy {other:?} (least_confident, margin, max_entropy)"
        ))),
    }
}

fn parse_mode(mode: &str) -> PyResult<FusionMode> {
    match mode {
        "avg_pool" => Ok(FusionMode::AvgPool),
        "attention" => Ok(FusionMode::Attention),
        other => Err(value_error(format!("unknown mode {other:?} (avg_pool, attention)"))),
    }
}

fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use pyo3::IntoPyObjectExt;
    match value {
        serde_json::Value::Null => Ok(py.None()),
        serde_json::Value::Bool(b) => b.into_py_any(py),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        serde_json::Value::String(s) => s.into_py_any(py),
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new(py);
            for (key, item) in map {
                dict.set_item(key, json_to_py(py, item)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

fn to_py_json<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let json = serde_json::to_value(value).map_err(value_error)?;
    json_to_py(py, &json)
}

/// An immutable, validated corpus of records.
#[pyclass(name = "SampleSet")]
struct PySampleSet {
    inner: datastore::SampleSet,
}

#[pymethods]
impl PySampleSet {
    /// Load a corpus file ("jsonl" or "packed" manifest path).
    #[staticmethod]
    #[pyo3(signature = (path, format = "jsonl"))]
    fn load(path: PathBuf, format: &str) -> PyResult<Self> {
        let set = datastore::load_samples(&path, parse_format(format)?).map_err(value_error)?;
        Ok(PySampleSet { inner: set })
    }

    #[pyo3(signature = (path, format = "jsonl"))]
    fn save(&self, path: PathBuf, format: &str) -> PyResult<()> {
        datastore::write_samples(&self.inner, &path, parse_format(format)?).map_err(value_error)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// (embedding_dim, classes, audio_dim or None).
    fn dims(&self) -> (usize, usize, Option<usize>) {
        let d = self.inner.dims();
        (d.embedding, d.classes, d.audio)
    }

    fn ids(&self) -> Vec<String> {
        self.inner.iter().map(|r| r.id.clone()).collect()
    }

    /// Full record as a dict.
    fn record(&self, py: Python<'_>, id: &str) -> PyResult<Py<PyAny>> {
        let record =
            self.inner.get(id).ok_or_else(|| PyKeyError::new_err(id.to_string()))?;
        to_py_json(py, record)
    }

    fn embedding(&self, id: &str) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .get(id)
            .ok_or_else(|| PyKeyError::new_err(id.to_string()))?
            .embedding
            .clone())
    }

    fn __repr__(&self) -> String {
        let d = self.inner.dims();
        format!(
            "SampleSet(records={}, d={}, classes={}, audio={:?})",
            self.inner.len(),
            d.embedding,
            d.classes,
            d.audio
        )
    }
}

/// The trained mismatch classifier.
#[pyclass(name = "LookalikeModel")]
struct PyLookalikeModel {
    inner: lookalike::LookalikeModel,
}

#[pymethods]
impl PyLookalikeModel {
    /// Train on a labeled corpus (mismatch = argmax(probs) != label).
    #[staticmethod]
    #[pyo3(signature = (labeled, l2 = 1e-4, max_iters = 2000, tolerance = 1e-8, seed = 0, class_weighting = false, negative_keep = None))]
    fn train(
        labeled: &PySampleSet,
        l2: f64,
        max_iters: usize,
        tolerance: f64,
        seed: u64,
        class_weighting: bool,
        negative_keep: Option<f64>,
    ) -> PyResult<Self> {
        let examples = lookalike::build_mismatch_dataset(&labeled.inner).map_err(value_error)?;
        let config = lookalike::LookalikeTrainConfig {
            l2,
            max_iters,
            tolerance,
            seed,
            class_weighting,
            negative_keep,
            ..Default::default()
        };
        let model = lookalike::train_lookalike(&examples, &config).map_err(value_error)?;
        Ok(PyLookalikeModel { inner: model })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyLookalikeModel { inner: lookalike::LookalikeModel::load(&path).map_err(value_error)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(value_error)
    }

    /// Predicted mismatch probability for an embedding.
    fn score(&self, embedding: Vec<f64>) -> PyResult<f64> {
        lookalike::lookalike_score(&self.inner, &embedding).map_err(value_error)
    }

    /// Mismatch AUC over a labeled corpus.
    fn auc(&self, labeled: &PySampleSet) -> PyResult<f64> {
        let examples = lookalike::build_mismatch_dataset(&labeled.inner).map_err(value_error)?;
        lookalike::evaluate_lookalike(&self.inner, &examples).map_err(value_error)
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    #[getter]
    fn bias(&self) -> f64 {
        self.inner.bias
    }

    #[getter]
    fn final_loss(&self) -> f64 {
        self.inner.meta.final_loss
    }

    #[getter]
    fn loss_trace(&self) -> Vec<f64> {
        self.inner.meta.loss_trace.clone()
    }
}

#[pyfunction]
fn acquisition_score(probs: Vec<f64>, strategy: &str) -> PyResult<f64> {
    uncertainty::acquisition_score(&probs, parse_strategy(strategy)?).map_err(value_error)
}

#[pyfunction]
fn expected_score(probs: Vec<f64>) -> f64 {
    uncertainty::expected_score(&probs)
}

#[pyfunction]
fn multiclass_loss(probs: Vec<f64>, label: usize) -> PyResult<f64> {
    uncertainty::multiclass_loss(&probs, label).map_err(value_error)
}

/// Mine seed badcases from a labeled corpus; returns (id, loss) pairs.
#[pyfunction]
#[pyo3(signature = (labeled, quantile = None, threshold = None))]
fn select_seeds(
    labeled: &PySampleSet,
    quantile: Option<f64>,
    threshold: Option<f64>,
) -> PyResult<Vec<(String, f64)>> {
    let rule = match (quantile, threshold) {
        (Some(_), Some(_)) => {
            return Err(value_error("pass either quantile or threshold, not both"))
        }
        (Some(q), None) => SeedRule::Quantile(q),
        (None, Some(t)) => SeedRule::Threshold(t),
        (None, None) => SeedRule::default(),
    };
    Ok(uncertainty::select_seeds(&labeled.inner, rule)
        .map_err(value_error)?
        .entries)
}

#[pyfunction]
fn pairwise_distance(a: Vec<f64>, b: Vec<f64>, metric: &str) -> PyResult<f64> {
    knn::pairwise_distance(&a, &b, parse_metric(metric)?).map_err(value_error)
}

/// k nearest pool records to the query id; returns (id, distance) pairs.
#[pyfunction]
#[pyo3(signature = (pool, query_id, k = 3, metric = "cosine"))]
fn top_k(pool: &PySampleSet, query_id: &str, k: usize, metric: &str) -> PyResult<Vec<(String, f64)>> {
    let query = pool
        .inner
        .get(query_id)
        .ok_or_else(|| PyKeyError::new_err(query_id.to_string()))?;
    let cfg = KnnConfig { k, metric: parse_metric(metric)?, ..KnnConfig::default() };
    let list = knn::top_k(query, &pool.inner, &cfg).map_err(value_error)?;
    Ok(list.neighbors.into_iter().map(|n| (n.id, n.distance)).collect())
}

/// LSB expansion of mined seeds against the pool; returns dicts with
/// id / distance / seed_id.
#[pyfunction]
#[pyo3(signature = (labeled, pool, quantile = 0.05, k = 3, metric = "cosine"))]
fn lsb_expand(
    py: Python<'_>,
    labeled: &PySampleSet,
    pool: &PySampleSet,
    quantile: f64,
    k: usize,
    metric: &str,
) -> PyResult<Py<PyAny>> {
    let seeds = uncertainty::select_seeds(&labeled.inner, SeedRule::Quantile(quantile))
        .map_err(value_error)?;
    let cfg = KnnConfig { k, metric: parse_metric(metric)?, ..KnnConfig::default() };
    let batch = knn::lsb_expand(&seeds, &labeled.inner, &pool.inner, &cfg).map_err(value_error)?;
    to_py_json(py, &batch.entries)
}

/// Keep ids whose lookalike score clears the threshold; returns
/// (id, score) pairs in input order.
#[pyfunction]
#[pyo3(signature = (model, source, ids, threshold = 0.5))]
fn lt_filter(
    model: &PyLookalikeModel,
    source: &PySampleSet,
    ids: Vec<String>,
    threshold: f64,
) -> PyResult<Vec<(String, f64)>> {
    let mut kept = Vec::new();
    for id in ids {
        let embedding = source
            .inner
            .embedding_of(&id)
            .map_err(|_| PyKeyError::new_err(id.clone()))?;
        let score = lookalike::lookalike_score(&model.inner, embedding).map_err(value_error)?;
        if score >= threshold {
            kept.push((id, score));
        }
    }
    Ok(kept)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels).map_err(value_error)
}

#[pyfunction]
#[pyo3(signature = (scores, labels, threshold = 0.5))]
fn f1_binary(scores: Vec<f64>, labels: Vec<bool>, threshold: f64) -> PyResult<f64> {
    metrics::f1_binary(&scores, &labels, threshold).map_err(value_error)
}

#[pyfunction]
fn beta_variance(tp: usize, fp: usize) -> f64 {
    metrics::beta_variance(tp, fp)
}

/// Full binary report (AUC, F1, recall-at-precision curve, Beta variance)
/// as a dict.
#[pyfunction]
#[pyo3(signature = (scores, labels, f1_threshold = 0.5, targets = None))]
fn evaluate(
    py: Python<'_>,
    scores: Vec<f64>,
    labels: Vec<bool>,
    f1_threshold: f64,
    targets: Option<Vec<f64>>,
) -> PyResult<Py<PyAny>> {
    let targets = targets.unwrap_or_else(|| metrics::DEFAULT_PRECISION_TARGETS.to_vec());
    let report = metrics::evaluate_binary(&scores, &labels, f1_threshold, &targets)
        .map_err(value_error)?;
    to_py_json(py, &report)
}

/// Generate a synthetic corpus into a state directory (same layout the CLI
/// uses); returns (labeled, pool, heldout) counts.
#[pyfunction]
#[pyo3(signature = (out_dir, seed, config_json = None))]
fn generate_corpus(
    out_dir: PathBuf,
    seed: u64,
    config_json: Option<&str>,
) -> PyResult<(usize, usize, usize)> {
    let mut config: synth::SyntheticCorpusConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(value_error)?,
        None => Default::default(),
    };
    config.seed = seed;
    let corpus = synth::generate_synthetic_corpus(&config).map_err(value_error)?;
    std::fs::create_dir_all(&out_dir).map_err(value_error)?;
    let counts = (corpus.labeled.len(), corpus.pool.len(), corpus.heldout.len());
    write_state(&out_dir, &pipeline::PipelineState::from_corpus(corpus).map_err(value_error)?)?;
    Ok(counts)
}

fn write_state(dir: &Path, state: &pipeline::PipelineState) -> PyResult<()> {
    datastore::write_samples(&state.labeled, &dir.join("labeled.jsonl"), Format::Jsonl)
        .map_err(value_error)?;
    datastore::write_samples(&state.pool, &dir.join("pool.jsonl"), Format::Jsonl)
        .map_err(value_error)?;
    datastore::write_samples(&state.heldout, &dir.join("heldout.jsonl"), Format::Jsonl)
        .map_err(value_error)?;
    std::fs::write(
        dir.join("oracle.json"),
        serde_json::to_string_pretty(&state.oracle).map_err(value_error)?,
    )
    .map_err(value_error)?;
    Ok(())
}

/// Run the full selection loop on a fresh synthetic corpus; returns one dict
/// per round (annotated count, held-out AUC and accuracy, warnings).
#[pyfunction]
#[pyo3(signature = (out_dir, seed, rounds = 3, corpus_json = None, round_json = None))]
fn run_loop(
    py: Python<'_>,
    out_dir: PathBuf,
    seed: u64,
    rounds: u32,
    corpus_json: Option<&str>,
    round_json: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let mut corpus_cfg: synth::SyntheticCorpusConfig = match corpus_json {
        Some(text) => serde_json::from_str(text).map_err(value_error)?,
        None => Default::default(),
    };
    corpus_cfg.seed = seed;
    let mut round_cfg: pipeline::RoundConfig = match round_json {
        Some(text) => serde_json::from_str(text).map_err(value_error)?,
        None => Default::default(),
    };
    round_cfg.seed = seed;
    let corpus = synth::generate_synthetic_corpus(&corpus_cfg).map_err(value_error)?;
    let state = pipeline::PipelineState::from_corpus(corpus).map_err(value_error)?;
    let out = pipeline::run_loop(state, &round_cfg, rounds, Some(&out_dir)).map_err(value_error)?;
    let rows: Vec<serde_json::Value> = out
        .history
        .iter()
        .map(|r| {
            serde_json::json!({
                "round": r.round,
                "annotated": r.annotated.len(),
                "auc": r.report.auc,
                "accuracy": r.report.accuracy,
                "warnings": r.warnings,
            })
        })
        .collect();
    json_to_py(py, &serde_json::Value::Array(rows))
}

/// Train the fusion classifier on the needle-in-audio task; returns a dict
/// with test accuracy and the held-out report.
#[pyfunction]
#[pyo3(signature = (mode, seed, epochs = 30, learning_rate = 0.5, batch_size = 32, task_json = None))]
fn fuse_train(
    py: Python<'_>,
    mode: &str,
    seed: u64,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    task_json: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let mut task: synth::NeedleTaskConfig = match task_json {
        Some(text) => serde_json::from_str(text).map_err(value_error)?,
        None => Default::default(),
    };
    task.seed = seed;
    let (train, test) = synth::generate_needle_task(&task);
    let config = fusion::ToyTrainConfig { learning_rate, epochs, batch_size, seed };
    let init = FusionParams::seeded(task.d_cls, task.audio.d_audio, 2, seed);
    let outcome =
        fusion::train_toy(&train, &test, init, &config, parse_mode(mode)?).map_err(value_error)?;
    let summary = serde_json::json!({
        "test_accuracy": outcome.test_accuracy,
        "auc": outcome.report.auc,
        "f1": outcome.report.f1,
        "epoch_losses": outcome.epoch_losses,
    });
    json_to_py(py, &summary)
}

/// Central-difference check of the fusion gradients on a seeded random
/// model; returns (max_rel_error, worst_coordinate).
#[pyfunction]
#[pyo3(signature = (seed, mode = "attention", step = 1e-4, d_audio = 8, d_cls = 6, rows = 5, batch = 4, classes = 4))]
#[allow(clippy::too_many_arguments)]
fn grad_check(
    seed: u64,
    mode: &str,
    step: f64,
    d_audio: usize,
    d_cls: usize,
    rows: usize,
    batch: usize,
    classes: usize,
) -> PyResult<(f64, String)> {
    let params = FusionParams::seeded(d_cls, d_audio, classes, seed);
    let samples = synth::random_fusion_batch(seed ^ 0x9e37, batch, rows, d_audio, d_cls, classes);
    let report =
        fusion::grad_check(&params, &samples, parse_mode(mode)?, step).map_err(value_error)?;
    Ok((report.max_rel_error, report.worst_coordinate))
}

/// Statistical selection over a corpus: the budget most-uncertain ids.
#[pyfunction]
#[pyo3(signature = (pool, strategy, budget))]
fn select_statistical(
    pool: &PySampleSet,
    strategy: &str,
    budget: usize,
) -> PyResult<Vec<(String, f64)>> {
    let batch = uncertainty::select_statistical(&pool.inner, parse_strategy(strategy)?, budget)
        .map_err(value_error)?;
    Ok(batch.entries.into_iter().map(|e| (e.id, e.score)).collect())
}

/// Uniform random selection (seeded) over a corpus.
#[pyfunction]
#[pyo3(signature = (pool, budget, seed))]
fn select_random(pool: &PySampleSet, budget: usize, seed: u64) -> Vec<String> {
    pipeline::random_batch(&pool.inner, budget, seed, &HashSet::new())
        .entries
        .into_iter()
        .map(|e| e.id)
        .collect()
}

#[pymodule]
fn lsb_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySampleSet>()?;
    m.add_class::<PyLookalikeModel>()?;
    m.add_function(wrap_pyfunction!(acquisition_score, m)?)?;
    m.add_function(wrap_pyfunction!(expected_score, m)?)?;
    m.add_function(wrap_pyfunction!(multiclass_loss, m)?)?;
    m.add_function(wrap_pyfunction!(select_seeds, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_distance, m)?)?;
    m.add_function(wrap_pyfunction!(top_k, m)?)?;
    m.add_function(wrap_pyfunction!(lsb_expand, m)?)?;
    m.add_function(wrap_pyfunction!(lt_filter, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(f1_binary, m)?)?;
    m.add_function(wrap_pyfunction!(beta_variance, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_loop, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_train, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(select_statistical, m)?)?;
    m.add_function(wrap_pyfunction!(select_random, m)?)?;
    Ok(())
}
