//! Python bindings: run configuration, pipeline phases, checkpoints,
//! caption metrics and the closed-form losses.

use std::collections::BTreeMap;
use std::path::PathBuf;

use kreplay_core::config::RunConfig;
use kreplay_core::decode::{caption_image, BeamConfig, DecodeMethod};
use kreplay_core::eval::{self, Candidates, KeywordList, ReferenceSet};
use kreplay_core::model::Model;
use kreplay_core::tensor::Mat;
use kreplay_core::{losses, pipeline, train, Error};
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyFileNotFoundError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

/// Flat run configuration; every key of the config file format is settable.
#[pyclass(name = "RunConfig")]
struct PyRunConfig(RunConfig);

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (path=None, **overrides))]
    fn new(path: Option<PathBuf>, overrides: Option<BTreeMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let mut cfg = match path {
            Some(p) => RunConfig::load(&p).map_err(py_err)?,
            None => RunConfig::default(),
        };
        for (k, v) in overrides.unwrap_or_default() {
            cfg.set(&k, &v.str()?.to_cow()?).map_err(py_err)?;
        }
        Ok(Self(cfg))
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        self.0.set(key, &value.str()?.to_cow()?).map_err(py_err)
    }

    /// All keys and their values, as strings.
    fn to_dict(&self) -> BTreeMap<String, String> {
        self.0
            .to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect()
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn hash(&self) -> String {
        self.0.hash()
    }
}

/// Generates the dataset; returns the per-split counts.
#[pyfunction]
fn gen_data(cfg: &PyRunConfig, out: PathBuf) -> PyResult<BTreeMap<String, usize>> {
    let m = pipeline::gen_data(&cfg.0, &out).map_err(py_err)?;
    Ok(m.counts.into_iter().collect())
}

fn summary(o: train::RunOutcome) -> BTreeMap<String, f64> {
    let best = &o.checkpoints[o.best];
    BTreeMap::from([
        ("steps".to_string(), o.log.len() as f64),
        ("best_epoch".to_string(), best.epoch as f64),
        ("generic_val_cider".to_string(), best.metrics.generic_cider),
        ("concept_val_rec".to_string(), best.metrics.concept_rec),
        ("final_lr".to_string(), o.final_lr),
    ])
}

#[pyfunction]
fn pretrain(cfg: &PyRunConfig, out: PathBuf) -> PyResult<BTreeMap<String, f64>> {
    pipeline::pretrain(&cfg.0, &out).map(summary).map_err(py_err)
}

#[pyfunction]
fn finetune(cfg: &PyRunConfig, out: PathBuf) -> PyResult<BTreeMap<String, f64>> {
    pipeline::finetune(&cfg.0, &out).map(summary).map_err(py_err)
}

#[pyfunction]
fn kreplay_train(cfg: &PyRunConfig, out: PathBuf) -> PyResult<BTreeMap<String, f64>> {
    pipeline::kreplay_train(&cfg.0, &out).map(summary).map_err(py_err)
}

/// Evaluation report as a JSON string.
#[pyfunction]
fn evaluate(cfg: &PyRunConfig, out: PathBuf) -> PyResult<String> {
    pipeline::evaluate(&cfg.0, &out).map(|r| json(&r)).map_err(py_err)
}

/// Decoded captions as JSON lines.
#[pyfunction]
fn decode(cfg: &PyRunConfig) -> PyResult<Vec<String>> {
    let caps = pipeline::decode(&cfg.0).map_err(py_err)?;
    Ok(caps.iter().map(json).collect())
}

/// A captioning checkpoint.
#[pyclass(name = "Model")]
struct PyModel(Model);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Model::load(&path).map(Self).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> String {
        json(self.0.config())
    }

    /// Captions one image given as a patches-by-features list of rows.
    /// Returns token ids (BOS and EOS included) and the log-probability.
    #[pyo3(signature = (patches, method="beam", beam_width=5, max_len=16))]
    fn caption(
        &self,
        patches: Vec<Vec<f64>>,
        method: &str,
        beam_width: usize,
        max_len: usize,
    ) -> PyResult<(Vec<usize>, f64)> {
        let rows = patches.len();
        let cols = patches.first().map_or(0, Vec::len);
        if rows == 0 || patches.iter().any(|r| r.len() != cols) {
            return Err(PyValueError::new_err("patches must be a non-empty rectangular list"));
        }
        let method: DecodeMethod = method.parse().map_err(py_err)?;
        let beam = BeamConfig {
            width: beam_width,
            max_len,
            length_penalty: 0.0,
        };
        let mat = Mat::from_vec(rows, cols, patches.concat());
        let h = caption_image(&self.0, &mat, method, &beam).map_err(py_err)?;
        Ok((h.tokens.ids().to_vec(), h.logprob))
    }
}

#[pyfunction]
#[pyo3(signature = (candidates, references, n=4))]
fn bleu(candidates: Candidates, references: ReferenceSet, n: usize) -> PyResult<f64> {
    eval::bleu(&candidates, &references, n).map_err(py_err)
}

#[pyfunction]
fn rouge_l(candidates: Candidates, references: ReferenceSet) -> PyResult<f64> {
    eval::rouge_l(&candidates, &references).map_err(py_err)
}

#[pyfunction]
fn cider(candidates: Candidates, references: ReferenceSet) -> PyResult<f64> {
    eval::cider(&candidates, &references).map_err(py_err)
}

#[pyfunction]
fn recognition_accuracy(candidates: Candidates, keywords: KeywordList) -> PyResult<f64> {
    eval::recognition_accuracy(&candidates, &keywords).map_err(py_err)
}

#[pyfunction]
fn coverage_loss(probs: Vec<f64>) -> f64 {
    losses::coverage_loss(&probs)
}

#[pyfunction]
fn repetition_penalty(probs: Vec<f64>) -> f64 {
    losses::repetition_penalty(&probs)
}

#[pyfunction]
fn kpred_loss(probs: Vec<f64>) -> f64 {
    losses::kpred_loss(&probs)
}

#[pyfunction]
fn cosine_lr(lr_max: f64, lr_min: f64, t: usize, t_max: usize) -> PyResult<f64> {
    train::cosine_lr(lr_max, lr_min, t, t_max).map_err(py_err)
}

#[pymodule]
fn kreplay(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(kreplay_train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(cider, m)?)?;
    m.add_function(wrap_pyfunction!(recognition_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(coverage_loss, m)?)?;
    m.add_function(wrap_pyfunction!(repetition_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(kpred_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    Ok(())
}
