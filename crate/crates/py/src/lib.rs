//! Python module `m2ctts`: configs, corpora, training, synthesis and the
//! verification suites.

use std::path::PathBuf;

use m2ctts_core::autodiff::{masked_softmax_rows, Mat};
use m2ctts_core::cli::{feature_source, main_with_args, manifest_path, synthesize_turn};
use m2ctts_core::config::{parse_override_args, AblationConfig, RunConfig};
use m2ctts_core::corpus::{all_windows, gen_toy_corpus as gen_toy, load_manifest, window, Dialogue};
use m2ctts_core::extractors::FeatureBank;
use m2ctts_core::model::Model;
use m2ctts_core::training::{split_dialogues, Checkpoint, LossBreakdown, TrainState, Trainer as CoreTrainer};
use m2ctts_core::{verify, Error};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::TurnOutOfRange { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn breakdown<'py>(py: Python<'py>, b: &LossBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mel_l1", b.mel_l1)?;
    d.set_item("pitch_mse", b.pitch_mse)?;
    d.set_item("energy_mse", b.energy_mse)?;
    d.set_item("logdur_mse", b.logdur_mse)?;
    d.set_item("prosody_mse", b.prosody_mse)?;
    d.set_item("total", b.total)?;
    Ok(d)
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Run configuration: model, training, data and ablation settings.
#[pyclass(name = "RunConfig", module = "m2ctts")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Loads `path` when given, else the `desk` or `full` preset.
    #[new]
    #[pyo3(signature = (path=None, preset="desk"))]
    fn new(path: Option<PathBuf>, preset: &str) -> PyResult<Self> {
        let inner = match (path, preset) {
            (Some(p), _) => RunConfig::from_file(&p).map_err(to_py)?,
            (None, "desk") => RunConfig::desk(),
            (None, "full") => RunConfig::default(),
            (None, other) => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_json(text).map_err(to_py)?,
        })
    }

    /// New config with `{"train.steps": "10", ...}` applied.
    fn with_overrides(&self, overrides: Vec<(String, String)>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_overrides(&overrides).map_err(to_py)?,
        })
    }

    /// New config with CLI-style `["--train.steps", "10"]` applied.
    fn with_args(&self, args: Vec<String>) -> PyResult<Self> {
        let pairs = parse_override_args(&args).map_err(to_py)?;
        self.with_overrides(pairs)
    }

    fn to_json(&self) -> String {
        self.inner.to_pretty_json()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    /// Hex digest of the settings that fix parameter shapes.
    fn model_hash(&self) -> String {
        self.inner.model_hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.resolved_seed()
    }

    #[getter]
    fn ablation(&self) -> String {
        self.inner.ablation.name.clone()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(ablation={:?}, seed={})", self.inner.ablation.name, self.inner.resolved_seed())
    }
}

/// A loaded dialogue corpus.
#[pyclass(name = "Corpus", module = "m2ctts")]
struct PyCorpus {
    dialogues: Vec<Dialogue>,
}

#[pymethods]
impl PyCorpus {
    /// `path` is a corpus directory or its `manifest.jsonl`.
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            dialogues: load_manifest(&manifest_path(&path)).map_err(to_py)?,
        })
    }

    fn dialogue_ids(&self) -> Vec<String> {
        self.dialogues.iter().map(|d| d.dialogue_id.clone()).collect()
    }

    fn num_turns(&self, dialogue_id: &str) -> PyResult<usize> {
        Ok(self.find(dialogue_id)?.len())
    }

    /// History turn indices of the window ending at turn `t`.
    fn window(&self, dialogue_id: &str, t: usize, c: usize) -> PyResult<Vec<usize>> {
        let d = self.find(dialogue_id)?;
        Ok(window(d, t, c).map_err(to_py)?.history_indices())
    }

    fn __len__(&self) -> usize {
        self.dialogues.len()
    }
}

impl PyCorpus {
    fn find(&self, id: &str) -> PyResult<&Dialogue> {
        self.dialogues
            .iter()
            .find(|d| d.dialogue_id == id)
            .ok_or_else(|| PyValueError::new_err(format!("no dialogue {id:?}")))
    }
}

/// Deterministic trainer over the training split of a corpus.
#[pyclass(name = "Trainer", module = "m2ctts")]
struct PyTrainer {
    config: RunConfig,
    train: Vec<Dialogue>,
    val: Vec<Dialogue>,
    bank: FeatureBank,
    parts: Option<(Model, TrainState)>,
}

impl PyTrainer {
    fn with<R>(&mut self, f: impl FnOnce(&mut CoreTrainer) -> m2ctts_core::Result<R>) -> PyResult<R> {
        let (model, state) = self
            .parts
            .take()
            .ok_or_else(|| PyRuntimeError::new_err("trainer is in use"))?;
        let mut t = CoreTrainer {
            config: self.config.clone(),
            model,
            state,
            windows: all_windows(&self.train, self.config.data.c),
            bank: &self.bank,
        };
        let out = f(&mut t);
        self.parts = Some((t.model, t.state));
        out.map_err(to_py)
    }
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config, corpus, resume=None, cache=None))]
    fn new(config: &PyRunConfig, corpus: PathBuf, resume: Option<PathBuf>, cache: Option<PathBuf>) -> PyResult<Self> {
        let config = config.inner.resolved();
        config.validate().map_err(to_py)?;
        let dialogues = load_manifest(&manifest_path(&corpus)).map_err(to_py)?;
        let source = feature_source(&config, cache.as_deref()).map_err(to_py)?;
        let bank = FeatureBank::load(&dialogues, source.as_ref()).map_err(to_py)?;
        let (train, val) = split_dialogues(&dialogues, config.data.val_fraction);
        let (train, val) = (train.to_vec(), val.to_vec());
        let parts = {
            let t = match &resume {
                Some(p) => CoreTrainer::resume(&config, p, &train, &bank),
                None => CoreTrainer::new(&config, &train, &bank),
            }
            .map_err(to_py)?;
            (t.model, t.state)
        };
        Ok(Self {
            config,
            train,
            val,
            bank,
            parts: Some(parts),
        })
    }

    /// One optimizer update; returns the loss breakdown.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let b = self.with(|t| t.train_step())?;
        breakdown(py, &b)
    }

    /// `n` updates; returns the total loss of each.
    fn run(&mut self, n: u64) -> PyResult<Vec<f64>> {
        self.with(|t| (0..n).map(|_| Ok(t.train_step()?.total)).collect())
    }

    /// Teacher-forced loss on the held-out split, or the training split
    /// when nothing is held out.
    fn evaluate<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let val = if self.val.is_empty() { self.train.clone() } else { self.val.clone() };
        let b = self.with(|t| t.evaluate(&all_windows(&val, t.config.data.c)))?;
        breakdown(py, &b)
    }

    fn save_checkpoint(&mut self, path: PathBuf) -> PyResult<()> {
        self.with(|t| t.save_checkpoint(&path))
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.parts.as_ref().map_or(0, |(_, s)| s.step)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.parts.as_ref().map_or(0, |(m, _)| m.store.num_scalars())
    }
}

/// Writes a synthetic corpus and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, seed=7, dialogues=2, turns=4))]
fn gen_toy_corpus(out: PathBuf, seed: u64, dialogues: usize, turns: usize) -> PyResult<String> {
    let p = gen_toy(seed, dialogues, turns, &out).map_err(to_py)?;
    Ok(p.to_string_lossy().into_owned())
}

/// Synthesizes turn `turn` of `dialogue_id`; returns `(mel rows, durations)`.
#[pyfunction]
#[pyo3(signature = (checkpoint, corpus, dialogue_id, turn, cache=None))]
fn synthesize(
    checkpoint: PathBuf,
    corpus: PathBuf,
    dialogue_id: &str,
    turn: usize,
    cache: Option<PathBuf>,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let ck = Checkpoint::read(&checkpoint).map_err(to_py)?;
    let dialogues = load_manifest(&manifest_path(&corpus)).map_err(to_py)?;
    let syn = synthesize_turn(&ck, &dialogues, dialogue_id, turn, cache.as_deref()).map_err(to_py)?;
    Ok((rows(&syn.mel), syn.durations))
}

/// Runs one property suite, or all of them; returns
/// `(suite, name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (suite="all"))]
fn verify_suite(suite: &str) -> PyResult<Vec<(String, String, bool, String)>> {
    let results = if suite == "all" { verify::run_all() } else { verify::run_suite(suite) }.map_err(to_py)?;
    Ok(results
        .into_iter()
        .map(|r| (r.suite.to_string(), r.name, r.passed, r.detail))
        .collect())
}

/// Mean squared distance between two prosody vectors.
#[pyfunction]
fn prosody_loss(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    m2ctts_core::prosody::prosody_loss(&pred, &target).map_err(to_py)
}

/// Row softmax over keys where `mask` is true.
#[pyfunction]
fn masked_softmax(scores: Vec<Vec<f64>>, mask: Vec<bool>) -> PyResult<Vec<Vec<f64>>> {
    let cols = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged score rows"));
    }
    let m = Mat::from_shape_vec((scores.len(), cols), scores.concat())
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(rows(&masked_softmax_rows(&m, &mask).map_err(to_py)?))
}

/// `(tum, wum, tpm, wpm)` for a named row M1–M7.
#[pyfunction]
fn ablation_flags(name: &str) -> PyResult<(bool, bool, bool, bool)> {
    let a = AblationConfig::named(name).map_err(to_py)?;
    Ok((a.tum, a.wum, a.tpm, a.wpm))
}

/// Runs the command line with `args` (without the program name) and returns
/// its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    main_with_args(std::iter::once("m2ctts".to_string()).chain(args))
}

#[pymodule]
fn m2ctts(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(gen_toy_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(verify_suite, m)?)?;
    m.add_function(wrap_pyfunction!(prosody_loss, m)?)?;
    m.add_function(wrap_pyfunction!(masked_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_flags, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("ABLATIONS", m2ctts_core::config::ABLATION_NAMES.to_vec())?;
    Ok(())
}
