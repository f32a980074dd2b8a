//! Python bindings: experiment configs, full runs, audits, reports, the wire
//! codec and the aggregation oracles.

use std::collections::BTreeMap;
use std::path::PathBuf;

use fedchain_core::codec::{self, PayloadKind};
use fedchain_core::experiment::{
    self, AttackStatus, ExperimentConfig, ExperimentError, RunOutcome, Split,
};
use fedchain_core::fl;
use fedchain_core::params::ParamVector;
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

create_exception!(fedchain, FedchainError, PyRuntimeError);
create_exception!(fedchain, ConfigError, FedchainError);
create_exception!(fedchain, IntegrityError, FedchainError);

fn to_py(e: ExperimentError) -> PyErr {
    match e.exit_code() {
        2 => ConfigError::new_err(e.to_string()),
        3 => IntegrityError::new_err(e.to_string()),
        _ => FedchainError::new_err(e.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn split_from(split: &str, concentration: f64) -> PyResult<Split> {
    match split {
        "iid" => Ok(Split::Iid),
        "dirichlet" | "noniid" => Ok(Split::Dirichlet { concentration }),
        other => Err(value_err(format!("unknown split {other:?}; use \"iid\" or \"dirichlet\""))),
    }
}

fn kind_from(kind: &str) -> PyResult<PayloadKind> {
    match kind {
        "float32" => Ok(PayloadKind::Float32),
        "sign-bits" => Ok(PayloadKind::SignBits),
        other => Err(value_err(format!("unknown payload kind {other:?}"))),
    }
}

/// Experiment configuration; mirrors the TOML schema.
#[pyclass(name = "Config", module = "fedchain", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Small setting: 10 agents, one adversary.
    #[staticmethod]
    #[pyo3(signature = (seed=0, split="iid", concentration=0.5))]
    fn small(seed: u64, split: &str, concentration: f64) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::small(seed, split_from(split, concentration)?),
        })
    }

    /// Large setting scaled to 30 agents, three adversaries.
    #[staticmethod]
    #[pyo3(signature = (seed=0, split="iid", concentration=0.5))]
    fn large(seed: u64, split: &str, concentration: f64) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::large(seed, split_from(split, concentration)?),
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_toml(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.fl.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.fl.seed = seed;
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.fl.rounds
    }

    #[setter]
    fn set_rounds(&mut self, rounds: usize) {
        self.inner.fl.rounds = rounds;
    }

    #[getter]
    fn kappa(&self) -> usize {
        self.inner.fl.kappa
    }

    #[setter]
    fn set_kappa(&mut self, kappa: usize) {
        self.inner.fl.kappa = kappa;
    }

    #[getter]
    fn agents(&self) -> Vec<String> {
        self.inner.agent_ids()
    }

    #[getter]
    fn adversaries(&self) -> Vec<String> {
        self.inner.adversaries()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(name={:?}, agents={}, rounds={}, seed={})",
            self.inner.name, self.inner.fl.agents, self.inner.fl.rounds, self.inner.fl.seed
        )
    }
}

/// A finished run held in memory; `write` stores it as a run directory.
#[pyclass(name = "Run", module = "fedchain", unsendable)]
struct PyRun {
    inner: RunOutcome,
}

#[pymethods]
impl PyRun {
    fn write(&self, dir: PathBuf) -> PyResult<()> {
        experiment::write_run_dir(&self.inner, &dir).map_err(to_py)
    }

    /// "absent", "succeeded" or "failed".
    #[getter]
    fn attack_status(&self) -> &'static str {
        match self.inner.summary.attack_status {
            AttackStatus::Absent => "absent",
            AttackStatus::Succeeded => "succeeded",
            AttackStatus::Failed => "failed",
        }
    }

    #[getter]
    fn seed_used(&self) -> u64 {
        self.inner.summary.seed_used
    }

    #[getter]
    fn clean_accuracy(&self) -> f64 {
        self.inner.summary.clean_accuracy
    }

    #[getter]
    fn backdoor_accuracy(&self) -> f64 {
        self.inner.summary.backdoor_accuracy
    }

    #[getter]
    fn flagged(&self) -> Vec<String> {
        self.inner.report.flagged.clone()
    }

    #[getter]
    fn qualifying_rounds(&self) -> Vec<usize> {
        self.inner.report.qualifying_rounds.clone()
    }

    /// `(agent, avg_l2, qualifying_rounds, insufficient_signal)` best first.
    #[getter]
    fn ranking(&self) -> Vec<(String, f64, usize, bool)> {
        self.inner
            .report
            .ranking
            .iter()
            .map(|s| (s.agent_id.clone(), s.avg_l2, s.qualifying_rounds, s.insufficient_signal))
            .collect()
    }

    /// `(claim_id, accuser, accused, status)` for claims settled during the run.
    #[getter]
    fn claims(&self) -> Vec<(u64, String, String, &'static str)> {
        self.inner
            .summary
            .claims
            .iter()
            .map(|c| (c.claim_id, c.accuser.clone(), c.accused.clone(), c.status.as_str()))
            .collect()
    }

    /// 1-based rank, or None for unknown agents.
    fn rank_of(&self, agent: &str) -> Option<usize> {
        self.inner.rank_of(agent)
    }

    fn ranking_text(&self) -> String {
        self.inner.report.ranking_text()
    }

    fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner.summary).expect("serializable")
    }

    fn __repr__(&self) -> String {
        format!(
            "Run(name={:?}, attack={}, flagged={:?})",
            self.inner.summary.name,
            self.attack_status(),
            self.inner.report.flagged
        )
    }
}

/// Runs the full pipeline; the GIL is released while training.
#[pyfunction]
fn run(py: Python<'_>, config: &PyConfig) -> PyResult<PyRun> {
    let cfg = config.inner.clone();
    let inner = py.detach(move || experiment::run_experiment(&cfg)).map_err(to_py)?;
    Ok(PyRun { inner })
}

/// Adjudicates a claim against a run directory; returns `(status, transcript)`.
#[pyfunction]
#[pyo3(signature = (run_dir, accuser, accused, kappa=None, assume_adversaries=None))]
fn audit(
    py: Python<'_>,
    run_dir: PathBuf,
    accuser: String,
    accused: String,
    kappa: Option<usize>,
    assume_adversaries: Option<usize>,
) -> PyResult<(&'static str, String)> {
    let t = py
        .detach(move || experiment::audit_run(&run_dir, &accuser, &accused, kappa, assume_adversaries))
        .map_err(to_py)?;
    Ok((t.status.as_str(), t.text()))
}

/// Writes the CSV report of a run directory and returns `{file name: csv text}`.
#[pyfunction]
fn report(run_dir: PathBuf) -> PyResult<BTreeMap<String, String>> {
    let (r, _) = experiment::report_run(&run_dir).map_err(to_py)?;
    Ok(r.files().iter().map(|(n, b)| (n.to_string(), b.to_string())).collect())
}

#[pyfunction]
fn verify_formats() -> PyResult<Vec<String>> {
    experiment::verify_formats().map_err(FedchainError::new_err)
}

#[pyfunction]
fn encode_payload(values: Vec<f32>, kind: &str) -> PyResult<String> {
    codec::encode_payload(&ParamVector::new(values), kind_from(kind)?).map_err(value_err)
}

#[pyfunction]
fn decode_payload(text: &str, kind: &str, dim: usize) -> PyResult<Vec<f32>> {
    Ok(codec::decode_payload(text, kind_from(kind)?, dim)
        .map_err(value_err)?
        .into_inner())
}

/// Hex SHA-256 of the canonical bytes of `values` under `kind`.
#[pyfunction]
fn hash_params(values: Vec<f32>, kind: &str) -> PyResult<String> {
    Ok(codec::hash_params(&ParamVector::new(values), kind_from(kind)?)
        .map_err(value_err)?
        .as_str()
        .to_string())
}

/// MSB-first sign bits, set for non-negative values.
#[pyfunction]
fn pack_signs<'py>(py: Python<'py>, values: Vec<f32>) -> Bound<'py, PyBytes> {
    PyBytes::new(py, codec::pack_signs(&ParamVector::new(values)).bytes())
}

#[pyfunction]
fn base64_len(dim: u64) -> u64 {
    codec::base64_len(dim)
}

fn to_updates(updates: BTreeMap<String, Vec<f32>>) -> BTreeMap<String, ParamVector> {
    updates.into_iter().map(|(k, v)| (k, ParamVector::new(v))).collect()
}

/// Sample-count-weighted mean of the updates, scaled by `eta`.
#[pyfunction]
#[pyo3(signature = (updates, counts, eta=1.0))]
fn fedavg(updates: BTreeMap<String, Vec<f32>>, counts: BTreeMap<String, u64>, eta: f64) -> PyResult<Vec<f32>> {
    Ok(fl::fedavg_oracle(&to_updates(updates), &counts, eta)
        .map_err(value_err)?
        .into_inner())
}

/// Element-wise majority vote of the update signs, scaled by `eta`.
#[pyfunction]
#[pyo3(signature = (updates, eta=1.0))]
fn sign_aggregate(updates: BTreeMap<String, Vec<f32>>, eta: f64) -> PyResult<Vec<f32>> {
    Ok(fl::sign_agg_oracle(&to_updates(updates), eta)
        .map_err(value_err)?
        .into_inner())
}

#[pymodule]
fn fedchain(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("FedchainError", py.get_type::<FedchainError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("IntegrityError", py.get_type::<IntegrityError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(verify_formats, m)?)?;
    m.add_function(wrap_pyfunction!(encode_payload, m)?)?;
    m.add_function(wrap_pyfunction!(decode_payload, m)?)?;
    m.add_function(wrap_pyfunction!(hash_params, m)?)?;
    m.add_function(wrap_pyfunction!(pack_signs, m)?)?;
    m.add_function(wrap_pyfunction!(base64_len, m)?)?;
    m.add_function(wrap_pyfunction!(fedavg, m)?)?;
    m.add_function(wrap_pyfunction!(sign_aggregate, m)?)?;
    Ok(())
}
