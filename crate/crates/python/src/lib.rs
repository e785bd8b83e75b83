//! Python bindings. Configs, estimates and summaries cross the boundary as
//! JSON strings in the same format the CLI reads and writes.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use latent_bandit::harness::{self, ExperimentConfig};
use latent_bandit::offline::SubspaceEstimate;
use latent_bandit::online::PolicyId;
use latent_bandit::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn config(json: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_json(json).map_err(to_py)
}

fn estimate(json: &str) -> PyResult<SubspaceEstimate> {
    serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Run the offline phase and return the subspace estimate as JSON.
#[pyfunction]
fn offline(config_json: &str) -> PyResult<String> {
    let cfg = config(config_json)?;
    let world = harness::build_world(&cfg).map_err(to_py)?;
    json(&harness::run_offline_phase(&cfg, &world).map_err(to_py)?)
}

/// Projector distance between an estimate and the configured world's true subspace.
#[pyfunction]
fn subspace_error(config_json: &str, estimate_json: &str) -> PyResult<f64> {
    let cfg = config(config_json)?;
    let world = harness::build_world(&cfg).map_err(to_py)?;
    Ok(harness::subspace_error(&estimate(estimate_json)?, &world.env().true_subspace()))
}

/// One online trial. Returns `(t, arm, branch, inst_regret, cum_regret, kappa)` rows.
#[pyfunction]
#[pyo3(signature = (config_json, policy, trial=0, estimate_json=None))]
fn run_trial(
    py: Python<'_>,
    config_json: &str,
    policy: &str,
    trial: usize,
    estimate_json: Option<&str>,
) -> PyResult<Vec<(usize, usize, &'static str, f64, f64, f64)>> {
    let cfg = config(config_json)?;
    let policy: PolicyId = policy.parse().map_err(to_py)?;
    let est = estimate_json.map(estimate).transpose()?;
    let log = py
        .detach(|| {
            let world = harness::build_world(&cfg)?;
            let est = match est {
                Some(e) => e,
                None => harness::resolve_estimate(&cfg, &world)?,
            };
            harness::run_online_trial(&cfg, &world, Some(&est), policy, trial)
        })
        .map_err(to_py)?;
    Ok(log
        .rows
        .into_iter()
        .map(|r| (r.t, r.arm, r.branch.as_str(), r.inst_regret, r.cum_regret, r.kappa))
        .collect())
}

/// Full suite; returns the summary (per-policy mean and standard error curves) as JSON.
#[pyfunction]
fn run_suite(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = config(config_json)?;
    let out = py.detach(|| harness::run_suite(&cfg)).map_err(to_py)?;
    json(&out.summary)
}

#[pyfunction]
fn policies() -> Vec<&'static str> {
    PolicyId::ALL.iter().map(|p| p.as_str()).collect()
}

#[pymodule]
fn latent_bandit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(offline, m)?)?;
    m.add_function(wrap_pyfunction!(subspace_error, m)?)?;
    m.add_function(wrap_pyfunction!(run_trial, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(policies, m)?)?;
    Ok(())
}
