//! Python bindings: the geometric primitives, the loss and sampler math, and
//! the whole command pipeline (generate/train/evaluate/gradcheck/ablate).
//!
//! Pipeline functions hand structured results back as JSON strings so Python
//! can `json.loads` them without a parallel class hierarchy.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use spherecal_core::benchgen::Split;
use spherecal_core::calibrator::{calibrate_with_params, AdaptationParams};
use spherecal_core::numerics::{self, DenseArray, NumericsError, UnitVector};
use spherecal_core::run::{
    self, AblateArgs, AblationChoice, EvalArgs, GenerateArgs, GradcheckArgs, Overrides, RunError,
    SamplingChoice, TrainArgs,
};
use spherecal_core::sampler;
use spherecal_core::trainer::model;

fn numerics_err(e: NumericsError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_err(e: RunError) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn unit(v: Vec<f64>, what: &str) -> PyResult<UnitVector> {
    UnitVector::normalize(&DenseArray::vector(v))
        .map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

/// L2-normalize a vector.
#[pyfunction]
fn normalize(v: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(unit(v, "v")?.as_array().data().to_vec())
}

/// Angle in radians between two vectors (normalized first).
#[pyfunction]
fn angle(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    Ok(numerics::angle(&unit(u, "u")?, &unit(v, "v")?))
}

/// Spherical interpolation from `u` toward `v` by weight `lam`; inputs are
/// normalized first and the result is unit-norm.
#[pyfunction]
fn slerp(u: Vec<f64>, v: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    Ok(numerics::slerp(&unit(u, "u")?, &unit(v, "v")?, lam)
        .as_array()
        .data()
        .to_vec())
}

/// Symmetric-free InfoNCE over aligned query/target rows with in-batch
/// negatives. Rows are normalized first.
#[pyfunction]
fn info_nce(queries: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    if queries.len() != targets.len() || queries.is_empty() {
        return Err(PyValueError::new_err(
            "queries and targets must be equally many and non-empty",
        ));
    }
    if tau <= 0.0 {
        return Err(PyValueError::new_err("tau must be positive"));
    }
    let qs: Vec<UnitVector> = queries
        .into_iter()
        .map(|q| unit(q, "query"))
        .collect::<PyResult<_>>()?;
    let ts: Vec<UnitVector> = targets
        .into_iter()
        .map(|t| unit(t, "target"))
        .collect::<PyResult<_>>()?;
    Ok(model::info_nce(&qs, &ts, tau))
}

/// Output of one calibration: the moved query plus the diagnostics the
/// trainer logs.
#[pyclass]
struct CalibrationResult {
    #[pyo3(get)]
    q: Vec<f64>,
    #[pyo3(get)]
    q_p: Vec<f64>,
    #[pyo3(get)]
    omega: f64,
    #[pyo3(get)]
    lam: f64,
    #[pyo3(get)]
    ortho_loss: f64,
    #[pyo3(get)]
    reg_loss: f64,
}

/// Calibrate a query against explicit adapter matrices: the proposal is
/// `normalize(q0 + (q0·A)·B)` and the result walks the great circle from
/// `q0` toward it by `lam`. `a` is row-major `[d, rank]`, `b` row-major
/// `[rank, d]`.
#[pyfunction]
fn calibrate(
    q0: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    rank: usize,
    lam: f64,
) -> PyResult<CalibrationResult> {
    let d = q0.len();
    if rank == 0 || a.len() != d * rank || b.len() != rank * d {
        return Err(PyValueError::new_err(format!(
            "adapter shapes must be [{d}, {rank}] and [{rank}, {d}]"
        )));
    }
    let q0 = unit(q0, "q0")?;
    let a = DenseArray::matrix(d, rank, a).map_err(numerics_err)?;
    let b = DenseArray::matrix(rank, d, b).map_err(numerics_err)?;
    let params = AdaptationParams::new(a, b, lam).map_err(numerics_err)?;
    let out = calibrate_with_params(&q0, &params).map_err(numerics_err)?;
    Ok(CalibrationResult {
        q: out.q.as_array().data().to_vec(),
        q_p: out.q_p.as_array().data().to_vec(),
        omega: out.omega,
        lam: out.lambda,
        ortho_loss: out.ortho_loss,
        reg_loss: out.reg_loss,
    })
}

/// Task-sampling distribution from smoothed difficulties and dataset sizes:
/// scores `exp(G_k/eta + gamma*ln N_k)` with an epsilon probability floor.
#[pyfunction]
fn sampling_probabilities(
    difficulties: Vec<f64>,
    sizes: Vec<usize>,
    eta: f64,
    gamma: f64,
    epsilon: f64,
) -> PyResult<Vec<f64>> {
    if difficulties.len() != sizes.len() || difficulties.is_empty() {
        return Err(PyValueError::new_err(
            "difficulties and sizes must be equally many and non-empty",
        ));
    }
    if eta <= 0.0 {
        return Err(PyValueError::new_err("eta must be positive"));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(PyValueError::new_err("sizes must be positive"));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(PyValueError::new_err("epsilon must lie in [0, 1)"));
    }
    let scores = sampler::sampling_scores(&difficulties, &sizes, eta, gamma)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(sampler::probabilities(&scores, epsilon, 0).p)
}

/// One difficulty-EMA step: `alpha*g_prev + (1-alpha)*d`.
#[pyfunction]
fn update_ema(g_prev: f64, d: f64, alpha: f64) -> f64 {
    sampler::update_ema(g_prev, d, alpha)
}

fn sampling_choice(s: &str) -> PyResult<SamplingChoice> {
    match s {
        "random" => Ok(SamplingChoice::Random),
        "ggas" => Ok(SamplingChoice::Ggas),
        "ggas-nosize" => Ok(SamplingChoice::GgasNosize),
        other => Err(PyValueError::new_err(format!(
            "unknown sampling '{other}' (random, ggas, ggas-nosize)"
        ))),
    }
}

fn ablation_choice(s: &str) -> PyResult<AblationChoice> {
    match s {
        "none" => Ok(AblationChoice::None),
        "ggas-only" => Ok(AblationChoice::GgasOnly),
        "proposal_only" => Ok(AblationChoice::ProposalOnly),
        "linear" => Ok(AblationChoice::Linear),
        "slerp" => Ok(AblationChoice::Slerp),
        "shared" => Ok(AblationChoice::Shared),
        other => Err(PyValueError::new_err(format!(
            "unknown ablation '{other}' (none, ggas-only, proposal_only, linear, slerp, shared)"
        ))),
    }
}

fn split_choice(s: &str) -> PyResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!(
            "unknown split '{other}' (train, val, test)"
        ))),
    }
}

/// Generate a benchmark from a spec file or a named preset
/// ("multitask-mini" or "lambda-scale"). Returns the benchmark JSONL path.
#[pyfunction]
#[pyo3(signature = (out, spec_path=None, preset=None, seed=None))]
fn generate(
    out: String,
    spec_path: Option<String>,
    preset: Option<String>,
    seed: Option<u64>,
) -> PyResult<String> {
    let outcome = run::cmd_generate(&GenerateArgs {
        config: spec_path.map(PathBuf::from),
        preset,
        seed,
        out: Some(PathBuf::from(out)),
    })
    .map_err(run_err)?;
    Ok(outcome.benchmark_path.display().to_string())
}

/// Train per a run-config TOML; returns the final test metrics as JSON.
#[pyfunction]
#[pyo3(signature = (config, out=None, seed=None, sampling=None, ablation=None, resume=None))]
fn train(
    config: String,
    out: Option<String>,
    seed: Option<u64>,
    sampling: Option<String>,
    ablation: Option<String>,
    resume: Option<String>,
) -> PyResult<String> {
    let overrides = Overrides {
        seed,
        out: out.map(PathBuf::from),
        sampling: sampling.as_deref().map(sampling_choice).transpose()?,
        ablation: ablation.as_deref().map(ablation_choice).transpose()?,
        ..Overrides::default()
    };
    let summary = run::cmd_train(&TrainArgs {
        config: Some(PathBuf::from(config)),
        resume: resume.map(PathBuf::from),
        overrides,
    })
    .map_err(run_err)?;
    Ok(summary.final_metrics.to_json())
}

/// Evaluate a checkpoint on a benchmark split; returns the metrics as JSON.
#[pyfunction]
#[pyo3(signature = (checkpoint, benchmark, split="test", out=None))]
fn evaluate(
    checkpoint: String,
    benchmark: String,
    split: &str,
    out: Option<String>,
) -> PyResult<String> {
    let summary = run::cmd_eval(&EvalArgs {
        checkpoint: PathBuf::from(checkpoint),
        benchmark: PathBuf::from(benchmark),
        split: split_choice(split)?,
        out: out.map(PathBuf::from),
    })
    .map_err(run_err)?;
    Ok(summary.metrics.to_json())
}

/// Compare analytic gradients of every operation against central finite
/// differences; returns the per-op report as JSON.
#[pyfunction]
#[pyo3(signature = (corrupt_op=None))]
fn gradcheck(corrupt_op: Option<String>) -> PyResult<String> {
    let report = run::cmd_gradcheck(&GradcheckArgs {
        corrupt_op,
        out: None,
    })
    .map_err(run_err)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Train the full ablation grid; returns the consolidated CSV path.
#[pyfunction]
#[pyo3(signature = (config=None, out=None, seed=None))]
fn ablate(config: Option<String>, out: Option<String>, seed: Option<u64>) -> PyResult<String> {
    let summary = run::cmd_ablate(&AblateArgs {
        config: config.map(PathBuf::from),
        overrides: Overrides {
            seed,
            out: out.map(PathBuf::from),
            ..Overrides::default()
        },
    })
    .map_err(run_err)?;
    Ok(summary.csv_path.display().to_string())
}

/// Render the artifacts in a run directory as text.
#[pyfunction]
fn report(dir: String) -> PyResult<String> {
    run::cmd_report(&run::ReportArgs {
        dir: PathBuf::from(dir),
    })
    .map_err(run_err)
}

#[pymodule]
fn spherecal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<CalibrationResult>()?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(angle, m)?)?;
    m.add_function(wrap_pyfunction!(slerp, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(sampling_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(update_ema, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
