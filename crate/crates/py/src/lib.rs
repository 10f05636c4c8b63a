//! Python bindings: parameters, threshold oracles, single tampering runs and
//! whole experiments. Structured results cross the boundary as plain dicts.

use std::sync::Arc;

use mucio::harness::{run_experiment as run_config, ExperimentConfig};
use mucio::pexp::{oracle_sample_counts, MonteCarloOracle, OracleBudget, Sizing, ThresholdOracle as CoreThreshold};
use mucio::space::{hamming as core_hamming, weighted_hamming as core_weighted_hamming};
use mucio::stats::wilson as core_wilson;
use mucio::tamper::{average_case_params, run_tampering, worst_case_params, TamperMode, TamperParams as CoreParams};
use mucio::{RandomProcess, RngStream, Value, WeightVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: mucio::Error) -> PyErr {
    match e {
        mucio::Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn values(xs: &[f64]) -> Vec<Value> {
    xs.iter().map(|x| Value(*x)).collect()
}

fn parse_mode(mode: &str) -> PyResult<TamperMode> {
    match mode {
        "additive" => Ok(TamperMode::Additive),
        "mucio" | "multiplicative" => Ok(TamperMode::Multiplicative),
        "mucio-abort" | "multiplicative-abort" => Ok(TamperMode::MultiplicativeAbort),
        other => Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    }
}

fn parse_sizing(sizing: &str) -> PyResult<Sizing> {
    match sizing {
        "conservative" => Ok(Sizing::Conservative),
        "hoeffding" => Ok(Sizing::Hoeffding),
        other => Err(PyValueError::new_err(format!("unknown sizing {other:?}"))),
    }
}

/// Tampering parameters.
#[pyclass(module = "pymucio", from_py_object)]
#[derive(Clone)]
struct TamperParams {
    inner: CoreParams,
}

#[pymethods]
impl TamperParams {
    /// Average-case parameters for `n` blocks.
    #[staticmethod]
    fn average_case(n: usize, epsilon: f64, delta: f64) -> PyResult<Self> {
        Ok(Self {
            inner: average_case_params(n, epsilon, delta).map_err(err)?,
        })
    }

    /// Worst-case parameters with a hard budget cap.
    #[staticmethod]
    fn worst_case(n: usize, epsilon: f64, delta: f64) -> PyResult<Self> {
        Ok(Self {
            inner: worst_case_params(n, epsilon, delta).map_err(err)?,
        })
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn k_cap(&self) -> Option<f64> {
        self.inner.k_cap
    }

    #[getter]
    fn mode(&self) -> String {
        serde_json::to_value(self.inner.mode)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }

    /// Copy with another mode: `additive`, `mucio` or `mucio-abort`.
    fn with_mode(&self, mode: &str) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.clone().with_mode(parse_mode(mode)?),
        })
    }

    fn with_cap(&self, cap: Option<f64>) -> Self {
        Self {
            inner: self.inner.clone().with_cap(cap),
        }
    }

    fn with_lambda(&self, lambda_: f64) -> Self {
        Self {
            inner: self.inner.clone().with_lambda(lambda_),
        }
    }

    fn with_alpha(&self, alpha: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.clone().with_alpha(WeightVector::new(alpha).map_err(err)?),
        })
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "TamperParams(lambda={:.4}, tau={:.4}, gamma={:.3e}, k_cap={:?}, mode={})",
            self.inner.lambda,
            self.inner.tau,
            self.inner.gamma,
            self.inner.k_cap,
            self.mode()
        )
    }
}

/// Exact partial expectations of `{Σwᵢxᵢ ≥ t}` over independent bits.
#[pyclass(module = "pymucio")]
struct ThresholdOracle {
    inner: CoreThreshold,
    bias: Vec<f64>,
}

#[pymethods]
impl ThresholdOracle {
    /// `bias[i]` is `Pr[xᵢ = 1]`; defaults to fair bits.
    #[new]
    #[pyo3(signature = (weights, threshold, bias=None))]
    fn new(weights: Vec<f64>, threshold: f64, bias: Option<Vec<f64>>) -> PyResult<Self> {
        let bias = bias.unwrap_or_else(|| vec![0.5; weights.len()]);
        Ok(Self {
            inner: CoreThreshold::new(weights, bias.clone(), threshold).map_err(err)?,
            bias,
        })
    }

    /// Majority-style set `{Σxᵢ ≥ t}` over `n` fair bits.
    #[staticmethod]
    fn fair_majority(n: usize, threshold: f64) -> Self {
        Self {
            inner: CoreThreshold::fair_majority(n, threshold),
            bias: vec![0.5; n],
        }
    }

    /// `Pr[x ∈ S | prefix]`.
    #[pyo3(signature = (prefix=Vec::new()))]
    fn probability(&self, prefix: Vec<f64>) -> f64 {
        self.inner.probability(&values(&prefix))
    }

    fn contains(&self, x: Vec<f64>) -> bool {
        self.inner.membership().test(&values(&x))
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn bias(&self) -> Vec<f64> {
        self.bias.clone()
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold()
    }

    /// One tampering run against this set; returns the transcript as a dict.
    ///
    /// `oracle` is `threshold` (exact) or `mc` with `m_eval`/`m_max`.
    #[pyo3(signature = (params, seed, oracle="threshold", m_eval=None, m_max=2))]
    fn tamper<'py>(
        &self,
        py: Python<'py>,
        params: &TamperParams,
        seed: u64,
        oracle: &str,
        m_eval: Option<usize>,
        m_max: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let process: Arc<dyn RandomProcess> = Arc::new(self.inner.process());
        let f = self.inner.membership();
        let rng = RngStream::new(seed);
        let t = match oracle {
            "threshold" => py.detach(|| run_tampering(process.as_ref(), &f, &self.inner, &params.inner, &rng, None)),
            "mc" => {
                let m = m_eval.ok_or_else(|| PyValueError::new_err("mc oracle needs m_eval"))?;
                let mc = MonteCarloOracle::new(Arc::clone(&process), OracleBudget::new(m, m_max).map_err(err)?);
                py.detach(|| run_tampering(process.as_ref(), &f, &mc, &params.inner, &rng, None))
            }
            other => return Err(PyValueError::new_err(format!("unknown oracle {other:?}"))),
        }
        .map_err(err)?;
        to_py(py, &t)
    }

    fn __repr__(&self) -> String {
        format!("ThresholdOracle(n={}, threshold={})", self.inner.weights().len(), self.inner.threshold())
    }
}

/// Runs an experiment from its JSON config; returns `(records, summary)`.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config: &str) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let cfg = ExperimentConfig::from_json(config).map_err(err)?;
    let result = py.detach(|| run_config(&cfg)).map_err(err)?;
    Ok((to_py(py, &result.records)?, to_py(py, &result.summary)?))
}

/// `(m_eval, m_max)` for the given accuracy, abort depth and root estimate.
#[pyfunction]
#[pyo3(signature = (gamma, tau, eps_root, sizing="conservative"))]
fn sample_counts(gamma: f64, tau: f64, eps_root: f64, sizing: &str) -> PyResult<(usize, usize)> {
    let b = oracle_sample_counts(gamma, tau, eps_root, parse_sizing(sizing)?).map_err(err)?;
    Ok((b.m_eval, b.m_max))
}

/// `(rate, lo, hi)` with a Wilson 95% interval.
#[pyfunction]
fn wilson(successes: usize, trials: usize) -> PyResult<(f64, f64, f64)> {
    if trials == 0 || successes > trials {
        return Err(PyValueError::new_err("need 0 <= successes <= trials and trials >= 1"));
    }
    let r = core_wilson(successes, trials);
    Ok((r.rate, r.lo, r.hi))
}

#[pyfunction]
fn hamming(u: Vec<f64>, v: Vec<f64>) -> PyResult<usize> {
    if u.len() != v.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    Ok(core_hamming(&values(&u), &values(&v)))
}

#[pyfunction]
fn weighted_hamming(u: Vec<f64>, v: Vec<f64>, alpha: Vec<f64>) -> PyResult<f64> {
    let alpha = WeightVector::new(alpha).map_err(err)?;
    core_weighted_hamming(&values(&u), &values(&v), &alpha).map_err(err)
}

#[pymodule]
pub fn pymucio(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TamperParams>()?;
    m.add_class::<ThresholdOracle>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(sample_counts, m)?)?;
    m.add_function(wrap_pyfunction!(wilson, m)?)?;
    m.add_function(wrap_pyfunction!(hamming, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_hamming, m)?)?;
    Ok(())
}
