//! Python bindings. Coordinates are 0-based here, as in the Rust API; dataset
//! files keep their 1-based labels.

use std::path::PathBuf;

use multiway::estimators::{MeanEstimator, OlsEstimator, QuantileEstimator, RatioEstimator};
use multiway::gmm::{gmm_fit_with, MomentSpec, WeightChoice};
use multiway::io::{read_sample, write_sample};
use multiway::nalgebra::DMatrix;
use multiway::simulation::{self, McConfig};
use multiway::{
    load_sample, ols_sandwich, percentile_ci, run_bootstrap, symmetric_abs_ci, variance, wald_region, Adjustment,
    CellSums, CenteredScores, ClusteredSample, DgpSpec, Dimensions, EcdfSpec, Error, EstimateResult, FnStatistic,
    LinearModelSpec, OptimizerConfig, PigeonholeWeights, ThetaBox, VarianceEstimate, VarianceKind,
};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(pymultiway, MultiwayError, PyException);
create_exception!(pymultiway, DegenerateDesignError, MultiwayError);
create_exception!(pymultiway, SingularVarianceError, MultiwayError);
create_exception!(pymultiway, ConvergenceError, MultiwayError);
create_exception!(pymultiway, InsufficientReplicatesError, MultiwayError);
create_exception!(pymultiway, ParseError, MultiwayError);
create_exception!(pymultiway, ConfigError, MultiwayError);

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::DegenerateDesign { .. } => DegenerateDesignError::new_err(msg),
        Error::SingularVariance(_) | Error::SingularDesign(_) => SingularVarianceError::new_err(msg),
        Error::Convergence { .. } => ConvergenceError::new_err(msg),
        Error::InsufficientReplicates { .. } => InsufficientReplicatesError::new_err(msg),
        Error::Parse { .. } => ParseError::new_err(msg),
        Error::Config { .. } => ConfigError::new_err(msg),
        Error::Io(io) => PyErr::from(io),
        _ => MultiwayError::new_err(msg),
    }
}

type PyRes<T> = PyResult<T>;

trait OrPy<T> {
    fn py(self) -> PyRes<T>;
}

impl<T> OrPy<T> for multiway::Result<T> {
    fn py(self) -> PyRes<T> {
        self.map_err(py_err)
    }
}

/// Converts a serializable value to plain Python objects through JSON.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyRes<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| MultiwayError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Reads a dict (or JSON string) into `T`.
fn from_py<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyRes<T> {
    let text: String = match obj.extract::<String>() {
        Ok(s) => s,
        Err(_) => py.import("json")?.call_method1("dumps", (obj,))?.extract()?,
    };
    serde_json::from_str(&text).map_err(|e| ConfigError::new_err(e.to_string()))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

/// A sample on a `C_1 × … × C_k` design.
#[pyclass(module = "pymultiway", frozen)]
pub struct Sample {
    inner: ClusteredSample,
}

#[pymethods]
impl Sample {
    /// `records` is a list of `(cell, y)` pairs with 0-based cell coordinates.
    #[new]
    fn new(dims: Vec<usize>, records: Vec<(Vec<usize>, Vec<f64>)>) -> PyRes<Self> {
        let dims = Dimensions::new(dims).py()?;
        Ok(Self {
            inner: load_sample(&records, &dims).py()?,
        })
    }

    /// Reads a CSV or JSON dataset; `dims` defaults to the largest labels.
    #[staticmethod]
    #[pyo3(signature = (path, dims=None))]
    fn read(path: PathBuf, dims: Option<Vec<usize>>) -> PyRes<Self> {
        let dims = dims.map(Dimensions::new).transpose().py()?;
        Ok(Self {
            inner: read_sample(&path, dims.as_ref()).py()?,
        })
    }

    fn write(&self, path: PathBuf) -> PyRes<()> {
        write_sample(&path, &self.inner).py()
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims().counts().to_vec()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    #[getter]
    fn total_units(&self) -> usize {
        self.inner.total_units()
    }

    fn cell_sizes(&self) -> Vec<usize> {
        self.inner.cell_sizes()
    }

    /// `(cell, y)` for every unit, cells in lexicographic order.
    fn records(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        self.inner
            .units()
            .map(|(lin, y)| (self.inner.dims().coords(lin).0, y.to_vec()))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Sample(dims={:?}, units={})", self.dims(), self.total_units())
    }
}

/// A point estimate with the per-cell scores behind its variance estimators.
#[pyclass(module = "pymultiway", frozen)]
pub struct Estimate {
    result: EstimateResult,
    dims: Dimensions,
    ols: bool,
}

impl Estimate {
    fn estimate(&self, kind: &str, adjustment: &str) -> PyRes<VarianceEstimate> {
        let kind: VarianceKind = kind.parse().py()?;
        let adj: Adjustment = adjustment.parse().py()?;
        if self.ols {
            return ols_sandwich(&self.result, kind, adj).py();
        }
        let scores = self
            .result
            .scores
            .as_ref()
            .ok_or_else(|| MultiwayError::new_err("no variance estimator for this estimate; use bootstrap"))?;
        variance(scores, kind, adj).py()
    }
}

#[pymethods]
impl Estimate {
    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.result.theta.clone()
    }

    #[getter]
    fn estimator(&self) -> String {
        self.result.meta.estimator.clone()
    }

    /// Asymptotic variance `V̂` (kind `v1`, `v2` or `cgm`); standard errors are `sqrt(diag / min C_i)`.
    #[pyo3(signature = (kind="v1", adjustment="unit"))]
    fn variance(&self, kind: &str, adjustment: &str) -> PyRes<Vec<Vec<f64>>> {
        Ok(rows(&self.estimate(kind, adjustment)?.matrix))
    }

    #[pyo3(signature = (kind="v1", adjustment="unit"))]
    fn std_errors(&self, kind: &str, adjustment: &str) -> PyRes<Vec<f64>> {
        let v = self.estimate(kind, adjustment)?;
        let c = self.dims.c_min() as f64;
        Ok((0..v.dim()).map(|r| (v.matrix[(r, r)] / c).sqrt()).collect())
    }

    /// Wald region as a dict with the ellipsoid and per-coordinate intervals.
    #[pyo3(signature = (kind="v1", adjustment="unit", alpha=0.05))]
    fn wald<'py>(&self, py: Python<'py>, kind: &str, adjustment: &str, alpha: f64) -> PyRes<Bound<'py, PyAny>> {
        let v = self.estimate(kind, adjustment)?;
        to_py(py, &wald_region(&self.result.theta, &v, &self.dims, alpha).py()?)
    }

    fn __repr__(&self) -> String {
        format!(
            "Estimate(estimator={:?}, theta={:?})",
            self.result.meta.estimator, self.result.theta
        )
    }
}

fn select_columns(sample: &ClusteredSample, columns: Option<Vec<usize>>) -> PyRes<Vec<usize>> {
    let cols = columns.unwrap_or_else(|| (0..sample.obs_dim()).collect());
    if let Some(&c) = cols.iter().find(|&&c| c >= sample.obs_dim()) {
        return Err(MultiwayError::new_err(format!("column {c} out of range")));
    }
    Ok(cols)
}

fn column_stat(cols: Vec<usize>) -> FnStatistic<impl Fn(&[f64], usize) -> Vec<f64> + Send + Sync> {
    let n = cols.len();
    FnStatistic::new(n, move |y: &[f64], _| cols.iter().map(|&c| y[c]).collect())
}

enum Prepared {
    Mean(MeanEstimator),
    Ratio(RatioEstimator),
    Ols(OlsEstimator),
    Quantile(QuantileEstimator),
}

impl Prepared {
    fn fit(&self) -> multiway::Result<EstimateResult> {
        match self {
            Prepared::Mean(e) => Ok(e.fit()),
            Prepared::Ratio(e) => e.fit(),
            Prepared::Ols(e) => e.fit(),
            Prepared::Quantile(e) => e.fit(),
        }
    }

    fn reestimate(&self, w: &PigeonholeWeights) -> multiway::Result<Vec<f64>> {
        match self {
            Prepared::Mean(e) => e.reestimate(w),
            Prepared::Ratio(e) => e.reestimate(w),
            Prepared::Ols(e) => e.reestimate(w),
            Prepared::Quantile(e) => e.reestimate(w),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn prepare(
    sample: &ClusteredSample,
    estimator: &str,
    columns: Option<Vec<usize>>,
    outcome: Option<usize>,
    regressors: Option<Vec<usize>>,
    intercept: bool,
    tau: f64,
) -> PyRes<Prepared> {
    Ok(match estimator {
        "mean" => Prepared::Mean(MeanEstimator::new(sample, &column_stat(select_columns(sample, columns)?)).py()?),
        "ratio" => Prepared::Ratio(RatioEstimator::new(sample, &column_stat(select_columns(sample, columns)?)).py()?),
        "ols" => {
            let spec = LinearModelSpec {
                outcome_index: outcome.ok_or_else(|| MultiwayError::new_err("ols needs outcome"))?,
                regressor_indices: regressors.unwrap_or_default(),
                intercept,
            };
            Prepared::Ols(OlsEstimator::new(sample, &spec).py()?)
        }
        "quantile" => {
            let spec = EcdfSpec {
                coordinates: select_columns(sample, columns)?,
                grid: None,
            };
            Prepared::Quantile(QuantileEstimator::new(sample, &spec, tau).py()?)
        }
        other => return Err(MultiwayError::new_err(format!("unknown estimator `{other}`"))),
    })
}

/// Fits `mean`, `ratio`, `ols` or `quantile`.
#[pyfunction]
#[pyo3(signature = (sample, estimator="mean", columns=None, outcome=None, regressors=None, intercept=true, tau=0.5))]
#[allow(clippy::too_many_arguments)]
fn estimate(
    py: Python<'_>,
    sample: &Sample,
    estimator: &str,
    columns: Option<Vec<usize>>,
    outcome: Option<usize>,
    regressors: Option<Vec<usize>>,
    intercept: bool,
    tau: f64,
) -> PyRes<Estimate> {
    let prepared = prepare(&sample.inner, estimator, columns, outcome, regressors, intercept, tau)?;
    let result = py.detach(|| prepared.fit()).py()?;
    Ok(Estimate {
        result,
        dims: sample.inner.dims().clone(),
        ols: estimator == "ols",
    })
}

/// Pigeonhole bootstrap; returns replicates, both confidence regions and standard errors.
#[pyfunction]
#[pyo3(signature = (sample, b, estimator="mean", seed=0, alpha=0.05, columns=None, outcome=None, regressors=None, intercept=true, tau=0.5))]
#[allow(clippy::too_many_arguments)]
fn bootstrap<'py>(
    py: Python<'py>,
    sample: &Sample,
    b: usize,
    estimator: &str,
    seed: u64,
    alpha: f64,
    columns: Option<Vec<usize>>,
    outcome: Option<usize>,
    regressors: Option<Vec<usize>>,
    intercept: bool,
    tau: f64,
) -> PyRes<Bound<'py, PyAny>> {
    let prepared = prepare(&sample.inner, estimator, columns, outcome, regressors, intercept, tau)?;
    let dims = sample.inner.dims().clone();
    let reps = py
        .detach(|| {
            let theta = prepared.fit()?.theta;
            run_bootstrap(|w| prepared.reestimate(w), &dims, theta, b, seed)
        })
        .py()?;
    let out = PyDict::new(py);
    out.set_item("theta_hat", reps.theta_hat.clone())?;
    out.set_item("replicates", reps.thetas.clone())?;
    out.set_item("failed", reps.failed.clone())?;
    out.set_item("std_errors", reps.std_errors())?;
    out.set_item("symmetric_abs", to_py(py, &symmetric_abs_ci(&reps, alpha).py()?)?)?;
    let pct = match percentile_ci(&reps, alpha) {
        Ok(iv) => to_py(py, &iv)?,
        Err(Error::InsufficientReplicates { .. }) => py.None().into_bound(py),
        Err(e) => return Err(py_err(e)),
    };
    out.set_item("percentile", pct)?;
    Ok(out.into_any())
}

/// Variance estimate from explicit per-cell scores, given in lexicographic cell order.
#[pyfunction]
#[pyo3(signature = (dims, scores, kind="v1", adjustment="unit"))]
fn variance_from_scores(dims: Vec<usize>, scores: Vec<Vec<f64>>, kind: &str, adjustment: &str) -> PyRes<Vec<Vec<f64>>> {
    let dims = Dimensions::new(dims).py()?;
    let m = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|s| s.len() != m) {
        return Err(MultiwayError::new_err("scores must all have the same length"));
    }
    let sums = CellSums::new(dims, m, scores.concat()).py()?;
    let v = variance(&CenteredScores::new(sums), kind.parse().py()?, adjustment.parse().py()?).py()?;
    Ok(rows(&v.matrix))
}

/// Draws a sample from a design dict such as `{"variant": "additive_effects", "sigma": [1, 1]}`.
/// Returns the sample and the truth dict.
#[pyfunction]
#[pyo3(signature = (dgp, dims, seed=0))]
fn simulate<'py>(
    py: Python<'py>,
    dgp: &Bound<'py, PyAny>,
    dims: Vec<usize>,
    seed: u64,
) -> PyRes<(Sample, Bound<'py, PyAny>)> {
    let dgp: DgpSpec = from_py(py, dgp)?;
    let dims = Dimensions::new(dims).py()?;
    let (inner, truth) = py.detach(|| simulation::generate(&dgp, &dims, seed)).py()?;
    Ok((Sample { inner }, to_py(py, &truth)?))
}

/// Fits a built-in moment model (a dict tagged by `family`, 0-based columns).
#[pyfunction]
#[pyo3(signature = (sample, model, lower, upper, weight="identity", optimizer=None))]
fn gmm<'py>(
    py: Python<'py>,
    sample: &Sample,
    model: &Bound<'py, PyAny>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    weight: &str,
    optimizer: Option<&Bound<'py, PyAny>>,
) -> PyRes<Bound<'py, PyAny>> {
    let spec: MomentSpec = from_py(py, model)?;
    let weight: WeightChoice = serde_json::from_value(serde_json::Value::String(weight.into()))
        .map_err(|e| ConfigError::new_err(e.to_string()))?;
    let config: OptimizerConfig = match optimizer {
        Some(o) => from_py(py, o)?,
        None => OptimizerConfig::default(),
    };
    let model = spec.build(ThetaBox::new(lower, upper).py()?).py()?;
    let fit = py
        .detach(|| gmm_fit_with(&sample.inner, &model, weight, &config))
        .py()?;
    to_py(py, &fit)
}

/// Runs a Monte Carlo coverage experiment from a config dict and returns the report.
#[pyfunction]
fn run_coverage<'py>(py: Python<'py>, config: &Bound<'py, PyAny>) -> PyRes<Bound<'py, PyAny>> {
    let config: McConfig = from_py(py, config)?;
    let report = py.detach(|| multiway::run_coverage(&config)).py()?;
    to_py(py, &report)
}

#[pymodule]
fn pymultiway(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add_class::<Sample>()?;
    m.add_class::<Estimate>()?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap, m)?)?;
    m.add_function(wrap_pyfunction!(variance_from_scores, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(gmm, m)?)?;
    m.add_function(wrap_pyfunction!(run_coverage, m)?)?;
    m.add("MultiwayError", py.get_type::<MultiwayError>())?;
    m.add("DegenerateDesignError", py.get_type::<DegenerateDesignError>())?;
    m.add("SingularVarianceError", py.get_type::<SingularVarianceError>())?;
    m.add("ConvergenceError", py.get_type::<ConvergenceError>())?;
    m.add(
        "InsufficientReplicatesError",
        py.get_type::<InsufficientReplicatesError>(),
    )?;
    m.add("ParseError", py.get_type::<ParseError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    Ok(())
}
