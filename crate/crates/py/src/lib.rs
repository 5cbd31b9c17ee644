//! Python bindings for the `relu_landscape` crate.
//!
//! Matrices cross the boundary as lists of rows, reports as plain dicts.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use relu_landscape::basins::{self, DEFAULT_TOL};
use relu_landscape::cli::apply_overrides;
use relu_landscape::datasets::{self, ClusteredSpec, FullRankSpec, LowRankSpec, SingletonHardnessSpec};
use relu_landscape::init::{sample_two_layer, InitDistribution, InitKind};
use relu_landscape::montecarlo::run_bound_experiment;
use relu_landscape::nets::{objective, prediction_matrix_two_layer};
use relu_landscape::paths::{build_monotone_path, PathSpec};
use relu_landscape::rng::dataset_stream;
use relu_landscape::stats::{clopper_pearson_lower, clopper_pearson_upper};
use relu_landscape::{io, Error, LossKind, NetParams};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn loss_kind(name: &str) -> PyResult<LossKind> {
    LossKind::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown loss {name:?}")))
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{what} rows have different lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Serializes through JSON into Python objects.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Dataset", module = "relu_landscape_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: relu_landscape::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Scalar-target dataset from rows of `x` and targets `y`.
    #[new]
    fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<Self> {
        let inner = relu_landscape::Dataset::scalar(matrix(&x, "x")?, y).map_err(err)?;
        Ok(PyDataset { inner })
    }

    /// Dataset with class labels for cross-entropy loss.
    #[staticmethod]
    fn classification(x: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> PyResult<Self> {
        let targets = relu_landscape::Targets::Classes { labels, classes };
        let inner = relu_landscape::Dataset::new(matrix(&x, "x")?, targets).map_err(err)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: io::dataset_from_csv(text).map_err(err)? })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: io::read_dataset(path.as_ref()).map_err(err)? })
    }

    fn to_csv(&self) -> String {
        io::dataset_to_csv(&self.inner)
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        rows(self.inner.x())
    }

    /// Scalar targets, or `None` for other target kinds.
    #[getter]
    fn y(&self) -> Option<Vec<f64>> {
        self.inner.targets().as_scalar().map(|y| y.to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Dataset(m={}, d={})", self.inner.m(), self.inner.d())
    }
}

#[pyclass(name = "TwoLayerParams", module = "relu_landscape_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTwoLayer {
    inner: relu_landscape::TwoLayerParams,
}

#[pymethods]
impl PyTwoLayer {
    #[new]
    fn new(w: Vec<Vec<f64>>, v: Vec<f64>) -> PyResult<Self> {
        let inner = relu_landscape::TwoLayerParams::new(matrix(&w, "w")?, DVector::from_vec(v)).map_err(err)?;
        Ok(PyTwoLayer { inner })
    }

    /// Gaussian initialization with standard deviation `scale`.
    #[staticmethod]
    #[pyo3(signature = (n, d, seed, scale = 1.0))]
    fn gaussian(n: usize, d: usize, seed: u64, scale: f64) -> PyResult<Self> {
        let inner = sample_two_layer(&InitDistribution::gaussian(scale, seed), n, d, 0).map_err(err)?;
        Ok(PyTwoLayer { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        match io::params_from_json(text).map_err(err)? {
            NetParams::TwoLayer(inner) => Ok(PyTwoLayer { inner }),
            NetParams::Deep(_) => Err(PyValueError::new_err("expected two-layer parameters")),
        }
    }

    fn to_json(&self) -> String {
        io::params_to_json(&NetParams::TwoLayer(self.inner.clone()))
    }

    #[getter]
    fn w(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.w)
    }

    #[getter]
    fn v(&self) -> Vec<f64> {
        self.inner.v.iter().copied().collect()
    }

    fn predict(&self, data: &PyDataset) -> PyResult<Vec<f64>> {
        let p = prediction_matrix_two_layer(&self.inner, &data.inner).map_err(err)?;
        Ok(p.0.column(0).iter().copied().collect())
    }

    #[pyo3(signature = (data, loss = "squared"))]
    fn objective(&self, data: &PyDataset, loss: &str) -> PyResult<f64> {
        let p = prediction_matrix_two_layer(&self.inner, &data.inner).map_err(err)?;
        objective(loss_kind(loss)?, &p, data.inner.targets()).map_err(err)
    }

    fn sign_pattern(&self, data: &PyDataset) -> PyResult<PySignPattern> {
        let inner = basins::extract_sign_pattern(&self.inner, &data.inner).map_err(err)?;
        Ok(PySignPattern { inner })
    }

    fn __repr__(&self) -> String {
        format!("TwoLayerParams(n={}, d={})", self.inner.width(), self.inner.input_dim())
    }
}

#[pyclass(name = "SignPattern", module = "relu_landscape_py", eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PySignPattern {
    inner: basins::SignPattern,
}

#[pymethods]
impl PySignPattern {
    #[new]
    fn new(a: Vec<Vec<i8>>, b: Vec<i8>) -> PyResult<Self> {
        Ok(PySignPattern { inner: basins::SignPattern::new(a, b).map_err(err)? })
    }

    #[getter]
    fn a(&self) -> Vec<Vec<i8>> {
        self.inner.a_rows()
    }

    #[getter]
    fn b(&self) -> Vec<i8> {
        self.inner.b_vec().to_vec()
    }

    /// True when some pre-activation or output weight is exactly zero.
    #[getter]
    fn boundary(&self) -> bool {
        self.inner.boundary()
    }

    fn hash(&self) -> String {
        format!("{:016x}", self.inner.hash64())
    }

    fn restrict(&self, subset: Vec<usize>) -> PyResult<Self> {
        Ok(PySignPattern { inner: self.inner.restrict(&subset).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("SignPattern(n={}, m={}, hash={})", self.inner.n(), self.inner.m(), self.hash())
    }
}

/// Basin value of `pattern`; returns the solver report and the recovered
/// parameters.
#[pyfunction]
#[pyo3(signature = (pattern, data, loss = "squared", tol = DEFAULT_TOL))]
fn solve_basin_value<'py>(
    py: Python<'py>,
    pattern: &PySignPattern,
    data: &PyDataset,
    loss: &str,
    tol: f64,
) -> PyResult<(Bound<'py, PyAny>, PyTwoLayer)> {
    let r = basins::solve_basin_value(&pattern.inner, &data.inner, loss_kind(loss)?, tol).map_err(err)?;
    let params = PyTwoLayer { inner: r.params(&pattern.inner) };
    Ok((to_py(py, &r)?, params))
}

#[pyfunction]
#[pyo3(signature = (pattern, data, loss = "squared"))]
fn singleton_basin_oracle(pattern: &PySignPattern, data: &PyDataset, loss: &str) -> PyResult<f64> {
    basins::singleton_basin_oracle(&pattern.inner, &data.inner, loss_kind(loss)?).map_err(err)
}

#[pyfunction]
fn gen_singleton_hardness<'py>(py: Python<'py>, d: usize, eps: f64) -> PyResult<(PyDataset, Bound<'py, PyAny>)> {
    let spec = SingletonHardnessSpec { d, eps, loss: LossKind::Squared };
    let (inner, meta) = datasets::gen_singleton_hardness(&spec).map_err(err)?;
    Ok((PyDataset { inner }, to_py(py, &meta)?))
}

#[pyfunction]
fn gen_fullrank<'py>(py: Python<'py>, m: usize, d: usize, seed: u64) -> PyResult<(PyDataset, Bound<'py, PyAny>)> {
    let mut rng = dataset_stream(seed, "fullrank");
    let (inner, meta) = datasets::gen_fullrank(&FullRankSpec { m, d, targets: None }, &mut rng).map_err(err)?;
    Ok((PyDataset { inner }, to_py(py, &meta)?))
}

#[pyfunction]
#[pyo3(signature = (d, k, seed, points_per_cluster = 5, radius_fraction = 0.1, gamma = 1.0, min_center_norm = 1.0))]
#[allow(clippy::too_many_arguments)]
fn gen_clustered<'py>(
    py: Python<'py>,
    d: usize,
    k: usize,
    seed: u64,
    points_per_cluster: usize,
    radius_fraction: f64,
    gamma: f64,
    min_center_norm: f64,
) -> PyResult<(PyDataset, Bound<'py, PyAny>)> {
    let spec = ClusteredSpec {
        d,
        k,
        points_per_cluster,
        radius_fraction,
        gamma,
        min_center_norm,
        ..ClusteredSpec::default()
    };
    let mut rng = dataset_stream(seed, "clustered");
    let (inner, meta) = datasets::gen_clustered(&spec, &mut rng).map_err(err)?;
    Ok((PyDataset { inner }, to_py(py, &meta)?))
}

/// Realizable data and its teacher network.
#[pyfunction]
#[pyo3(signature = (d, m, rank, teacher_width, seed, b = 1.0))]
fn gen_lowrank_realizable<'py>(
    py: Python<'py>,
    d: usize,
    m: usize,
    rank: usize,
    teacher_width: usize,
    seed: u64,
    b: f64,
) -> PyResult<(PyDataset, PyTwoLayer, Bound<'py, PyAny>)> {
    let spec = LowRankSpec { d, m, rank, teacher_width, b };
    let mut rng = dataset_stream(seed, "lowrank");
    let (inner, teacher, meta) = datasets::gen_lowrank_realizable(&spec, &mut rng).map_err(err)?;
    Ok((PyDataset { inner }, PyTwoLayer { inner: teacher }, to_py(py, &meta)?))
}

/// Strictly decreasing path from `start` to `end`. The dict holds the
/// objective values along the path and the endpoint losses.
#[pyfunction]
#[pyo3(signature = (start, end, data, loss = "squared", grid = 1000, eps = 0.1))]
fn build_path<'py>(
    py: Python<'py>,
    start: &PyTwoLayer,
    end: &PyTwoLayer,
    data: &PyDataset,
    loss: &str,
    grid: usize,
    eps: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = PathSpec {
        grid,
        eps,
        ..PathSpec::straight(NetParams::TwoLayer(start.inner.clone()), NetParams::TwoLayer(end.inner.clone()))
    };
    let r = build_monotone_path(&spec, loss_kind(loss)?, &data.inner).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("objectives", r.objectives())?;
    out.set_item("monotone", r.monotone)?;
    out.set_item("max_violation", r.max_violation)?;
    out.set_item("l0", r.l0)?;
    out.set_item("l_zero", r.l_zero)?;
    out.set_item("l1", r.l1)?;
    out.set_item("final_scale", r.final_scale)?;
    Ok(out)
}

/// Monte Carlo check of one bound. `overrides` replaces fields of the
/// default experiment parameters.
#[pyfunction]
#[pyo3(signature = (bound, trials, seed = 0, workers = 0, overrides = None, init_scale = 1.0))]
fn run_bound<'py>(
    py: Python<'py>,
    bound: &str,
    trials: u64,
    seed: u64,
    workers: usize,
    overrides: Option<Bound<'py, PyDict>>,
    init_scale: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let over = match overrides {
        Some(d) => {
            let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
            serde_json::from_str(&text).map_err(|e| err(e.into()))?
        }
        None => serde_json::Value::Object(Default::default()),
    };
    let spec = apply_overrides(bound, over, "overrides").map_err(err)?;
    let init = InitKind::GaussianIid { scale: init_scale };
    let run = py
        .detach(|| run_bound_experiment(&spec, &init, trials, seed, workers))
        .map_err(err)?;
    to_py(py, &run.report)
}

#[pyfunction]
#[pyo3(signature = (successes, trials, confidence = 0.999))]
fn clopper_pearson(successes: u64, trials: u64, confidence: f64) -> PyResult<(f64, f64)> {
    if trials == 0 || successes > trials || !(0.0..1.0).contains(&confidence) {
        return Err(PyValueError::new_err("need 0 <= successes <= trials, trials > 0, confidence in [0, 1)"));
    }
    Ok((
        clopper_pearson_lower(successes, trials, confidence),
        clopper_pearson_upper(successes, trials, confidence),
    ))
}

#[pymodule]
fn relu_landscape_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTwoLayer>()?;
    m.add_class::<PySignPattern>()?;
    m.add_function(wrap_pyfunction!(solve_basin_value, m)?)?;
    m.add_function(wrap_pyfunction!(singleton_basin_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(gen_singleton_hardness, m)?)?;
    m.add_function(wrap_pyfunction!(gen_fullrank, m)?)?;
    m.add_function(wrap_pyfunction!(gen_clustered, m)?)?;
    m.add_function(wrap_pyfunction!(gen_lowrank_realizable, m)?)?;
    m.add_function(wrap_pyfunction!(build_path, m)?)?;
    m.add_function(wrap_pyfunction!(run_bound, m)?)?;
    m.add_function(wrap_pyfunction!(clopper_pearson, m)?)?;
    Ok(())
}
