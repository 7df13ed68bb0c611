//! Python bindings. Matrices cross the boundary as lists of row lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use scaledsgd::audit::{self, AuditConfig};
use scaledsgd::datagen::{self, Spectrum};
use scaledsgd::eval::{self, Trace};
use scaledsgd::experiments::{self, Algo, AlgoRun, CfSource, CfSpec, EdmSpec, SynthSpec};
use scaledsgd::kernel::{self, SmallSymMatrix};
use scaledsgd::loss::{self, ElementSample, LossKind, Sample, StepMode, TripleSample};
use scaledsgd::matrix::{DenseMatrix, FactorMatrix};
use scaledsgd::model;
use scaledsgd::{ingest, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Rows = Vec<Vec<f64>>;

fn factor(rows: &Rows) -> PyResult<FactorMatrix> {
    FactorMatrix::from_rows(rows).map_err(py_err)
}

fn dense(rows: &Rows) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(rows).map_err(py_err)
}

fn sym(rows: &Rows) -> PyResult<SmallSymMatrix> {
    let n = rows.len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    SmallSymMatrix::from_row_major(n, &flat).map_err(py_err)
}

fn check_len(p: &SmallSymMatrix, u: &[f64]) -> PyResult<()> {
    if u.len() != p.order() {
        return Err(PyValueError::new_err(format!("u has length {} but P has order {}", u.len(), p.order())));
    }
    Ok(())
}

fn parse_algo(s: &str) -> PyResult<Algo> {
    match s {
        "scaled" => Ok(Algo::Scaled),
        "plain" => Ok(Algo::Plain),
        "both" => Ok(Algo::Both),
        _ => Err(PyValueError::new_err(format!("algo must be scaled, plain or both, got {s:?}"))),
    }
}

fn parse_loss(s: &str) -> PyResult<LossKind> {
    match s {
        "rmse" => Ok(LossKind::Rmse),
        "xent" => Ok(LossKind::Xent),
        "edm" => Ok(LossKind::Edm),
        "bpr" => Ok(LossKind::Bpr),
        _ => Err(PyValueError::new_err(format!("unknown loss {s:?}"))),
    }
}

fn to_triples(raw: &[(usize, usize, usize, bool)]) -> Vec<TripleSample> {
    raw.iter().map(|&(i, j, k, y)| TripleSample { i, j, k, y }).collect()
}

fn trace_rows<'py>(py: Python<'py>, trace: &Trace) -> PyResult<Vec<Bound<'py, PyDict>>> {
    trace
        .rows()
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("step", r.step)?;
            d.set_item("epoch_frac", r.epoch_frac)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("auc", r.auc)?;
            d.set_item("g_max", r.g_max)?;
            d.set_item("wall_ms", r.wall_ms)?;
            Ok(d)
        })
        .collect()
}

fn runs_dict<'py>(py: Python<'py>, runs: &[AlgoRun]) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    for run in runs {
        let d = PyDict::new(py);
        d.set_item("alpha", run.alpha)?;
        d.set_item("diverged", run.output.diverged())?;
        d.set_item("trace", trace_rows(py, &run.output.trace)?)?;
        d.set_item("x", run.output.model.x().to_rows())?;
        out.set_item(run.label(), d)?;
    }
    Ok(out)
}

/// A factor matrix `X` with its cached preconditioner `P ~ (X^T X)^-1`.
#[pyclass(name = "FactorModel", skip_from_py_object)]
#[derive(Clone)]
struct PyFactorModel {
    inner: model::FactorModel,
}

#[pymethods]
impl PyFactorModel {
    #[new]
    fn new(x: Rows) -> PyResult<Self> {
        Ok(PyFactorModel {
            inner: model::FactorModel::new(factor(&x)?).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (d, r, sigma=1.0, seed=0))]
    fn gaussian(d: usize, r: usize, sigma: f64, seed: u64) -> PyResult<Self> {
        Ok(PyFactorModel {
            inner: model::FactorModel::init_gaussian(d, r, sigma, seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn x(&self) -> Rows {
        self.inner.x().to_rows()
    }

    #[getter]
    fn p(&self) -> Rows {
        self.inner.p().to_rows()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    /// `||P - (X^T X)^-1||_F / ||(X^T X)^-1||_F`.
    fn preconditioner_error(&self) -> PyResult<f64> {
        self.inner.preconditioner_error().map_err(py_err)
    }

    fn refresh(&mut self) -> PyResult<()> {
        self.inner.refresh_preconditioner().map_err(py_err)
    }

    /// One element step: `loss` is `rmse`, `xent` or `edm`.
    #[pyo3(signature = (loss, i, j, value, alpha, scaled=true))]
    fn step_element(&mut self, loss: &str, i: usize, j: usize, value: f64, alpha: f64, scaled: bool) -> PyResult<()> {
        let kind = parse_loss(loss)?;
        let mode = if scaled { StepMode::scaled(alpha) } else { StepMode::plain(alpha) };
        let s = Sample::Element(ElementSample { i, j, value });
        loss::step(&mut self.inner, kind, &s, mode).map(|_| ()).map_err(py_err)
    }

    /// One BPR step on the triple `(i, j, k, y)`.
    #[pyo3(signature = (i, j, k, y, alpha, scaled=true))]
    fn step_triple(&mut self, i: usize, j: usize, k: usize, y: bool, alpha: f64, scaled: bool) -> PyResult<()> {
        let mode = if scaled { StepMode::scaled(alpha) } else { StepMode::plain(alpha) };
        let s = Sample::Triple(TripleSample { i, j, k, y });
        loss::step(&mut self.inner, LossKind::Bpr, &s, mode).map(|_| ()).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("FactorModel(d={}, r={})", self.inner.d(), self.inner.rank())
    }
}

/// Inverse of `A + u u^T` given `P = A^-1`.
#[pyfunction]
fn smw_add(p: Rows, u: Vec<f64>) -> PyResult<Rows> {
    let p = sym(&p)?;
    check_len(&p, &u)?;
    Ok(kernel::smw_add(&p, &u).to_rows())
}

/// Inverse of `A - u u^T` given `P = A^-1`.
#[pyfunction]
fn smw_sub(p: Rows, u: Vec<f64>) -> PyResult<Rows> {
    let p = sym(&p)?;
    check_len(&p, &u)?;
    let tol = kernel::default_downdate_tol(&p);
    Ok(kernel::smw_sub(&p, &u, tol).map_err(py_err)?.to_rows())
}

/// `||X X^T - M||_F^2`.
#[pyfunction]
fn full_loss(x: Rows, m: Rows) -> PyResult<f64> {
    model::full_loss(&factor(&x)?, &dense(&m)?).map_err(py_err)
}

/// `4 (X X^T - M) X`.
#[pyfunction]
fn full_grad(x: Rows, m: Rows) -> PyResult<Rows> {
    Ok(model::full_grad(&factor(&x)?, &dense(&m)?).map_err(py_err)?.to_rows())
}

/// `(U, Z, M)` with orthonormal `U`, `Z = U S^1/2` and `M = Z Z^T`.
#[pyfunction]
#[pyo3(signature = (d, spectrum, seed=0))]
fn gen_low_rank(d: usize, spectrum: Vec<f64>, seed: u64) -> PyResult<(Rows, Rows, Rows)> {
    let s = Spectrum::new(spectrum).map_err(py_err)?;
    let (u, z, m) = datagen::gen_low_rank(d, &s, seed).map_err(py_err)?;
    Ok((u.to_rows(), z.to_rows(), m.to_rows()))
}

/// Fraction of triples whose order `X` preserves.
#[pyfunction]
fn auc(x: Rows, triples: Vec<(usize, usize, usize, bool)>) -> PyResult<f64> {
    eval::auc(&factor(&x)?, &to_triples(&triples)).map_err(py_err)
}

/// AUC of the best non-personalized ranking fit on the given triples.
#[pyfunction]
#[pyo3(signature = (triples, alpha=0.01, epochs=20, seed=0))]
fn np_maximum(triples: Vec<(usize, usize, usize, bool)>, alpha: f64, epochs: u32, seed: u64) -> PyResult<f64> {
    eval::np_maximum(&to_triples(&triples), alpha, epochs, seed).map_err(py_err)
}

/// Labeled triples `(i, j, k, y)` from a similarity matrix, or from a
/// ratings CSV when `m` is a path.
#[pyfunction]
#[pyo3(signature = (source, count, seed=0))]
fn build_triples(source: &Bound<'_, PyAny>, count: usize, seed: u64) -> PyResult<Vec<(usize, usize, usize, bool)>> {
    let out = if let Ok(path) = source.extract::<PathBuf>() {
        let g = ingest::load_ratings_csv(&path).map_err(py_err)?;
        ingest::build_triples(&g, count, seed)
    } else {
        let m = dense(&source.extract::<Rows>()?)?;
        ingest::build_triples(&m, count, seed)
    }
    .map_err(py_err)?;
    Ok(out.into_iter().map(|t| (t.i, t.j, t.k, t.y)).collect())
}

/// Synthetic RMSE or 1-bit completion; returns `{"scaled": ..., "plain": ...}`.
#[pyfunction]
#[pyo3(signature = (d=30, spectrum=vec![10.0, 0.1, 1e-3], alpha=0.3, epochs=100.0, seed=0, loss="rmse", algo="both", snr_db=None, r=None, alpha_plain=None, workers=1))]
#[allow(clippy::too_many_arguments)]
fn run_synth<'py>(
    py: Python<'py>,
    d: usize,
    spectrum: Vec<f64>,
    alpha: f64,
    epochs: f64,
    seed: u64,
    loss: &str,
    algo: &str,
    snr_db: Option<f64>,
    r: Option<usize>,
    alpha_plain: Option<f64>,
    workers: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = SynthSpec::new(d, Spectrum::new(spectrum).map_err(py_err)?, alpha, epochs, seed);
    spec.loss = parse_loss(loss)?;
    spec.algo = parse_algo(algo)?;
    spec.snr_db = snr_db;
    spec.r = r.unwrap_or(spec.r);
    spec.alpha_plain = alpha_plain;
    spec.workers = workers;
    let out = py.detach(|| experiments::run_synth(&spec)).map_err(py_err)?;
    let dict = runs_dict(py, &out.runs)?;
    dict.set_item("noise_floor", out.noise_floor)?;
    Ok(dict)
}

/// EDM completion of a point cloud with outliers.
#[pyfunction]
#[pyo3(signature = (n=30, outliers=5, shift=10.0, alpha_scaled=0.2, alpha_plain=0.002, epochs=100.0, seed=0))]
fn run_edm<'py>(
    py: Python<'py>,
    n: usize,
    outliers: usize,
    shift: f64,
    alpha_scaled: f64,
    alpha_plain: f64,
    epochs: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = EdmSpec { n, outliers, shift, alpha_scaled, alpha_plain, epochs, seed, ..EdmSpec::default() };
    let out = py.detach(|| experiments::run_edm(&spec)).map_err(py_err)?;
    let dict = runs_dict(py, &out.runs)?;
    dict.set_item("kappa", out.kappa)?;
    dict.set_item("points", out.instance.points.to_rows())?;
    Ok(dict)
}

/// BPR collaborative filtering on a synthetic item-item matrix or a ratings file.
#[pyfunction]
#[pyo3(signature = (d=500, spectrum=vec![10.0, 0.1, 1e-3], ratings=None, n_train=100_000, n_test=10_000, alpha_scaled=50.0, alpha_plain=0.05, epochs=5.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_cf<'py>(
    py: Python<'py>,
    d: usize,
    spectrum: Vec<f64>,
    ratings: Option<PathBuf>,
    n_train: usize,
    n_test: usize,
    alpha_scaled: f64,
    alpha_plain: f64,
    epochs: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = CfSpec::synthetic(d, Spectrum::new(spectrum).map_err(py_err)?, seed);
    if let Some(p) = ratings {
        spec.source = CfSource::Ratings(p);
    }
    spec.n_train = n_train;
    spec.n_test = n_test;
    spec.alpha_scaled = alpha_scaled;
    spec.alpha_plain = alpha_plain;
    spec.epochs = epochs;
    let out = py.detach(|| experiments::run_cf(&spec)).map_err(py_err)?;
    let dict = runs_dict(py, &out.runs)?;
    dict.set_item("np_maximum", out.np_maximum)?;
    dict.set_item("scaled_samples_to_np", out.samples_to_beat_np(true))?;
    dict.set_item("plain_samples_to_np", out.samples_to_beat_np(false))?;
    Ok(dict)
}

/// Randomized audit; returns `(violations, report_lines)`.
#[pyfunction]
#[pyo3(signature = (trials=200, d=20, r=3, kappas=vec![1.0, 1e4, 1e6], seed=0))]
fn verify(py: Python<'_>, trials: usize, d: usize, r: usize, kappas: Vec<f64>, seed: u64) -> PyResult<(u64, Vec<String>)> {
    let cfg = AuditConfig { d, r, trials, kappas, seed, ..AuditConfig::default() };
    let rep = py.detach(|| audit::run_audit(&cfg)).map_err(py_err)?;
    Ok((rep.violations(), rep.lines()))
}

#[pymodule]
fn pyscaledsgd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFactorModel>()?;
    m.add_function(wrap_pyfunction!(smw_add, m)?)?;
    m.add_function(wrap_pyfunction!(smw_sub, m)?)?;
    m.add_function(wrap_pyfunction!(full_loss, m)?)?;
    m.add_function(wrap_pyfunction!(full_grad, m)?)?;
    m.add_function(wrap_pyfunction!(gen_low_rank, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(np_maximum, m)?)?;
    m.add_function(wrap_pyfunction!(build_triples, m)?)?;
    m.add_function(wrap_pyfunction!(run_synth, m)?)?;
    m.add_function(wrap_pyfunction!(run_edm, m)?)?;
    m.add_function(wrap_pyfunction!(run_cf, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
