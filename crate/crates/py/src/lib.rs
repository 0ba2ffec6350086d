//! Python bindings. Points cross the boundary as lists of floats; ensembles
//! and sample sets as flat row-major lists with an explicit dimension.

use std::sync::Arc;

use ilab_core::lab::{self, ExperimentConfig};
use ilab_core::{
    IlabError, IntegratorKind, InterpolantSpec, MixtureField, Schedule, ScheduleKind, VelocityField, Want,
};
use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: IlabError) -> PyErr {
    match e {
        IlabError::Config(_) | IlabError::Contract(_) | IlabError::Domain(_) | IlabError::Shape { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn schedule_kind(name: &str) -> PyResult<ScheduleKind> {
    serde_json::from_value(serde_json::Value::String(name.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown schedule kind '{name}'")))
}

fn integrator(name: &str, subdivision: usize) -> PyResult<IntegratorKind> {
    match name {
        "euler" => Ok(IntegratorKind::Euler),
        "heun" => Ok(IntegratorKind::Heun),
        "reference" => Ok(IntegratorKind::ReferenceFine { subdivision }),
        _ => Err(PyValueError::new_err(format!("unknown integrator '{name}'"))),
    }
}

/// Gaussian mixture, built from the same JSON layout the configs use.
#[pyclass(name = "GaussianMixture", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMixture(ilab_core::GaussianMixture);

#[pymethods]
impl PyMixture {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        ilab_core::GaussianMixture::from_json(text)
            .map(PyMixture)
            .map_err(py_err)
    }

    #[staticmethod]
    fn standard_normal(dim: usize) -> PyResult<Self> {
        ilab_core::GaussianMixture::standard_normal(dim)
            .map(PyMixture)
            .map_err(py_err)
    }

    #[staticmethod]
    fn isotropic(mean: Vec<f64>, variance: f64) -> PyResult<Self> {
        ilab_core::GaussianMixture::isotropic_gaussian(DVector::from_vec(mean), variance)
            .map(PyMixture)
            .map_err(py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn logpdf(&self, x: Vec<f64>) -> PyResult<f64> {
        self.0.logpdf(&x).map_err(py_err)
    }

    /// `n` draws as a flat list of length `n * dim`.
    fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        self.0.sample(n, seed)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0.to_spec()).expect("mixture spec serializes")
    }
}

/// Closed-form velocity field between two mixtures.
#[pyclass(name = "MixtureField", frozen)]
struct PyField(Arc<MixtureField>);

#[pymethods]
impl PyField {
    /// `interpolant` is "two-sided" (Brownian-bridge gamma with scale `a`)
    /// or "one-sided-vp".
    #[new]
    #[pyo3(signature = (rho0, rho1, interpolant = "two-sided", a = 1.0))]
    fn new(rho0: &PyMixture, rho1: &PyMixture, interpolant: &str, a: f64) -> PyResult<Self> {
        let spec = match interpolant {
            "two-sided" => InterpolantSpec::brownian_bridge(a).map_err(py_err)?,
            "one-sided-vp" => InterpolantSpec::one_sided_vp(),
            other => return Err(PyValueError::new_err(format!("unknown interpolant '{other}'"))),
        };
        MixtureField::new(rho0.0.clone(), rho1.0.clone(), spec)
            .map(|f| PyField(Arc::new(f)))
            .map_err(py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn velocity(&self, t: f64, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let ev = self.0.eval(t, &DVector::from_vec(x), Want::VELOCITY).map_err(py_err)?;
        Ok(ev.b.as_slice().to_vec())
    }

    /// Velocity, Jacobian (row-major), divergence and score at one point.
    fn evaluate<'py>(&self, py: Python<'py>, t: f64, x: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let ev = self.0.eval(t, &DVector::from_vec(x), Want::ALL).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("b", ev.b.as_slice().to_vec())?;
        if let Some(j) = &ev.jacobian {
            let rows: Vec<Vec<f64>> = j.row_iter().map(|r| r.iter().copied().collect()).collect();
            out.set_item("jacobian", rows)?;
        }
        out.set_item("divergence", ev.divergence)?;
        out.set_item("score", ev.score.as_ref().map(|s| s.as_slice().to_vec()))?;
        out.set_item("far_tail", ev.far_tail)?;
        Ok(out)
    }

    /// Marginal density of `x_t` as a mixture.
    fn marginal(&self, t: f64) -> PyResult<PyMixture> {
        ilab_core::marginal_mixture(self.0.rho0(), self.0.rho1(), self.0.spec(), t)
            .map(PyMixture)
            .map_err(py_err)
    }

    /// Monte-Carlo estimate of the velocity; returns `(b_hat, stderr, ess)`.
    #[pyo3(signature = (t, x, n = 1_000_000, seed = 0))]
    fn oracle(&self, py: Python<'_>, t: f64, x: Vec<f64>, n: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
        let f = self.0.clone();
        let x = DVector::from_vec(x);
        let est = py
            .detach(move || ilab_core::oracle_velocity_mc(f.rho0(), f.rho1(), f.spec(), t, &x, n, seed))
            .map_err(py_err)?;
        Ok((est.b_hat.as_slice().to_vec(), est.stderr.as_slice().to_vec(), est.ess))
    }

    /// Trajectory of one point; returns `(times, states)`.
    #[pyo3(signature = (schedule, x0, integrator = "heun"))]
    fn integrate(&self, schedule: &PySchedule, x0: Vec<f64>, integrator: &str) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let kind = self::integrator(integrator, ilab_core::solvers::DEFAULT_REFERENCE_SUBDIVISION)?;
        let traj =
            ilab_core::integrate(self.0.as_ref(), &schedule.0, &DVector::from_vec(x0), kind, false).map_err(py_err)?;
        Ok((traj.times, traj.states.iter().map(|s| s.as_slice().to_vec()).collect()))
    }

    /// Pushes `n` draws of `rho(t_0)` through the schedule.
    #[pyo3(signature = (schedule, n, integrator = "heun", seed = 0, track_logdet = true))]
    fn push(
        &self,
        py: Python<'_>,
        schedule: &PySchedule,
        n: usize,
        integrator: &str,
        seed: u64,
        track_logdet: bool,
    ) -> PyResult<PyEnsemble> {
        let kind = self::integrator(integrator, ilab_core::solvers::DEFAULT_REFERENCE_SUBDIVISION)?;
        let f = self.0.clone();
        let s = schedule.0.clone();
        py.detach(move || ilab_core::push_ensemble(f.as_ref(), &s, n, kind, seed, track_logdet))
            .map(PyEnsemble)
            .map_err(py_err)
    }
}

#[pyclass(name = "Schedule", frozen)]
struct PySchedule(Schedule);

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (kind = "geometric-mid", h = 0.1, delta_start = 0.01, delta_end = 0.01))]
    fn new(kind: &str, h: f64, delta_start: f64, delta_end: f64) -> PyResult<Self> {
        ilab_core::make_schedule(schedule_kind(kind)?, h, delta_start, delta_end)
            .map(PySchedule)
            .map_err(py_err)
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.times().to_vec()
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.0.n_steps()
    }

    #[getter]
    fn max_step(&self) -> f64 {
        self.0.max_step()
    }
}

#[pyclass(name = "Ensemble", frozen)]
struct PyEnsemble(ilab_core::PushedEnsemble);

#[pymethods]
impl PyEnsemble {
    #[getter]
    fn dim(&self) -> usize {
        self.0.dim
    }

    #[getter]
    fn points(&self) -> Vec<f64> {
        self.0.points.clone()
    }

    #[getter]
    fn dropped(&self) -> usize {
        self.0.dropped
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// Change-of-variables log-density of every point, when tracked.
    fn log_density(&self) -> Option<Vec<f64>> {
        (0..self.0.len()).map(|i| self.0.log_density(i)).collect()
    }

    /// Density-ratio TV against `target`; returns `(value, stderr)`.
    fn tv_density_ratio(&self, target: &PyMixture) -> PyResult<(f64, f64)> {
        let m = &target.0;
        let est = ilab_core::tv_density_ratio(&self.0, |y| m.logpdf(y).unwrap_or(f64::NEG_INFINITY)).map_err(py_err)?;
        Ok((est.value, est.stderr))
    }
}

/// Histogram TV between two flat sample sets; the grid comes from `q`
/// unless `lower`/`upper` are given.
#[pyfunction]
#[pyo3(signature = (p, q, dim, bins = None, lower = None, upper = None))]
fn tv_histogram(
    p: Vec<f64>,
    q: Vec<f64>,
    dim: usize,
    bins: Option<usize>,
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
) -> PyResult<(f64, f64)> {
    let bins = bins.unwrap_or_else(|| ilab_core::HistogramGrid::default_bins(dim));
    let grid = match (lower, upper) {
        (Some(lo), Some(hi)) => ilab_core::HistogramGrid::new(lo, hi, bins),
        (None, None) => ilab_core::HistogramGrid::from_reference(&q, dim, bins),
        _ => return Err(PyValueError::new_err("give both lower and upper, or neither")),
    }
    .map_err(py_err)?;
    let est = ilab_core::tv_histogram(&p, &q, dim, &grid).map_err(py_err)?;
    Ok((est.value, est.stderr))
}

/// OLS fit of `log err` on `log h`; returns `(slope, intercept, r_squared)`.
#[pyfunction]
fn fit_loglog_slope(pairs: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let fit = ilab_core::fit_loglog_slope(&pairs).map_err(py_err)?;
    Ok((fit.slope, fit.intercept, fit.r_squared))
}

/// Runs a convergence sweep from a JSON config; returns one dict per row.
#[pyfunction]
fn convergence<'py>(py: Python<'py>, config_json: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(py_err)?;
    let res = py.detach(move || lab::convergence(&cfg)).map_err(py_err)?;
    res.rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("integrator", &r.integrator)?;
            d.set_item("h", r.h)?;
            d.set_item("n_steps", r.n_steps)?;
            d.set_item("d", r.d)?;
            d.set_item("tv", r.tv)?;
            d.set_item("tv_stderr", r.tv_stderr)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn ilab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMixture>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(tv_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(fit_loglog_slope, m)?)?;
    m.add_function(wrap_pyfunction!(convergence, m)?)?;
    Ok(())
}
