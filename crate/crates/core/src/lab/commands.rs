//! The harness subcommands, as pure functions from a config to a report.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{IlabError, Result};
use crate::field::{perturb_field, VelocityField, Want};
use crate::interpolant::InterpolantSpec;
use crate::metrics::{
    continuity_report, fit_loglog_slope, pairwise_sum, tv_density_ratio, tv_histogram, HistogramGrid, SlopeFit,
    TvEstimate, TvMethod, DEFAULT_FD_STEP,
};
use crate::mixture::GaussianMixture;
use crate::mixture_field::{marginal_mixture, MixtureField};
use crate::oracle::oracle_velocity_mc;
use crate::rng::{sample_rng, substream};
use crate::schedule::{make_schedule, predicted_steps, Schedule, ScheduleKind};
use crate::solvers::{push_ensemble, IntegratorKind, PushedEnsemble, MAX_TRACKED_DIM};

use super::config::ExperimentConfig;

/// Oracle agreement is judged at this many standard errors.
pub const ORACLE_SIGMAS: f64 = 4.0;
/// Relative tolerance of the finite-difference derivative panels.
pub const DERIVATIVE_RTOL: f64 = 1e-5;
/// Absolute floor of the finite-difference derivative panels.
pub const DERIVATIVE_ATOL: f64 = 1e-6;
pub const DERIVATIVE_FD_STEP: f64 = 1e-5;
pub const TRACE_TOL: f64 = 1e-10;
pub const CONTINUITY_RTOL: f64 = 1e-4;
/// Fits with less explained variance than this are reported as noise floor.
pub const FLOOR_R_SQUARED: f64 = 0.5;

/// Endpoints, interpolant and the (possibly perturbed) field of one task.
pub struct Task {
    pub rho0: GaussianMixture,
    pub rho1: GaussianMixture,
    pub spec: InterpolantSpec,
    pub exact: Arc<MixtureField>,
    pub field: Arc<dyn VelocityField>,
}

impl Task {
    pub fn dim(&self) -> usize {
        self.rho1.dim()
    }

    pub fn marginal(&self, t: f64) -> Result<GaussianMixture> {
        marginal_mixture(&self.rho0, &self.rho1, &self.spec, t)
    }
}

pub fn build_task(cfg: &ExperimentConfig, dim: Option<usize>) -> Result<Task> {
    let (rho0, rho1) = cfg.endpoints(dim)?;
    let spec = cfg.interpolant.spec()?;
    let exact = Arc::new(MixtureField::new(rho0.clone(), rho1.clone(), spec)?);
    let field: Arc<dyn VelocityField> = match &cfg.perturbation {
        Some(p) => Arc::new(perturb_field(exact.clone(), p.magnitude, p.mode)?),
        None => exact.clone(),
    };
    Ok(Task {
        rho0,
        rho1,
        spec,
        exact,
        field,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Panel {
    Oracle,
    Jacobian,
    Score,
    Divergence,
    Continuity,
}

impl Panel {
    pub fn as_str(&self) -> &'static str {
        match self {
            Panel::Oracle => "oracle",
            Panel::Jacobian => "jacobian",
            Panel::Score => "score",
            Panel::Divergence => "divergence",
            Panel::Continuity => "continuity",
        }
    }
}

/// One probe of a velocity-check panel: pass iff `|value - reference| <= tolerance`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub panel: Panel,
    pub probe: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub value: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(panel: Panel, probe: usize, t: f64, x: &DVector<f64>, value: f64, reference: f64, tolerance: f64) -> Self {
        CheckRow {
            panel,
            probe,
            t,
            x: x.iter().copied().collect(),
            value,
            reference,
            tolerance,
            pass: (value - reference).abs() <= tolerance,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VelocityCheckReport {
    pub rows: Vec<CheckRow>,
    /// Largest `|b|` over the oracle probes.
    pub max_abs_velocity: f64,
}

impl VelocityCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.pass)
    }
}

/// Probe `(t, x)` pairs with `t ~ U(0.05, 0.95)` and `x ~ rho(t)`.
pub fn probe_panel(task: &Task, n: usize, seed: u64) -> Result<Vec<(f64, DVector<f64>)>> {
    (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let t = rng.random_range(0.05..0.95);
            let (_, x) = task.marginal(t)?.draw(&mut rng);
            Ok((t, x))
        })
        .collect()
}

fn fd_jacobian(field: &dyn VelocityField, t: f64, x: &DVector<f64>, step: f64) -> Result<DMatrix<f64>> {
    let d = x.len();
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let col = (field.eval(t, &xp, Want::VELOCITY)?.b - field.eval(t, &xm, Want::VELOCITY)?.b) / (2.0 * step);
        jac.set_column(j, &col);
    }
    Ok(jac)
}

fn fd_gradient(f: impl Fn(&[f64]) -> Result<f64>, x: &DVector<f64>, step: f64) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(x.len());
    for j in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        g[j] = (f(xp.as_slice())? - f(xm.as_slice())?) / (2.0 * step);
    }
    Ok(g)
}

fn derivative_tolerance(scale: f64) -> f64 {
    (DERIVATIVE_RTOL * scale).max(DERIVATIVE_ATOL)
}

/// Closed form against the oracle, derivatives against finite differences,
/// and the transport-equation residual.
pub fn velocity_check(cfg: &ExperimentConfig) -> Result<VelocityCheckReport> {
    let task = build_task(cfg, None)?;
    let vc = cfg.velocity_check;
    let field = task.field.as_ref();
    let mut rows = Vec::new();
    let mut max_abs_velocity: f64 = 0.0;

    let oracle_probes = probe_panel(&task, vc.oracle_probes, substream(cfg.seed, "oracle-probes"))?;
    for (i, (t, x)) in oracle_probes.iter().enumerate() {
        let b = field.eval(*t, x, Want::VELOCITY)?.b;
        max_abs_velocity = max_abs_velocity.max(b.amax());
        let est = oracle_velocity_mc(
            &task.rho0,
            &task.rho1,
            &task.spec,
            *t,
            x,
            vc.oracle_samples,
            substream(cfg.seed, &format!("oracle-{i}")),
        )?;
        for k in 0..b.len() {
            rows.push(CheckRow::new(
                Panel::Oracle,
                i,
                *t,
                x,
                b[k],
                est.b_hat[k],
                ORACLE_SIGMAS * est.stderr[k],
            ));
        }
    }

    let fd_probes = probe_panel(&task, vc.derivative_probes, substream(cfg.seed, "derivative-probes"))?;
    for (i, (t, x)) in fd_probes.iter().enumerate() {
        let ev = field.eval(*t, x, Want::ALL)?;
        let jac = ev.jacobian.as_ref().unwrap();
        let fd = fd_jacobian(field, *t, x, DERIVATIVE_FD_STEP)?;
        let scale = jac.norm();
        rows.push(CheckRow::new(
            Panel::Jacobian,
            i,
            *t,
            x,
            (jac - &fd).norm(),
            0.0,
            derivative_tolerance(scale),
        ));

        let marginal = task.marginal(*t)?;
        let fd_score = fd_gradient(|y| marginal.logpdf(y), x, DERIVATIVE_FD_STEP)?;
        let score = ev.score.as_ref().unwrap();
        rows.push(CheckRow::new(
            Panel::Score,
            i,
            *t,
            x,
            (score - &fd_score).norm(),
            0.0,
            derivative_tolerance(score.norm()),
        ));
        rows.push(CheckRow::new(
            Panel::Divergence,
            i,
            *t,
            x,
            ev.divergence.unwrap(),
            jac.trace(),
            TRACE_TOL,
        ));
    }

    let cont_probes = probe_panel(&task, vc.continuity_probes, substream(cfg.seed, "continuity-probes"))?;
    for (i, (t, x)) in cont_probes.iter().enumerate() {
        let rep = continuity_report(&task.rho0, &task.rho1, &task.spec, *t, x, DEFAULT_FD_STEP)?;
        if !rep.richardson_ok {
            log::warn!("continuity residual at t = {t} is not stable under step halving");
        }
        rows.push(CheckRow::new(
            Panel::Continuity,
            i,
            *t,
            x,
            rep.residual,
            0.0,
            CONTINUITY_RTOL * rep.density.max(1e-12),
        ));
    }
    Ok(VelocityCheckReport { rows, max_abs_velocity })
}

/// One `(integrator, h, d)` measurement in the fixed CSV schema.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub config_hash: String,
    pub preset: String,
    pub integrator: String,
    pub schedule_kind: ScheduleKind,
    pub h: f64,
    pub n_steps: usize,
    pub d: usize,
    pub metric: TvMethod,
    pub tv: f64,
    pub tv_stderr: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Log-log fit of one integrator's series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFit {
    pub integrator: String,
    pub fit: Option<SlopeFit>,
    /// Half-width of the 95% interval on the slope.
    pub ci95: f64,
    /// The series sits at the estimator's noise floor.
    pub floor: bool,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub fits: Vec<SeriesFit>,
}

impl SweepResult {
    pub fn fit_for(&self, integrator: &str) -> Option<&SeriesFit> {
        self.fits.iter().find(|f| f.integrator == integrator)
    }

    pub fn rows_for<'a>(&'a self, integrator: &'a str) -> impl Iterator<Item = &'a SweepRow> + 'a {
        self.rows.iter().filter(move |r| r.integrator == integrator)
    }
}

/// Pushes `n` points through one scheme and measures TV against `rho(t_N)`.
pub fn measure_tv(
    task: &Task,
    schedule: &Schedule,
    kind: IntegratorKind,
    n: usize,
    seed: u64,
    metric: TvMethod,
) -> Result<TvEstimate> {
    let track = metric == TvMethod::DensityRatio;
    let ens = push_ensemble(task.field.as_ref(), schedule, n, kind, seed, track)?;
    let target = task.marginal(schedule.end())?;
    match metric {
        TvMethod::DensityRatio => tv_density_ratio(&ens, |y| target.logpdf(y).unwrap_or(f64::NEG_INFINITY)),
        TvMethod::Histogram => {
            let d = task.dim();
            let truth = target.sample(n, substream(seed, "target"));
            let grid = HistogramGrid::from_reference(&truth, d, HistogramGrid::default_bins(d))?;
            tv_histogram(&ens.points, &truth, d, &grid)
        }
    }
}

fn fit_series(integrator: &str, pairs: &[(f64, f64)], stderrs: &[f64]) -> Result<SeriesFit> {
    let at_floor = pairs.iter().zip(stderrs).all(|(p, se)| p.1 <= 3.0 * se);
    let fit = if pairs.len() >= 3 && pairs.iter().all(|p| p.1 > 0.0) {
        Some(fit_loglog_slope(pairs)?)
    } else {
        None
    };
    let ci95 = fit.map(|f| f.slope_ci_half_width(0.95)).unwrap_or(f64::INFINITY);
    let floor = at_floor || fit.is_none_or(|f| f.r_squared < FLOOR_R_SQUARED);
    Ok(SeriesFit {
        integrator: integrator.to_string(),
        fit,
        ci95,
        floor,
    })
}

fn sweep_row(
    cfg: &ExperimentConfig,
    kind: IntegratorKind,
    schedule: &Schedule,
    h: f64,
    d: usize,
    tv: &TvEstimate,
) -> SweepRow {
    SweepRow {
        config_hash: cfg.config_hash(),
        preset: cfg.task_name().to_string(),
        integrator: kind.name().to_string(),
        schedule_kind: schedule.kind(),
        h,
        n_steps: schedule.n_steps(),
        d,
        metric: tv.method,
        tv: tv.value,
        tv_stderr: tv.stderr,
        n_samples: tv.n_used,
        seed: cfg.seed,
    }
}

/// TV against `h` for each integrator, with log-log slope fits.
pub fn convergence(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let hs = cfg
        .schedule
        .h_list
        .as_ref()
        .ok_or_else(|| IlabError::Config("convergence needs schedule.h_list".into()))?;
    if hs.len() < 4 {
        return Err(IlabError::Config("convergence needs at least 4 step scales".into()));
    }
    if hs[0] / hs[hs.len() - 1] < 8.0 * (1.0 - 1e-12) {
        return Err(IlabError::Config("h_list must span at least a factor of 8".into()));
    }
    let task = build_task(cfg, None)?;
    let s = &cfg.schedule;
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for name in &cfg.integrators {
        let kind = name.kind();
        let mut pairs = Vec::new();
        let mut stderrs = Vec::new();
        for &h in hs {
            let schedule = make_schedule(s.kind, h, s.delta_start, s.delta_end)?;
            let tv = measure_tv(&task, &schedule, kind, cfg.n_samples, cfg.seed, cfg.metric)?;
            log::info!(
                "{} h={h} N={} tv={:.4e} +- {:.1e}",
                kind.name(),
                schedule.n_steps(),
                tv.value,
                tv.stderr
            );
            pairs.push((h, tv.value));
            stderrs.push(tv.stderr);
            rows.push(sweep_row(cfg, kind, &schedule, h, task.dim(), &tv));
        }
        fits.push(fit_series(kind.name(), &pairs, &stderrs)?);
    }
    Ok(SweepResult { rows, fits })
}

/// TV against dimension at fixed `h`; the fitted slope is the growth exponent in `d`.
pub fn dim_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let ds = cfg
        .d_list
        .as_ref()
        .ok_or_else(|| IlabError::Config("dim-sweep needs d_list".into()))?;
    if cfg.metric != TvMethod::DensityRatio {
        return Err(IlabError::Config("dim-sweep uses the density-ratio metric".into()));
    }
    if let Some(&d) = ds.iter().find(|&&d| d > MAX_TRACKED_DIM) {
        return Err(IlabError::Config(format!("d = {d} exceeds the density-tracking limit")));
    }
    let s = &cfg.schedule;
    let schedule = make_schedule(s.kind, s.h, s.delta_start, s.delta_end)?;
    let tasks = ds
        .iter()
        .map(|&d| build_task(cfg, Some(d)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for name in &cfg.integrators {
        let kind = name.kind();
        let mut pairs = Vec::new();
        let mut stderrs = Vec::new();
        for (task, &d) in tasks.iter().zip(ds) {
            let tv = measure_tv(task, &schedule, kind, cfg.n_samples, cfg.seed, cfg.metric)?;
            log::info!("{} d={d} tv={:.4e} +- {:.1e}", kind.name(), tv.value, tv.stderr);
            pairs.push((d as f64, tv.value));
            stderrs.push(tv.stderr);
            rows.push(sweep_row(cfg, kind, &schedule, s.h, d, &tv));
        }
        fits.push(fit_series(kind.name(), &pairs, &stderrs)?);
    }
    Ok(SweepResult { rows, fits })
}

/// Terminal points of the first configured integrator plus exact target draws.
pub struct SampleOutput {
    pub ensemble: PushedEnsemble,
    pub target: Vec<f64>,
    pub schedule: Schedule,
}

pub fn sample(cfg: &ExperimentConfig) -> Result<SampleOutput> {
    let task = build_task(cfg, None)?;
    let s = &cfg.schedule;
    let schedule = make_schedule(s.kind, s.h, s.delta_start, s.delta_end)?;
    let kind = cfg.integrators[0].kind();
    let track = task.dim() <= MAX_TRACKED_DIM;
    let ensemble = push_ensemble(task.field.as_ref(), &schedule, cfg.n_samples, kind, cfg.seed, track)?;
    let target = task
        .marginal(schedule.end())?
        .sample(cfg.n_samples, substream(cfg.seed, "target"));
    Ok(SampleOutput {
        ensemble,
        target,
        schedule,
    })
}

#[derive(Debug, Clone)]
pub struct ScheduleReport {
    pub schedule: Schedule,
    pub h: f64,
    pub max_step: f64,
    /// `max h_k / inf gamma^2` over each step (infinite for `gamma = 0`).
    pub max_step_to_variance: f64,
    pub predicted_steps: f64,
    pub dim: usize,
    /// Monte-Carlo `E|x0 - x1|^6` under the independent coupling.
    pub sixth_moment: f64,
    /// `max h_k <= E|x0 - x1|^6 ^ (-1/3)`.
    pub moment_condition: bool,
    /// `max h_k / gamma_bar_k^2 <= 1 / d`.
    pub variance_condition: bool,
}

const MOMENT_SAMPLES: usize = 100_000;

pub fn schedule_report(cfg: &ExperimentConfig) -> Result<ScheduleReport> {
    let s = &cfg.schedule;
    let schedule = make_schedule(s.kind, s.h, s.delta_start, s.delta_end)?;
    let gamma = cfg.interpolant.spec()?.gamma;
    let (rho0, rho1) = cfg.endpoints(None)?;
    let dim = rho1.dim();
    let a = rho0.sample(MOMENT_SAMPLES, substream(cfg.seed, "moment-rho0"));
    let b = rho1.sample(MOMENT_SAMPLES, substream(cfg.seed, "moment-rho1"));
    let sixth: Vec<f64> = a
        .chunks(dim)
        .zip(b.chunks(dim))
        .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v).powi(2)).sum::<f64>().powi(3))
        .collect();
    let sixth_moment = pairwise_sum(&sixth) / MOMENT_SAMPLES as f64;
    let max_step = schedule.max_step();
    let max_step_to_variance = schedule.max_step_to_variance(&gamma);
    Ok(ScheduleReport {
        max_step,
        max_step_to_variance,
        predicted_steps: predicted_steps(s.kind, s.h, s.delta_start, s.delta_end),
        h: s.h,
        schedule,
        dim,
        sixth_moment,
        moment_condition: max_step <= sixth_moment.powf(-1.0 / 3.0),
        variance_condition: max_step_to_variance <= 1.0 / dim as f64,
    })
}
