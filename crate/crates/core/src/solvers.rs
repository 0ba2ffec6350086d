//! Forward Euler and Heun integrators, their step maps and step Jacobians.
//!
//! The discrete step maps are
//!
//! ```text
//! F(x) = x + h b(t_k, x)
//! G(x) = x + h/2 [b(t_k, x) + b(t_{k+1}, F(x))]
//! ```
//!
//! with Jacobians `I + h J0` and `I + h/2 [J0 + J1 (I + h J0)]`. Summing
//! `log|det|` of these along a path gives the exact density of the law the
//! discrete scheme produces, which is what the density-ratio TV estimator
//! consumes.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, IlabError, Result};
use crate::field::{FrozenField, Scratch, VelocityEval, VelocityField, Want};
use crate::mixture::GaussianMixture;
use crate::probe::probe_points;
use crate::rng::sample_rng;
use crate::schedule::Schedule;

/// Minimum refinement for the fine-grid reference solver.
pub const MIN_REFERENCE_SUBDIVISION: usize = 16;
/// Default refinement for reference solutions.
pub const DEFAULT_REFERENCE_SUBDIVISION: usize = 256;
/// Largest dimension for which log-determinants are tracked.
pub const MAX_TRACKED_DIM: usize = 64;
/// Fraction of dropped ensemble points tolerated before a run fails.
pub const DROP_BUDGET: f64 = 1e-3;

const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorKind {
    Euler,
    Heun,
    /// Heun on the schedule refined by `subdivision`.
    ReferenceFine {
        subdivision: usize,
    },
}

impl IntegratorKind {
    pub fn name(&self) -> &'static str {
        match self {
            IntegratorKind::Euler => "euler",
            IntegratorKind::Heun => "heun",
            IntegratorKind::ReferenceFine { .. } => "reference",
        }
    }

    fn validate(&self) -> Result<()> {
        if let IntegratorKind::ReferenceFine { subdivision } = *self {
            if subdivision < MIN_REFERENCE_SUBDIVISION {
                return Err(IlabError::Config(format!(
                    "reference subdivision must be at least {MIN_REFERENCE_SUBDIVISION}, got {subdivision}"
                )));
            }
        }
        Ok(())
    }

    /// The actual per-step map and grid used for `schedule`.
    fn resolve(&self, schedule: &Schedule) -> (StepMap, Schedule) {
        match *self {
            IntegratorKind::Euler => (StepMap::Euler, schedule.clone()),
            IntegratorKind::Heun => (StepMap::Heun, schedule.clone()),
            IntegratorKind::ReferenceFine { subdivision } => (StepMap::Heun, schedule.refine(subdivision)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepMap {
    Euler,
    Heun,
}

/// Reusable buffers for stepping one point.
pub struct StepWorkspace {
    e0: VelocityEval,
    e1: VelocityEval,
    scratch: Scratch,
    pred: DVector<f64>,
    next: DVector<f64>,
    jac: DMatrix<f64>,
    prod: DMatrix<f64>,
}

impl StepWorkspace {
    pub fn new(dim: usize) -> Self {
        StepWorkspace {
            e0: VelocityEval::zeros(dim),
            e1: VelocityEval::zeros(dim),
            scratch: Scratch::default(),
            pred: DVector::zeros(dim),
            next: DVector::zeros(dim),
            jac: DMatrix::zeros(dim, dim),
            prod: DMatrix::zeros(dim, dim),
        }
    }

    pub fn next(&self) -> &DVector<f64> {
        &self.next
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jac
    }
}

/// One step from `x` over `[t_k, t_k + h]`; writes `ws.next` and, when
/// `with_jacobian`, the step Jacobian into `ws.jac`.
fn apply_step(
    map: StepMap,
    f0: &dyn FrozenField,
    f1: &dyn FrozenField,
    h: f64,
    x: &DVector<f64>,
    with_jacobian: bool,
    ws: &mut StepWorkspace,
) {
    let want = if with_jacobian { Want::JACOBIAN } else { Want::VELOCITY };
    f0.eval_into(x, want, &mut ws.e0, &mut ws.scratch);
    match map {
        StepMap::Euler => {
            ws.next.copy_from(x);
            ws.next.axpy(h, &ws.e0.b, 1.0);
            if with_jacobian {
                ws.jac.copy_from(ws.e0.jacobian());
                ws.jac *= h;
                for i in 0..ws.jac.nrows() {
                    ws.jac[(i, i)] += 1.0;
                }
            }
        }
        StepMap::Heun => {
            ws.pred.copy_from(x);
            ws.pred.axpy(h, &ws.e0.b, 1.0);
            f1.eval_into(&ws.pred, want, &mut ws.e1, &mut ws.scratch);
            ws.next.copy_from(x);
            ws.next.axpy(0.5 * h, &ws.e0.b, 1.0);
            ws.next.axpy(0.5 * h, &ws.e1.b, 1.0);
            if with_jacobian {
                let j0 = ws.e0.jacobian();
                let j1 = ws.e1.jacobian();
                // I + h/2 J0 + h/2 J1 + h^2/2 J1 J0
                ws.prod.gemm(0.5 * h * h, j1, j0, 0.0);
                ws.jac.copy_from(&ws.prod);
                ws.jac += j0 * (0.5 * h);
                ws.jac += j1 * (0.5 * h);
                for i in 0..ws.jac.nrows() {
                    ws.jac[(i, i)] += 1.0;
                }
            }
        }
    }
}

/// `log|det m|` by LU with partial pivoting, plus the sign of the determinant.
pub fn log_abs_det(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 1 {
        let v = m[(0, 0)];
        return (v.abs().ln(), v.signum());
    }
    let det = m.clone().lu().determinant();
    (det.abs().ln(), det.signum())
}

/// Frobenius distance of a square matrix from the identity.
pub fn identity_deviation(m: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let v = m[(i, j)] - if i == j { 1.0 } else { 0.0 };
            acc += v * v;
        }
    }
    acc.sqrt()
}

fn check_finite(x: &DVector<f64>, step: usize, t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(IlabError::Integration {
            step,
            t,
            reason: "non-finite state".into(),
        })
    }
}

fn single_step(
    map: StepMap,
    field: &dyn VelocityField,
    t_k: f64,
    t_k1: f64,
    x: &DVector<f64>,
    with_jacobian: bool,
) -> Result<StepWorkspace> {
    check_dim(field.dim(), x.len())?;
    if !(t_k1 > t_k) {
        return Err(IlabError::Domain(format!(
            "step must move forward in time: {t_k} -> {t_k1}"
        )));
    }
    let f0 = field.at(t_k)?;
    let f1 = if map == StepMap::Heun {
        field.at(t_k1)?
    } else {
        field.at(t_k)?
    };
    let mut ws = StepWorkspace::new(x.len());
    apply_step(map, f0.as_ref(), f1.as_ref(), t_k1 - t_k, x, with_jacobian, &mut ws);
    check_finite(&ws.next, 0, t_k)?;
    Ok(ws)
}

/// `x + h b(t_k, x)`.
pub fn euler_step(field: &dyn VelocityField, t_k: f64, h: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(single_step(StepMap::Euler, field, t_k, t_k + h, x, false)?.next)
}

/// Predictor `x + h b(t_k, x)`, then the trapezoidal corrector.
pub fn heun_step(field: &dyn VelocityField, t_k: f64, t_k1: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(single_step(StepMap::Heun, field, t_k, t_k1, x, false)?.next)
}

/// `I + h grad b(t_k, x)`.
pub fn euler_step_jacobian(field: &dyn VelocityField, t_k: f64, h: f64, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(single_step(StepMap::Euler, field, t_k, t_k + h, x, true)?.jac)
}

/// `I + h/2 [J0 + J1 (I + h J0)]` with `J1` taken at the predictor.
pub fn heun_step_jacobian(field: &dyn VelocityField, t_k: f64, t_k1: f64, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(single_step(StepMap::Heun, field, t_k, t_k1, x, true)?.jac)
}

/// A schedule with the field frozen at every grid time.
pub struct FrozenSchedule<'a> {
    schedule: Schedule,
    map: StepMap,
    slices: Vec<Box<dyn FrozenField + 'a>>,
}

impl<'a> FrozenSchedule<'a> {
    pub fn new(field: &'a dyn VelocityField, schedule: &Schedule, kind: IntegratorKind) -> Result<Self> {
        kind.validate()?;
        let (map, schedule) = kind.resolve(schedule);
        let slices = schedule
            .times()
            .iter()
            .map(|&t| field.at(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(FrozenSchedule { schedule, map, slices })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Runs one path; returns the accumulated `sum log|det|` when tracking.
    ///
    /// `on_step(k, jacobian)` sees each step Jacobian when tracking.
    pub fn run(
        &self,
        x0: &DVector<f64>,
        track_logdet: bool,
        ws: &mut StepWorkspace,
        state: &mut DVector<f64>,
        mut on_step: impl FnMut(usize, &DVector<f64>, Option<&DMatrix<f64>>),
    ) -> Result<Option<f64>> {
        state.copy_from(x0);
        let mut logdet = 0.0;
        for (k, (t_k, t_k1)) in self.schedule.steps().enumerate() {
            apply_step(
                self.map,
                self.slices[k].as_ref(),
                self.slices[k + 1].as_ref(),
                t_k1 - t_k,
                state,
                track_logdet,
                ws,
            );
            check_finite(&ws.next, k, t_k)?;
            if track_logdet {
                let (ld, sign) = log_abs_det(&ws.jac);
                if !ld.is_finite() || sign <= 0.0 {
                    return Err(IlabError::Integration {
                        step: k,
                        t: t_k,
                        reason: "step map is not orientation preserving".into(),
                    });
                }
                logdet += ld;
                on_step(k, &ws.next, Some(&ws.jac));
            } else {
                on_step(k, &ws.next, None);
            }
            state.copy_from(&ws.next);
        }
        Ok(track_logdet.then_some(logdet))
    }
}

/// A full path through the schedule.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub log_det_sum: Option<f64>,
    /// `|grad(step) - I|_F` per step when tracking.
    pub step_deviation: Vec<f64>,
}

impl Trajectory {
    pub fn terminal(&self) -> &DVector<f64> {
        self.states.last().unwrap()
    }
}

/// Integrates one initial condition along `schedule`.
pub fn integrate(
    field: &dyn VelocityField,
    schedule: &Schedule,
    x0: &DVector<f64>,
    kind: IntegratorKind,
    track_logdet: bool,
) -> Result<Trajectory> {
    check_dim(field.dim(), x0.len())?;
    check_finite(x0, 0, schedule.start())?;
    let frozen = FrozenSchedule::new(field, schedule, kind)?;
    let mut ws = StepWorkspace::new(x0.len());
    let mut state = x0.clone();
    let mut states = vec![x0.clone()];
    let mut step_deviation = Vec::new();
    let log_det_sum = frozen.run(x0, track_logdet, &mut ws, &mut state, |_, next, jac| {
        states.push(next.clone());
        if let Some(j) = jac {
            step_deviation.push(identity_deviation(j));
        }
    })?;
    Ok(Trajectory {
        times: frozen.schedule().times().to_vec(),
        states,
        log_det_sum,
        step_deviation,
    })
}

/// Heun on `[t0, tn]` split into `subdivision` equal steps.
pub fn reference_solution(
    field: &dyn VelocityField,
    t0: f64,
    tn: f64,
    x0: &DVector<f64>,
    subdivision: usize,
) -> Result<DVector<f64>> {
    if subdivision < MIN_REFERENCE_SUBDIVISION {
        return Err(IlabError::Config(format!(
            "reference subdivision must be at least {MIN_REFERENCE_SUBDIVISION}"
        )));
    }
    let base = Schedule::from_times(vec![t0, tn], crate::schedule::ScheduleKind::Uniform)?;
    Ok(
        integrate(field, &base, x0, IntegratorKind::ReferenceFine { subdivision }, false)?
            .terminal()
            .clone(),
    )
}

/// Terminal points of an ensemble pushed through the scheme.
#[derive(Debug, Clone)]
pub struct PushedEnsemble {
    pub dim: usize,
    /// Row-major `n_kept x dim`.
    pub points: Vec<f64>,
    /// Original sample index of each kept row.
    pub indices: Vec<usize>,
    pub log_det_sums: Option<Vec<f64>>,
    pub initial_log_density: Option<Vec<f64>>,
    /// Largest `|grad(step) - I|_F` seen at each step (empty without tracking).
    pub step_max_deviation: Vec<f64>,
    pub dropped: usize,
    pub requested: usize,
}

impl PushedEnsemble {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// `log rho_hat(y_i) = log rho(t_0, x_i) - sum_k log|det grad step_k|`.
    pub fn log_density(&self, i: usize) -> Option<f64> {
        Some(self.initial_log_density.as_ref()?[i] - self.log_det_sums.as_ref()?[i])
    }

    pub fn max_deviation(&self) -> f64 {
        self.step_max_deviation.iter().copied().fold(0.0, f64::max)
    }
}

struct ChunkOut {
    points: Vec<f64>,
    indices: Vec<usize>,
    log_dets: Vec<f64>,
    init: Vec<f64>,
    max_dev: Vec<f64>,
    dropped: usize,
}

/// Samples `n` points from `rho(t_0)` exactly and pushes each through the
/// scheme. Point `i` depends only on `(seed, i)`, so the output does not
/// depend on the worker count.
pub fn push_ensemble(
    field: &dyn VelocityField,
    schedule: &Schedule,
    n: usize,
    kind: IntegratorKind,
    seed: u64,
    track_logdet: bool,
) -> Result<PushedEnsemble> {
    if n == 0 {
        return Err(IlabError::Config("ensemble size must be positive".into()));
    }
    let dim = field.dim();
    if track_logdet && dim > MAX_TRACKED_DIM {
        return Err(IlabError::Config(format!(
            "density tracking is limited to d <= {MAX_TRACKED_DIM}, got {dim}"
        )));
    }
    let initial: GaussianMixture = field
        .marginal(schedule.start())
        .ok_or_else(|| IlabError::Contract("the field does not expose its marginal at t_0".into()))?;
    let frozen = FrozenSchedule::new(field, schedule, kind)?;
    let n_steps = frozen.schedule().n_steps();
    let n_chunks = n.div_ceil(CHUNK);

    let chunks: Vec<ChunkOut> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut ws = StepWorkspace::new(dim);
            let mut state = DVector::zeros(dim);
            let mut x0 = DVector::zeros(dim);
            let mut z = DVector::zeros(dim);
            let mut out = ChunkOut {
                points: Vec::with_capacity((hi - lo) * dim),
                indices: Vec::with_capacity(hi - lo),
                log_dets: Vec::new(),
                init: Vec::new(),
                max_dev: vec![0.0; if track_logdet { n_steps } else { 0 }],
                dropped: 0,
            };
            let mut devs = vec![0.0; out.max_dev.len()];
            for i in lo..hi {
                let mut rng = sample_rng(seed, i as u64);
                initial.draw_into(&mut rng, &mut x0, &mut z);
                let result = frozen.run(&x0, track_logdet, &mut ws, &mut state, |k, _, jac| {
                    if let Some(j) = jac {
                        devs[k] = identity_deviation(j);
                    }
                });
                match result {
                    Ok(logdet) => {
                        out.points.extend(state.iter());
                        out.indices.push(i);
                        if let Some(ld) = logdet {
                            out.log_dets.push(ld);
                            out.init
                                .push(initial.logpdf(x0.as_slice()).unwrap_or(f64::NEG_INFINITY));
                            for (m, d) in out.max_dev.iter_mut().zip(&devs) {
                                *m = f64::max(*m, *d);
                            }
                        }
                    }
                    Err(_) => out.dropped += 1,
                }
            }
            out
        })
        .collect();

    let mut ens = PushedEnsemble {
        dim,
        points: Vec::with_capacity(n * dim),
        indices: Vec::with_capacity(n),
        log_det_sums: track_logdet.then(|| Vec::with_capacity(n)),
        initial_log_density: track_logdet.then(|| Vec::with_capacity(n)),
        step_max_deviation: vec![0.0; if track_logdet { n_steps } else { 0 }],
        dropped: 0,
        requested: n,
    };
    for c in chunks {
        ens.points.extend(c.points);
        ens.indices.extend(c.indices);
        if let Some(v) = ens.log_det_sums.as_mut() {
            v.extend(c.log_dets);
        }
        if let Some(v) = ens.initial_log_density.as_mut() {
            v.extend(c.init);
        }
        for (m, d) in ens.step_max_deviation.iter_mut().zip(&c.max_dev) {
            *m = f64::max(*m, *d);
        }
        ens.dropped += c.dropped;
    }
    if ens.dropped as f64 > DROP_BUDGET * n as f64 {
        return Err(IlabError::DropBudget {
            dropped: ens.dropped,
            total: n,
        });
    }
    if ens.dropped > 0 {
        log::warn!("dropped {} of {} ensemble points", ens.dropped, n);
    }
    Ok(ens)
}

/// Outcome of the step-map diffeomorphism check.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffeoReport {
    /// `max |grad(step) - I|_F` over all probes and steps.
    pub max_dev: f64,
    pub per_step: Vec<f64>,
    /// Whether every `h_k` satisfies the step bound against `l_hat`
    /// (`1/(2L)` for Euler, `1/(4L)` for Heun).
    pub step_condition_holds: bool,
    /// `true` unless the step bound holds but `max_dev > 1/2`.
    pub condition_ok: bool,
}

/// Probes the step Jacobians at `probes` points drawn from `rho(t_k)` per step.
pub fn diffeo_check(
    field: &dyn VelocityField,
    schedule: &Schedule,
    kind: IntegratorKind,
    probes: usize,
    seed: u64,
    l_hat: f64,
) -> Result<DiffeoReport> {
    let frozen = FrozenSchedule::new(field, schedule, kind)?;
    let grid = frozen.schedule();
    let mut ws = StepWorkspace::new(field.dim());
    let mut per_step = Vec::with_capacity(grid.n_steps());
    for (k, (t_k, t_k1)) in grid.steps().enumerate() {
        let mut worst: f64 = 0.0;
        for x in probe_points(field, t_k, probes, crate::rng::derive_seed(seed, k as u64)) {
            apply_step(
                frozen.map,
                frozen.slices[k].as_ref(),
                frozen.slices[k + 1].as_ref(),
                t_k1 - t_k,
                &x,
                true,
                &mut ws,
            );
            worst = worst.max(identity_deviation(&ws.jac));
        }
        per_step.push(worst);
    }
    let max_dev = per_step.iter().copied().fold(0.0, f64::max);
    let bound = match frozen.map {
        StepMap::Euler => 0.5 / l_hat,
        StepMap::Heun => 0.25 / l_hat,
    };
    let step_condition_holds = grid.max_step() <= bound;
    Ok(DiffeoReport {
        max_dev,
        per_step,
        step_condition_holds,
        condition_ok: !step_condition_holds || max_dev <= 0.5,
    })
}
