//! Time grids `t_0 < t_1 < ... < t_N` for the integrators.
//!
//! The geometric grids put step sizes proportional to the latent variance,
//! `h_k ~ gamma^2`, so that steps shrink towards the endpoints where the
//! velocity field stiffens.

use serde::{Deserialize, Serialize};

use crate::error::{IlabError, Result};
use crate::interpolant::GammaSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Uniform,
    /// Symmetric geometric refinement towards both endpoints around `t = 1/2`.
    GeometricMid,
    /// `t_k = 1 - (1 - h)^k`, refining towards `t = 1` only.
    GeometricVp,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Uniform => "uniform",
            ScheduleKind::GeometricMid => "geometric-mid",
            ScheduleKind::GeometricVp => "geometric-vp",
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A strictly increasing time grid inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    times: Vec<f64>,
    kind: ScheduleKind,
}

impl Schedule {
    pub fn from_times(times: Vec<f64>, kind: ScheduleKind) -> Result<Self> {
        if times.len() < 2 {
            return Err(IlabError::Config("a schedule needs at least two times".into()));
        }
        if times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(IlabError::Config("schedule times must lie in [0, 1]".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(IlabError::Config("schedule times must be strictly increasing".into()));
        }
        Ok(Schedule { times, kind })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of steps `N`.
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Iterates `(t_k, t_{k+1})` pairs.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn step_sizes(&self) -> Vec<f64> {
        self.steps().map(|(a, b)| b - a).collect()
    }

    pub fn max_step(&self) -> f64 {
        self.step_sizes().into_iter().fold(0.0, f64::max)
    }

    /// Splits every step into `subdivision` equal sub-steps.
    pub fn refine(&self, subdivision: usize) -> Schedule {
        let sub = subdivision.max(1);
        let mut times = Vec::with_capacity(self.n_steps() * sub + 1);
        for (a, b) in self.steps() {
            for j in 0..sub {
                times.push(a + (b - a) * (j as f64) / (sub as f64));
            }
        }
        times.push(self.end());
        Schedule { times, kind: self.kind }
    }

    /// Largest `h_k / inf_{[t_k, t_{k+1}]} gamma^2` over the grid.
    pub fn max_step_to_variance(&self, gamma: &GammaSchedule) -> f64 {
        self.steps()
            .map(|(a, b)| (b - a) / gamma.inf_gamma_sq(a, b))
            .fold(0.0, f64::max)
    }
}

fn check_step_scale(h: f64) -> Result<()> {
    if !(h > 0.0 && h < 1.0) {
        return Err(IlabError::Config(format!("step scale h must lie in (0, 1), got {h}")));
    }
    Ok(())
}

fn check_delta(name: &str, delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(IlabError::Config(format!("{name} must lie in (0, 1/2), got {delta}")));
    }
    Ok(())
}

/// Builds a time grid.
///
/// * `GeometricMid`: `t_k = (1-h)^{m-k} / 2` for `k <= m` and
///   `t_k = 1 - (1-h)^{k-m} / 2` beyond, with `m` the smallest index reaching
///   `delta_start`; the tail stops at the first `1 - t_k <= delta_end` and the
///   endpoints are clamped to exactly `delta_start` and `1 - delta_end`.
/// * `GeometricVp`: `t_k = 1 - (1-h)^k` from `t_0 = 0`, stopping at the first
///   `1 - t_k <= delta_end`; `delta_start` is ignored.
/// * `Uniform`: `ceil((t_N - t_0) / h)` equal steps on
///   `[delta_start, 1 - delta_end]`.
pub fn make_schedule(kind: ScheduleKind, h: f64, delta_start: f64, delta_end: f64) -> Result<Schedule> {
    check_step_scale(h)?;
    check_delta("delta_end", delta_end)?;
    if kind != ScheduleKind::GeometricVp {
        check_delta("delta_start", delta_start)?;
    }
    let ratio = 1.0 - h;
    let times = match kind {
        ScheduleKind::GeometricMid => {
            let mut m = 0i32;
            while 0.5 * ratio.powi(m) > delta_start {
                m += 1;
            }
            let mut times: Vec<f64> = (0..=m).map(|k| 0.5 * ratio.powi(m - k)).collect();
            let mut j = 1i32;
            loop {
                let gap = 0.5 * ratio.powi(j);
                times.push(1.0 - gap);
                if gap <= delta_end {
                    break;
                }
                j += 1;
            }
            times[0] = delta_start;
            *times.last_mut().unwrap() = 1.0 - delta_end;
            times
        }
        ScheduleKind::GeometricVp => {
            let mut times = vec![0.0];
            let mut k = 1i32;
            loop {
                let gap = ratio.powi(k);
                times.push(1.0 - gap);
                if gap <= delta_end {
                    break;
                }
                k += 1;
            }
            times
        }
        ScheduleKind::Uniform => {
            let (t0, tn) = (delta_start, 1.0 - delta_end);
            // Guard against ceil(2.0000000000000004) = 3.
            let n = ((tn - t0) / h - 1e-9).ceil().max(1.0) as usize;
            let mut times: Vec<f64> = (0..=n).map(|k| t0 + (tn - t0) * (k as f64) / (n as f64)).collect();
            times[n] = tn;
            times
        }
    };
    Schedule::from_times(times, kind)
}

/// The reference step count `h^-1 log(1/(t_0 (1 - t_N)))` for the geometric
/// grids (`h^-1 log(1/delta_end)` for the VP grid); measured `N` should stay
/// within a constant factor of it.
pub fn predicted_steps(kind: ScheduleKind, h: f64, delta_start: f64, delta_end: f64) -> f64 {
    match kind {
        ScheduleKind::GeometricMid => (1.0 / (delta_start * delta_end)).ln() / h,
        ScheduleKind::GeometricVp => (1.0 / delta_end).ln() / h,
        ScheduleKind::Uniform => (1.0 - delta_start - delta_end) / h,
    }
}
