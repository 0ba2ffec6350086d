//! Total-variation estimators, transport-equation residuals and log-log fits.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{check_dim, IlabError, Result};
use crate::field::{VelocityField, Want};
use crate::interpolant::InterpolantSpec;
use crate::mixture::GaussianMixture;
use crate::mixture_field::{marginal_mixture, MixtureField};
use crate::solvers::PushedEnsemble;

pub const JACKKNIFE_FOLDS: usize = 20;
pub const MIN_HISTOGRAM_SAMPLES: usize = 1000;
pub const MAX_HISTOGRAM_DIM: usize = 3;
pub const MAX_TOTAL_BINS: usize = 10_000_000;
pub const DEFAULT_FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TvMethod {
    Histogram,
    DensityRatio,
}

impl TvMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            TvMethod::Histogram => "histogram",
            TvMethod::DensityRatio => "density-ratio",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvEstimate {
    pub value: f64,
    pub stderr: f64,
    pub method: TvMethod,
    pub n_used: usize,
}

/// Regular grid with out-of-range samples clamped into the edge bins.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramGrid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    bins_per_dim: usize,
}

impl HistogramGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, bins_per_dim: usize) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        if lower.is_empty()
            || lower
                .iter()
                .zip(&upper)
                .any(|(l, u)| !(u > l) || !l.is_finite() || !u.is_finite())
        {
            return Err(IlabError::Config(
                "histogram grid needs finite upper > lower in every dimension".into(),
            ));
        }
        let total = (bins_per_dim as f64).powi(lower.len() as i32);
        if bins_per_dim == 0 || total > MAX_TOTAL_BINS as f64 {
            return Err(IlabError::Config(format!(
                "histogram grid must have between 1 and {MAX_TOTAL_BINS} bins"
            )));
        }
        Ok(HistogramGrid {
            lower,
            upper,
            bins_per_dim,
        })
    }

    /// 100 bins per dimension in 1-d, 60 in 2-d, 30 in 3-d.
    pub fn default_bins(dim: usize) -> usize {
        match dim {
            1 => 100,
            2 => 60,
            _ => 30,
        }
    }

    /// Range of the reference samples padded by three bin widths per side.
    pub fn from_reference(samples: &[f64], dim: usize, bins_per_dim: usize) -> Result<Self> {
        if dim == 0 || samples.is_empty() || samples.len() % dim != 0 {
            return Err(IlabError::Shape {
                expected: dim,
                got: samples.len(),
            });
        }
        let mut lower = vec![f64::INFINITY; dim];
        let mut upper = vec![f64::NEG_INFINITY; dim];
        for row in samples.chunks_exact(dim) {
            for k in 0..dim {
                lower[k] = lower[k].min(row[k]);
                upper[k] = upper[k].max(row[k]);
            }
        }
        let bins = bins_per_dim.max(7) as f64;
        for k in 0..dim {
            // (u - l + 6w) / bins = w  =>  w = (u - l) / (bins - 6)
            let span = (upper[k] - lower[k]).max(1e-12);
            let w = span / (bins - 6.0);
            lower[k] -= 3.0 * w;
            upper[k] += 3.0 * w;
        }
        HistogramGrid::new(lower, upper, bins_per_dim)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn bins_per_dim(&self) -> usize {
        self.bins_per_dim
    }

    fn bin_of(&self, x: &[f64]) -> usize {
        let b = self.bins_per_dim;
        let mut flat = 0usize;
        for k in (0..self.dim()).rev() {
            let u = (x[k] - self.lower[k]) / (self.upper[k] - self.lower[k]) * b as f64;
            let i = if u.is_nan() {
                0
            } else {
                (u.floor().max(0.0) as usize).min(b - 1)
            };
            flat = flat * b + i;
        }
        flat
    }
}

fn histogram_tv(p: &[u32], q: &[u32], n: f64, m: f64) -> f64 {
    let s: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| (a as f64 / n - b as f64 / m).abs())
        .sum();
    (0.5 * s).clamp(0.0, 1.0)
}

/// `1/2 sum_b |p_b - q_b|` with a 20-fold jackknife standard error.
pub fn tv_histogram(samples_p: &[f64], samples_q: &[f64], dim: usize, grid: &HistogramGrid) -> Result<TvEstimate> {
    if dim > MAX_HISTOGRAM_DIM {
        return Err(IlabError::Estimator(format!(
            "histogram TV is limited to d <= {MAX_HISTOGRAM_DIM}; use the density-ratio estimator for d = {dim}"
        )));
    }
    check_dim(grid.dim(), dim)?;
    for s in [samples_p, samples_q] {
        if s.len() % dim != 0 {
            return Err(IlabError::Shape {
                expected: dim,
                got: s.len() % dim,
            });
        }
    }
    let (n, m) = (samples_p.len() / dim, samples_q.len() / dim);
    if n < MIN_HISTOGRAM_SAMPLES || m < MIN_HISTOGRAM_SAMPLES {
        return Err(IlabError::Estimator(format!(
            "histogram TV needs at least {MIN_HISTOGRAM_SAMPLES} samples per side, got {n} and {m}"
        )));
    }
    let bins_p: Vec<usize> = samples_p.par_chunks_exact(dim).map(|x| grid.bin_of(x)).collect();
    let bins_q: Vec<usize> = samples_q.par_chunks_exact(dim).map(|x| grid.bin_of(x)).collect();

    // Compact the occupied bins so per-fold work scales with the data.
    let mut used: Vec<usize> = bins_p.iter().chain(&bins_q).copied().collect();
    used.par_sort_unstable();
    used.dedup();
    let id = |b: usize| used.binary_search(&b).unwrap();
    let ids_p: Vec<usize> = bins_p.iter().map(|&b| id(b)).collect();
    let ids_q: Vec<usize> = bins_q.iter().map(|&b| id(b)).collect();

    let count = |ids: &[usize]| {
        let mut c = vec![0u32; used.len()];
        ids.iter().for_each(|&i| c[i] += 1);
        c
    };
    let full_p = count(&ids_p);
    let full_q = count(&ids_q);
    let value = histogram_tv(&full_p, &full_q, n as f64, m as f64);

    let k = JACKKNIFE_FOLDS;
    let fold = |len: usize, f: usize| (f * len / k)..((f + 1) * len / k);
    let loo: Vec<f64> = (0..k)
        .into_par_iter()
        .map(|f| {
            let mut p = full_p.clone();
            let mut q = full_q.clone();
            let (rp, rq) = (fold(n, f), fold(m, f));
            ids_p[rp.clone()].iter().for_each(|&i| p[i] -= 1);
            ids_q[rq.clone()].iter().for_each(|&i| q[i] -= 1);
            histogram_tv(&p, &q, (n - rp.len()) as f64, (m - rq.len()) as f64)
        })
        .collect();
    let mean = loo.iter().sum::<f64>() / k as f64;
    let var = loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (k - 1) as f64 / k as f64;
    Ok(TvEstimate {
        value,
        stderr: var.sqrt(),
        method: TvMethod::Histogram,
        n_used: n.min(m),
    })
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Monte-Carlo mean of `(1 - rho(y) / rho_hat(y))_+` over the pushed points.
pub fn tv_density_ratio<F>(ensemble: &PushedEnsemble, true_logpdf: F) -> Result<TvEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if ensemble.log_det_sums.is_none() || ensemble.initial_log_density.is_none() {
        return Err(IlabError::Contract(
            "density-ratio TV needs an ensemble pushed with density tracking".into(),
        ));
    }
    let n = ensemble.len();
    if n < 2 {
        return Err(IlabError::Estimator(
            "density-ratio TV needs at least two points".into(),
        ));
    }
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let log_hat = ensemble.log_density(i).unwrap();
            let log_true = true_logpdf(ensemble.point(i));
            let r = (log_true - log_hat).exp();
            if r.is_nan() {
                1.0
            } else {
                (1.0 - r).max(0.0)
            }
        })
        .collect();
    let mean = pairwise_sum(&terms) / n as f64;
    let dev: Vec<f64> = terms.iter().map(|v| (v - mean).powi(2)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    Ok(TvEstimate {
        value: mean.clamp(0.0, 1.0),
        stderr: (var / n as f64).sqrt(),
        method: TvMethod::DensityRatio,
        n_used: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuityReport {
    /// `|d rho/dt + div(rho b)|` at the requested finite-difference step.
    pub residual: f64,
    pub density: f64,
    /// Residual recomputed at half the step.
    pub residual_half_step: f64,
    /// `false` when the two residuals differ by more than a factor of 10.
    pub richardson_ok: bool,
}

fn marginal_pdf(
    rho0: &GaussianMixture,
    rho1: &GaussianMixture,
    spec: &InterpolantSpec,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    marginal_mixture(rho0, rho1, spec, t)?.pdf(x)
}

/// Transport-equation residual with the Richardson check.
pub fn continuity_report(
    rho0: &GaussianMixture,
    rho1: &GaussianMixture,
    spec: &InterpolantSpec,
    t: f64,
    x: &DVector<f64>,
    fd_step: f64,
) -> Result<ContinuityReport> {
    if !(fd_step > 0.0) || !spec.admits_time(t - fd_step) || !spec.admits_time(t + fd_step) {
        return Err(IlabError::Domain(format!(
            "t +- fd_step must stay inside the interpolant's domain (t = {t}, step = {fd_step})"
        )));
    }
    let field = MixtureField::new(rho0.clone(), rho1.clone(), *spec)?;
    let ev = field.eval(t, x, Want::ALL)?;
    let xs = x.as_slice();
    let rho = marginal_pdf(rho0, rho1, spec, t, xs)?;
    // div(rho b) = rho (div b + s . b)
    let flux = rho * (ev.divergence.unwrap() + ev.score.as_ref().unwrap().dot(&ev.b));
    let residual_at = |h: f64| -> Result<f64> {
        let dt = (marginal_pdf(rho0, rho1, spec, t + h, xs)? - marginal_pdf(rho0, rho1, spec, t - h, xs)?) / (2.0 * h);
        Ok((dt + flux).abs())
    };
    let residual = residual_at(fd_step)?;
    let residual_half_step = residual_at(0.5 * fd_step)?;
    let floor = 1e-12 * rho.max(1e-300);
    let (lo, hi) = (residual.min(residual_half_step), residual.max(residual_half_step));
    Ok(ContinuityReport {
        residual,
        density: rho,
        residual_half_step,
        richardson_ok: hi <= 10.0 * lo + floor,
    })
}

/// `|d rho/dt + div(rho b)|` at `(t, x)`, time derivative by central differences.
pub fn continuity_residual(
    rho0: &GaussianMixture,
    rho1: &GaussianMixture,
    spec: &InterpolantSpec,
    t: f64,
    x: &DVector<f64>,
    fd_step: f64,
) -> Result<f64> {
    Ok(continuity_report(rho0, rho1, spec, t, x, fd_step)?.residual)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
    pub slope_stderr: f64,
}

impl SlopeFit {
    /// Half-width of the two-sided Student-t interval for the slope.
    pub fn slope_ci_half_width(&self, level: f64) -> f64 {
        let dof = (self.n_points - 2) as f64;
        let t = StudentsT::new(0.0, 1.0, dof)
            .map(|d| d.inverse_cdf(0.5 + 0.5 * level))
            .unwrap_or(f64::INFINITY);
        t * self.slope_stderr
    }
}

/// Ordinary least squares of `log err` on `log h`.
pub fn fit_loglog_slope(pairs: &[(f64, f64)]) -> Result<SlopeFit> {
    if pairs.len() < 3 {
        return Err(IlabError::Domain(format!(
            "a slope fit needs at least 3 points, got {}",
            pairs.len()
        )));
    }
    if pairs
        .iter()
        .any(|&(h, e)| !(h > 0.0) || !(e > 0.0) || !h.is_finite() || !e.is_finite())
    {
        return Err(IlabError::Domain("log-log fit needs positive finite inputs".into()));
    }
    let mut hs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    hs.sort_by(f64::total_cmp);
    if hs.windows(2).any(|w| w[0] == w[1]) {
        return Err(IlabError::Domain("log-log fit needs distinct abscissae".into()));
    }
    let n = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    // A flat series carries no trend to explain.
    let r_squared = if syy > 1e-300 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let slope_stderr = (ss_res.max(0.0) / (n - 2.0) / sxx).sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        r_squared,
        n_points: pairs.len(),
        slope_stderr,
    })
}
