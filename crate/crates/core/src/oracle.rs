//! Monte-Carlo oracle for the velocity field, independent of the closed form.
//!
//! Draws `(x0, x1) ~ rho0 x rho1`, weights each by `N(x; I(t, x0, x1), gamma^2 I)`
//! and averages `alpha' x0 + beta' x1 + (gamma gamma' / gamma^2) (x - I)`, the
//! latent part having been integrated out analytically.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{check_dim, IlabError, Result};
use crate::interpolant::{InterpolantMode, InterpolantSpec};
use crate::mixture::GaussianMixture;
use crate::rng::{derive_seed, sample_rng};

/// Minimum oracle sample count.
pub const MIN_ORACLE_SAMPLES: usize = 10_000;
/// Effective sample sizes below this mark the estimate as unreliable.
pub const MIN_EFFECTIVE_SAMPLES: f64 = 100.0;

const CHUNK: usize = 1 << 16;

#[derive(Debug, Clone)]
pub struct OracleEstimate {
    pub b_hat: DVector<f64>,
    pub stderr: DVector<f64>,
    /// Kish effective sample size `(sum w)^2 / sum w^2`.
    pub ess: f64,
    pub unreliable: bool,
}

/// Weighted sums of one chunk, all relative to `exp(max_log_w)`.
#[derive(Clone)]
struct Sums {
    max_log_w: f64,
    w: f64,
    w2: f64,
    wf: Vec<f64>,
    w2f: Vec<f64>,
    w2ff: Vec<f64>,
}

impl Sums {
    fn empty(d: usize) -> Self {
        Sums {
            max_log_w: f64::NEG_INFINITY,
            w: 0.0,
            w2: 0.0,
            wf: vec![0.0; d],
            w2f: vec![0.0; d],
            w2ff: vec![0.0; d],
        }
    }

    fn rescale(&mut self, to: f64) {
        if self.max_log_w == f64::NEG_INFINITY {
            self.max_log_w = to;
            return;
        }
        let s = (self.max_log_w - to).exp();
        let s2 = s * s;
        self.w *= s;
        self.wf.iter_mut().for_each(|v| *v *= s);
        self.w2 *= s2;
        self.w2f.iter_mut().for_each(|v| *v *= s2);
        self.w2ff.iter_mut().for_each(|v| *v *= s2);
        self.max_log_w = to;
    }

    fn merge(mut self, mut other: Sums) -> Sums {
        let m = self.max_log_w.max(other.max_log_w);
        if m == f64::NEG_INFINITY {
            return self;
        }
        self.rescale(m);
        other.rescale(m);
        self.w += other.w;
        self.w2 += other.w2;
        for k in 0..self.wf.len() {
            self.wf[k] += other.wf[k];
            self.w2f[k] += other.w2f[k];
            self.w2ff[k] += other.w2ff[k];
        }
        self
    }
}

struct Sampler<'a> {
    rho0: &'a GaussianMixture,
    rho1: &'a GaussianMixture,
    two_sided: bool,
    alpha: f64,
    dalpha: f64,
    beta: f64,
    dbeta: f64,
    inv_gamma_sq: f64,
    ratio: f64,
    x: &'a DVector<f64>,
}

impl Sampler<'_> {
    /// Accumulates `count` samples of `f - center` from one RNG stream.
    fn chunk(&self, seed: u64, count: usize, center: &[f64]) -> Sums {
        let d = self.x.len();
        let mut rng = sample_rng(seed, 0);
        let mut x0 = DVector::zeros(d);
        let mut x1 = DVector::zeros(d);
        let mut z = DVector::zeros(d);
        let mut log_w = Vec::with_capacity(count);
        let mut f = Vec::with_capacity(count * d);
        for _ in 0..count {
            if self.two_sided {
                self.rho0.draw_into(&mut rng, &mut x0, &mut z);
            }
            self.rho1.draw_into(&mut rng, &mut x1, &mut z);
            let mut dist2 = 0.0;
            for k in 0..d {
                let interp = self.alpha * x0[k] + self.beta * x1[k];
                let r = self.x[k] - interp;
                dist2 += r * r;
                f.push(self.dalpha * x0[k] + self.dbeta * x1[k] + self.ratio * r - center[k]);
            }
            log_w.push(-0.5 * dist2 * self.inv_gamma_sq);
        }
        let mut s = Sums::empty(d);
        s.max_log_w = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, lw) in log_w.iter().enumerate() {
            let w = (lw - s.max_log_w).exp();
            let w2 = w * w;
            s.w += w;
            s.w2 += w2;
            for k in 0..d {
                let fk = f[i * d + k];
                s.wf[k] += w * fk;
                s.w2f[k] += w2 * fk;
                s.w2ff[k] += w2 * fk * fk;
            }
        }
        s
    }
}

/// Self-normalized importance-sampling estimate of `b(t, x)` with its
/// delta-method standard error.
pub fn oracle_velocity_mc(
    rho0: &GaussianMixture,
    rho1: &GaussianMixture,
    spec: &InterpolantSpec,
    t: f64,
    x: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<OracleEstimate> {
    check_dim(rho1.dim(), rho0.dim())?;
    check_dim(rho1.dim(), x.len())?;
    if n < MIN_ORACLE_SAMPLES {
        return Err(IlabError::Config(format!(
            "oracle needs at least {MIN_ORACLE_SAMPLES} samples, got {n}"
        )));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(IlabError::Domain(format!("oracle time must lie in (0, 1), got {t}")));
    }
    spec.validate()?;
    let c = spec.coefficients(t)?;
    if !(c.gamma_sq > 0.0) {
        return Err(IlabError::Domain(format!("oracle needs gamma(t) > 0 at t = {t}")));
    }
    let d = x.len();
    let sampler = Sampler {
        rho0,
        rho1,
        two_sided: spec.mode == InterpolantMode::TwoSided,
        alpha: c.alpha,
        dalpha: c.dalpha,
        beta: c.beta,
        dbeta: c.dbeta,
        inv_gamma_sq: 1.0 / c.gamma_sq,
        ratio: c.gamma_dgamma / c.gamma_sq,
        x,
    };

    // A pilot estimate centers f so the second-moment sums do not cancel.
    let zero = vec![0.0; d];
    let pilot = sampler.chunk(derive_seed(seed, u64::MAX), CHUNK.min(n), &zero);
    let center: Vec<f64> = pilot.wf.iter().map(|v| v / pilot.w).collect();

    let n_chunks = n.div_ceil(CHUNK);
    let parts: Vec<Sums> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let count = CHUNK.min(n - c * CHUNK);
            sampler.chunk(derive_seed(seed, c as u64), count, &center)
        })
        .collect();
    let s = parts.into_iter().fold(Sums::empty(d), Sums::merge);

    let mut b_hat = DVector::zeros(d);
    let mut stderr = DVector::zeros(d);
    for k in 0..d {
        let mean = s.wf[k] / s.w;
        b_hat[k] = center[k] + mean;
        let num = s.w2ff[k] - 2.0 * mean * s.w2f[k] + mean * mean * s.w2;
        stderr[k] = (num.max(0.0)).sqrt() / s.w;
    }
    let ess = s.w * s.w / s.w2;
    if !ess.is_finite() || b_hat.iter().any(|v| !v.is_finite()) {
        return Err(IlabError::Estimator(
            "oracle weights underflowed at every sample".into(),
        ));
    }
    let unreliable = ess < MIN_EFFECTIVE_SAMPLES;
    if unreliable {
        log::warn!("oracle effective sample size {ess:.1} at t = {t}");
    }
    Ok(OracleEstimate {
        b_hat,
        stderr,
        ess,
        unreliable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::GaussianComponent;

    fn n1(mean: f64) -> GaussianMixture {
        GaussianMixture::isotropic_gaussian(DVector::from_vec(vec![mean]), 1.0).unwrap()
    }

    #[test]
    fn symmetric_case_is_centred() {
        let spec = InterpolantSpec::brownian_bridge(1.0).unwrap();
        let est = oracle_velocity_mc(
            &n1(0.0),
            &n1(0.0),
            &spec,
            0.3,
            &DVector::from_vec(vec![0.7]),
            200_000,
            3,
        )
        .unwrap();
        assert!(est.b_hat[0].abs() < 3.0 * est.stderr[0], "{est:?}");
        assert!(!est.unreliable);
    }

    #[test]
    fn straight_transport_gives_two() {
        let spec = InterpolantSpec::brownian_bridge(1.0).unwrap();
        let est = oracle_velocity_mc(
            &n1(0.0),
            &n1(2.0),
            &spec,
            0.6,
            &DVector::from_vec(vec![1.5]),
            200_000,
            4,
        )
        .unwrap();
        assert!((est.b_hat[0] - 2.0).abs() < 3.0 * est.stderr[0], "{est:?}");
    }

    #[test]
    fn stderr_shrinks_like_root_n() {
        let spec = InterpolantSpec::brownian_bridge(1.0).unwrap();
        let x = DVector::from_vec(vec![0.4]);
        let a = oracle_velocity_mc(&n1(0.0), &n1(2.0), &spec, 0.5, &x, 40_000, 5).unwrap();
        let b = oracle_velocity_mc(&n1(0.0), &n1(2.0), &spec, 0.5, &x, 640_000, 5).unwrap();
        let ratio = a.stderr[0] / b.stderr[0];
        assert!((3.0..5.3).contains(&ratio), "{ratio}");
    }

    #[test]
    fn far_tail_sets_warning() {
        let spec = InterpolantSpec::brownian_bridge(1.0).unwrap();
        let est = oracle_velocity_mc(&n1(0.0), &n1(0.0), &spec, 0.5, &DVector::from_vec(vec![9.0]), 10_000, 6).unwrap();
        assert!(est.unreliable && est.ess < 100.0);
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = InterpolantSpec::brownian_bridge(1.0).unwrap();
        let rho1 = GaussianMixture::new(vec![
            GaussianComponent::isotropic(0.3, DVector::from_vec(vec![-1.0]), 0.2).unwrap(),
            GaussianComponent::isotropic(0.7, DVector::from_vec(vec![2.0]), 0.5).unwrap(),
        ])
        .unwrap();
        let x = DVector::from_vec(vec![0.3]);
        let a = oracle_velocity_mc(&n1(0.0), &rho1, &spec, 0.5, &x, 100_000, 9).unwrap();
        let b = oracle_velocity_mc(&n1(0.0), &rho1, &spec, 0.5, &x, 100_000, 9).unwrap();
        assert_eq!(a.b_hat, b.b_hat);
        assert_eq!(a.stderr, b.stderr);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = InterpolantSpec::brownian_bridge(1.0).unwrap();
        let x = DVector::from_vec(vec![0.0]);
        assert!(matches!(
            oracle_velocity_mc(&n1(0.0), &n1(0.0), &spec, 0.5, &x, 100, 0),
            Err(IlabError::Config(_))
        ));
        assert!(matches!(
            oracle_velocity_mc(&n1(0.0), &n1(0.0), &spec, 1.0, &x, 10_000, 0),
            Err(IlabError::Domain(_))
        ));
    }
}
