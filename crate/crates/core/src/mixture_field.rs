//! Closed-form velocity, score and Jacobian for Gaussian-mixture endpoints
//! under the independent coupling `rho0 x rho1`.
//!
//! Conditioned on the component pair `(i, j)`, the pair `(dx_t/dt, x_t)` is
//! jointly Gaussian, so
//!
//! ```text
//! E[dx/dt | x_t = x, (i, j)] = v_ij + A_ij C_ij^{-1} (x - m_ij)
//! ```
//!
//! with `m_ij`, `C_ij` the pair mean/covariance of `x_t` and `A_ij` the
//! cross-covariance `Cov(dx/dt, x_t)`. The marginal field mixes these with
//! posterior responsibilities `r_ij(x)`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{check_dim, IlabError, Result};
use crate::field::{FrozenField, Scratch, VelocityEval, VelocityField, Want};
use crate::interpolant::{InterpolantMode, InterpolantSpec};
use crate::mixture::{GaussianComponent, GaussianMixture};

/// Default cap on `K0 * K1`.
pub const DEFAULT_MAX_PAIRS: usize = 4096;

/// Log-weights below this (after max-normalization is impossible) trigger
/// the nearest-pair fallback.
const UNDERFLOW_LOG_WEIGHT: f64 = -700.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Sufficient statistics of one component pair at a fixed time.
#[derive(Debug, Clone)]
pub struct PairMoment {
    pub log_weight: f64,
    /// `m_ij = alpha mu_i + beta nu_j`.
    pub mean: DVector<f64>,
    /// `C_ij = alpha^2 Sigma_i + beta^2 Gamma_j + gamma^2 I`.
    pub cov: DMatrix<f64>,
    /// `A_ij = alpha alpha' Sigma_i + beta beta' Gamma_j + gamma gamma' I`.
    pub cross: DMatrix<f64>,
    /// `E[dx/dt | (i, j)] = alpha' mu_i + beta' nu_j`.
    pub velocity_mean: DVector<f64>,
}

/// Pair moments for all component pairs at time `t`.
///
/// The one-sided interpolant does not involve `rho0`; its pairs run over the
/// components of `rho1` only.
pub fn pair_moments(
    rho0: &GaussianMixture,
    rho1: &GaussianMixture,
    spec: &InterpolantSpec,
    t: f64,
) -> Result<Vec<PairMoment>> {
    check_dim(rho0.dim(), rho1.dim())?;
    let c = spec.coefficients(t)?;
    let d = rho1.dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let pair = |w: f64, src: Option<&GaussianComponent>, dst: &GaussianComponent| {
        let mut mean = dst.mean() * c.beta;
        let mut cov = dst.cov() * (c.beta * c.beta) + &eye * c.gamma_sq;
        let mut cross = dst.cov() * (c.beta * c.dbeta) + &eye * c.gamma_dgamma;
        let mut velocity_mean = dst.mean() * c.dbeta;
        if let Some(src) = src {
            mean += src.mean() * c.alpha;
            cov += src.cov() * (c.alpha * c.alpha);
            cross += src.cov() * (c.alpha * c.dalpha);
            velocity_mean += src.mean() * c.dalpha;
        }
        PairMoment {
            log_weight: w.ln(),
            mean,
            cov,
            cross,
            velocity_mean,
        }
    };
    Ok(match spec.mode {
        InterpolantMode::TwoSided => rho0
            .components()
            .iter()
            .flat_map(|a| rho1.components().iter().map(move |b| (a, b)))
            .map(|(a, b)| pair(a.weight() * b.weight(), Some(a), b))
            .collect(),
        InterpolantMode::OneSidedVp => rho1.components().iter().map(|b| pair(b.weight(), None, b)).collect(),
    })
}

fn check_time(spec: &InterpolantSpec, t: f64) -> Result<()> {
    if !spec.admits_time(t) {
        return Err(IlabError::Domain(format!(
            "time {t} is outside the open domain of the {:?} interpolant",
            spec.mode
        )));
    }
    Ok(())
}

/// Law of `x_t` under the independent coupling: one component per pair.
pub fn marginal_mixture(
    rho0: &GaussianMixture,
    rho1: &GaussianMixture,
    spec: &InterpolantSpec,
    t: f64,
) -> Result<GaussianMixture> {
    check_time(spec, t)?;
    let comps = pair_moments(rho0, rho1, spec, t)?
        .into_iter()
        .map(|p| GaussianComponent::new(p.log_weight.exp(), p.mean, p.cov))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            IlabError::Factorization { .. } => IlabError::Domain(format!("marginal at t = {t} is degenerate")),
            other => other,
        })?;
    GaussianMixture::new(comps)
}

/// Exact velocity field of the interpolant between two Gaussian mixtures.
#[derive(Debug, Clone)]
pub struct MixtureField {
    rho0: GaussianMixture,
    rho1: GaussianMixture,
    spec: InterpolantSpec,
}

impl MixtureField {
    pub fn new(rho0: GaussianMixture, rho1: GaussianMixture, spec: InterpolantSpec) -> Result<Self> {
        Self::with_pair_cap(rho0, rho1, spec, DEFAULT_MAX_PAIRS)
    }

    pub fn with_pair_cap(
        rho0: GaussianMixture,
        rho1: GaussianMixture,
        spec: InterpolantSpec,
        max_pairs: usize,
    ) -> Result<Self> {
        check_dim(rho0.dim(), rho1.dim())?;
        spec.validate()?;
        let pairs = match spec.mode {
            InterpolantMode::TwoSided => rho0.len() * rho1.len(),
            InterpolantMode::OneSidedVp => rho1.len(),
        };
        if pairs > max_pairs {
            return Err(IlabError::Config(format!(
                "{pairs} component pairs exceed the cap of {max_pairs}"
            )));
        }
        Ok(MixtureField { rho0, rho1, spec })
    }

    pub fn rho0(&self) -> &GaussianMixture {
        &self.rho0
    }

    pub fn rho1(&self) -> &GaussianMixture {
        &self.rho1
    }

    pub fn spec(&self) -> &InterpolantSpec {
        &self.spec
    }

    /// Factorizes the pair moments at `t`.
    pub fn freeze(&self, t: f64) -> Result<FrozenMixture> {
        check_time(&self.spec, t)?;
        let d = self.rho1.dim();
        let pairs = pair_moments(&self.rho0, &self.rho1, &self.spec, t)?
            .into_iter()
            .map(|p| {
                let chol = Cholesky::new(p.cov.clone())
                    .ok_or_else(|| IlabError::Domain(format!("pair covariance singular at t = {t}")))?;
                let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let precision = chol.inverse();
                let gain = &p.cross * &precision;
                Ok(FrozenPair {
                    log_norm: p.log_weight - 0.5 * (d as f64 * LN_2PI + log_det),
                    mean: p.mean,
                    velocity_mean: p.velocity_mean,
                    precision,
                    gain,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FrozenMixture { t, dim: d, pairs })
    }
}

impl VelocityField for MixtureField {
    fn dim(&self) -> usize {
        self.rho1.dim()
    }

    fn at(&self, t: f64) -> Result<Box<dyn FrozenField + '_>> {
        Ok(Box::new(self.freeze(t)?))
    }

    fn marginal(&self, t: f64) -> Option<GaussianMixture> {
        marginal_mixture(&self.rho0, &self.rho1, &self.spec, t).ok()
    }
}

#[derive(Debug, Clone)]
struct FrozenPair {
    log_norm: f64,
    mean: DVector<f64>,
    velocity_mean: DVector<f64>,
    precision: DMatrix<f64>,
    /// `A C^{-1}`: the Jacobian of the pair-conditional velocity.
    gain: DMatrix<f64>,
}

/// Mixture field with its pair moments factorized at one time.
#[derive(Debug, Clone)]
pub struct FrozenMixture {
    t: f64,
    dim: usize,
    pairs: Vec<FrozenPair>,
}

impl FrozenField for FrozenMixture {
    fn time(&self) -> f64 {
        self.t
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &DVector<f64>, want: Want, out: &mut VelocityEval, s: &mut Scratch) {
        let k = self.pairs.len();
        s.ensure(k, self.dim);
        out.prepare(want);

        for (p, pair) in self.pairs.iter().enumerate() {
            let diff = &mut s.diffs[p];
            diff.copy_from(x);
            *diff -= &pair.mean;
            // g = -C^{-1} (x - m): gradient of the pair log-density.
            s.grads[p].gemv(-1.0, &pair.precision, diff, 0.0);
            s.log_w[p] = pair.log_norm + 0.5 * diff.dot(&s.grads[p]);
            s.vels[p].copy_from(&pair.velocity_mean);
            s.vels[p].gemv(1.0, &pair.gain, diff, 1.0);
        }

        let (argmax, max) =
            s.log_w.iter().copied().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
            );
        if max < UNDERFLOW_LOG_WEIGHT || !max.is_finite() {
            out.far_tail = true;
            for (p, w) in s.log_w.iter_mut().enumerate() {
                *w = if p == argmax { 1.0 } else { 0.0 };
            }
        } else {
            let mut total = 0.0;
            for w in s.log_w.iter_mut() {
                *w = (*w - max).exp();
                total += *w;
            }
            for w in s.log_w.iter_mut() {
                *w /= total;
            }
        }
        let resp = &s.log_w;

        out.b.fill(0.0);
        for p in 0..k {
            out.b.axpy(resp[p], &s.vels[p], 1.0);
        }

        let need_mean_grad = want.score || want.needs_jacobian();
        if need_mean_grad {
            let mean_grad = s.tmp.as_mut().unwrap();
            mean_grad.fill(0.0);
            for p in 0..k {
                mean_grad.axpy(resp[p], &s.grads[p], 1.0);
            }
            if let Some(score) = out.score.as_mut() {
                score.copy_from(mean_grad);
            }
            if let Some(jac) = out.jacobian.as_mut() {
                jac.fill(0.0);
                for p in 0..k {
                    if resp[p] == 0.0 {
                        continue;
                    }
                    *jac += &self.pairs[p].gain * resp[p];
                    // Responsibility gradient: r_p (g_p - g_bar).
                    s.grads[p] -= &*mean_grad;
                    jac.ger(resp[p], &s.vels[p], &s.grads[p], 1.0);
                }
            }
        }
        out.finish(want);
    }
}

/// Convenience wrapper: evaluates the closed-form field once.
pub fn velocity(
    rho0: &GaussianMixture,
    rho1: &GaussianMixture,
    spec: &InterpolantSpec,
    t: f64,
    x: &DVector<f64>,
    want: Want,
) -> Result<VelocityEval> {
    let field = MixtureField::new(rho0.clone(), rho1.clone(), *spec)?;
    field.eval(t, x, want)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_vec(v.to_vec())
    }

    fn bb() -> InterpolantSpec {
        InterpolantSpec::brownian_bridge(1.0).unwrap()
    }

    fn bimodal() -> (GaussianMixture, GaussianMixture) {
        let rho0 = GaussianMixture::new(vec![
            GaussianComponent::isotropic(0.5, dv(&[-1.0]), 0.3).unwrap(),
            GaussianComponent::isotropic(0.5, dv(&[1.2]), 0.5).unwrap(),
        ])
        .unwrap();
        let rho1 = GaussianMixture::new(vec![
            GaussianComponent::isotropic(0.3, dv(&[-2.0]), 0.2).unwrap(),
            GaussianComponent::isotropic(0.7, dv(&[1.5]), 0.4).unwrap(),
        ])
        .unwrap();
        (rho0, rho1)
    }

    fn correlated_2d() -> (GaussianMixture, GaussianMixture) {
        let cov = |a: f64, b: f64, c: f64| DMatrix::from_row_slice(2, 2, &[a, b, b, c]);
        let rho0 = GaussianMixture::new(vec![
            GaussianComponent::new(0.4, dv(&[-1.0, 0.5]), cov(0.5, 0.1, 0.3)).unwrap(),
            GaussianComponent::new(0.6, dv(&[1.0, -0.5]), cov(0.3, -0.05, 0.6)).unwrap(),
        ])
        .unwrap();
        let rho1 = GaussianMixture::new(vec![
            GaussianComponent::new(0.5, dv(&[0.0, 2.0]), cov(0.2, 0.0, 0.2)).unwrap(),
            GaussianComponent::new(0.2, dv(&[2.0, 0.0]), cov(0.4, 0.15, 0.3)).unwrap(),
            GaussianComponent::new(0.3, dv(&[-2.0, -1.0]), cov(0.25, 0.0, 0.5)).unwrap(),
        ])
        .unwrap();
        (rho0, rho1)
    }

    #[test]
    fn standard_marginal_is_stationary() {
        let n = GaussianMixture::standard_normal(3).unwrap();
        for t in [0.1, 0.5, 0.83] {
            let m = marginal_mixture(&n, &n, &bb(), t).unwrap();
            let c = &m.components()[0];
            assert!((c.cov() - DMatrix::identity(3, 3)).amax() < 1e-15);
            assert!(c.mean().amax() == 0.0);
        }
    }

    #[test]
    fn shifted_marginal_mean() {
        let rho0 = GaussianMixture::standard_normal(2).unwrap();
        let rho1 = GaussianMixture::isotropic_gaussian(dv(&[2.0, -1.0]), 1.0).unwrap();
        let m = marginal_mixture(&rho0, &rho1, &bb(), 0.3).unwrap();
        let c = &m.components()[0];
        assert!((c.mean() - dv(&[0.6, -0.3])).amax() < 1e-15);
        assert!((c.cov() - DMatrix::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn marginal_rejects_endpoints() {
        let n = GaussianMixture::standard_normal(1).unwrap();
        assert!(matches!(
            marginal_mixture(&n, &n, &bb(), 0.0),
            Err(IlabError::Domain(_))
        ));
        assert!(marginal_mixture(&n, &n, &InterpolantSpec::one_sided_vp(), 0.0).is_ok());
        assert!(marginal_mixture(&n, &n, &InterpolantSpec::one_sided_vp(), 1.0).is_err());
    }

    #[test]
    fn symmetric_case_is_static() {
        let n = GaussianMixture::standard_normal(2).unwrap();
        let x = dv(&[0.7, -1.3]);
        for t in [0.05, 0.4, 0.95] {
            let e = velocity(&n, &n, &bb(), t, &x, Want::ALL).unwrap();
            assert!(e.b.amax() <= 1e-12);
            assert!(e.jacobian().amax() <= 1e-12);
            assert!((e.score.as_ref().unwrap() + &x).amax() < 1e-12);
        }
    }

    #[test]
    fn straight_transport_is_constant() {
        let rho0 = GaussianMixture::standard_normal(1).unwrap();
        let rho1 = GaussianMixture::isotropic_gaussian(dv(&[2.0]), 1.0).unwrap();
        for (t, x) in [(0.1, -3.0), (0.5, 0.3), (0.9, 4.0)] {
            let e = velocity(&rho0, &rho1, &bb(), t, &dv(&[x]), Want::JACOBIAN).unwrap();
            assert!((e.b[0] - 2.0).abs() < 1e-12);
            assert!(e.jacobian()[(0, 0)].abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_is_jacobian_trace() {
        let (rho0, rho1) = correlated_2d();
        let f = MixtureField::new(rho0, rho1, bb()).unwrap();
        let e = f.eval(0.37, &dv(&[0.4, 0.9]), Want::ALL).unwrap();
        assert!((e.divergence.unwrap() - e.jacobian().trace()).abs() < 1e-10);
    }

    #[test]
    fn jacobian_and_score_match_finite_differences() {
        for (rho0, rho1) in [bimodal(), correlated_2d()] {
            let d = rho0.dim();
            let f = MixtureField::new(rho0.clone(), rho1.clone(), bb()).unwrap();
            for (t, base) in [(0.2, 0.3), (0.5, -0.8), (0.85, 1.1)] {
                let x = DVector::from_fn(d, |i, _| base + 0.25 * i as f64);
                let e = f.eval(t, &x, Want::ALL).unwrap();
                let marg = marginal_mixture(&rho0, &rho1, &bb(), t).unwrap();
                let h = 1e-5;
                for k in 0..d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[k] += h;
                    xm[k] -= h;
                    let db = (f.eval(t, &xp, Want::VELOCITY).unwrap().b - f.eval(t, &xm, Want::VELOCITY).unwrap().b)
                        / (2.0 * h);
                    for a in 0..d {
                        let exact = e.jacobian()[(a, k)];
                        assert!((db[a] - exact).abs() <= 1e-6 + 1e-5 * exact.abs());
                    }
                    let ds = (marg.logpdf(xp.as_slice()).unwrap() - marg.logpdf(xm.as_slice()).unwrap()) / (2.0 * h);
                    let s = e.score.as_ref().unwrap()[k];
                    assert!((ds - s).abs() <= 1e-6 + 1e-6 * s.abs());
                }
            }
        }
    }

    #[test]
    fn one_sided_vp_matches_two_sided_with_point_source() {
        // rho0 irrelevant for the VP interpolant.
        let (_, rho1) = bimodal();
        let junk = GaussianMixture::isotropic_gaussian(dv(&[50.0]), 3.0).unwrap();
        let n = GaussianMixture::standard_normal(1).unwrap();
        let spec = InterpolantSpec::one_sided_vp();
        let a = velocity(&junk, &rho1, &spec, 0.4, &dv(&[0.3]), Want::ALL).unwrap();
        let b = velocity(&n, &rho1, &spec, 0.4, &dv(&[0.3]), Want::ALL).unwrap();
        assert_eq!(a, b);
        // At t = 0 the marginal is standard normal.
        let m = marginal_mixture(&n, &rho1, &spec, 0.0).unwrap();
        assert!((m.logpdf(&[0.4]).unwrap() - n.logpdf(&[0.4]).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn far_tail_never_produces_nan() {
        let (rho0, rho1) = bimodal();
        let f = MixtureField::new(rho0, rho1, bb()).unwrap();
        let e = f.eval(0.5, &dv(&[1e6]), Want::ALL).unwrap();
        assert!(e.far_tail);
        assert!(e.is_finite());
        let near = f.eval(0.5, &dv(&[0.2]), Want::ALL).unwrap();
        assert!(!near.far_tail);
    }

    #[test]
    fn pair_cap_is_enforced() {
        let (rho0, rho1) = bimodal();
        assert!(matches!(
            MixtureField::with_pair_cap(rho0, rho1, bb(), 3),
            Err(IlabError::Config(_))
        ));
    }

    #[test]
    fn velocity_decomposes_into_mean_drift_plus_score_term() {
        // b = v + gamma gamma' s; in the symmetric case v = -gamma gamma' s.
        let n = GaussianMixture::standard_normal(1).unwrap();
        let t = 0.3;
        let x = dv(&[1.4]);
        let e = velocity(&n, &n, &bb(), t, &x, Want::ALL).unwrap();
        let gg = bb().gamma.gamma_dgamma(t);
        let score_term = gg * e.score.as_ref().unwrap()[0];
        assert!((score_term + gg * x[0]).abs() < 1e-14);
        assert!(e.b[0].abs() < 1e-14);
    }
}
