//! Linear stochastic interpolants `x_t = alpha(t) x0 + beta(t) x1 + gamma(t) z`.
//!
//! Two constructions are supported: the two-sided interpolant with
//! `alpha = 1 - t`, `beta = t`, and the one-sided variance-preserving
//! interpolant `x_t = t x1 + sqrt(1 - t^2) z` whose `t = 0` law is the
//! standard normal.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, IlabError, Result};

/// Latent scale family `gamma(t)`.
///
/// Only `gamma` and the product `gamma * gamma'` are ever exposed: the
/// derivative alone blows up at the endpoints of the Brownian bridge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GammaSchedule {
    /// `gamma^2(t) = 2 a t (1 - t)`.
    BrownianBridge { a: f64 },
    /// `gamma^2(t) = 1 - t^2`.
    VariancePreserving,
    /// `gamma = 0`: a deterministic interpolant.
    None,
}

impl GammaSchedule {
    pub fn brownian_bridge(a: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(IlabError::Config(format!(
                "Brownian-bridge scale must be positive, got {a}"
            )));
        }
        Ok(GammaSchedule::BrownianBridge { a })
    }

    /// `gamma^2(t)`, defined on the closed interval.
    pub fn gamma_sq(&self, t: f64) -> f64 {
        match *self {
            GammaSchedule::BrownianBridge { a } => (2.0 * a * t * (1.0 - t)).max(0.0),
            GammaSchedule::VariancePreserving => (1.0 - t * t).max(0.0),
            GammaSchedule::None => 0.0,
        }
    }

    /// `gamma(t) gamma'(t) = d/dt[gamma^2(t)] / 2`.
    pub fn gamma_dgamma(&self, t: f64) -> f64 {
        match *self {
            GammaSchedule::BrownianBridge { a } => a * (1.0 - 2.0 * t),
            GammaSchedule::VariancePreserving => -t,
            GammaSchedule::None => 0.0,
        }
    }

    /// Infimum of `gamma^2` over `[lo, hi]`.
    ///
    /// Both non-trivial families are concave in `t`, so the infimum sits at
    /// an endpoint of the interval.
    pub fn inf_gamma_sq(&self, lo: f64, hi: f64) -> f64 {
        self.gamma_sq(lo).min(self.gamma_sq(hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpolantMode {
    TwoSided,
    OneSidedVp,
}

/// Interpolant construction: mode plus latent scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolantSpec {
    pub mode: InterpolantMode,
    pub gamma: GammaSchedule,
}

/// Scalar coefficients of the interpolant at a fixed time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub alpha: f64,
    pub dalpha: f64,
    pub beta: f64,
    pub dbeta: f64,
    pub gamma_sq: f64,
    pub gamma_dgamma: f64,
}

impl Coefficients {
    pub fn gamma(&self) -> f64 {
        self.gamma_sq.sqrt()
    }
}

impl InterpolantSpec {
    pub fn two_sided(gamma: GammaSchedule) -> Self {
        InterpolantSpec {
            mode: InterpolantMode::TwoSided,
            gamma,
        }
    }

    /// `x_t = t x1 + sqrt(1 - t^2) z`.
    pub fn one_sided_vp() -> Self {
        InterpolantSpec {
            mode: InterpolantMode::OneSidedVp,
            gamma: GammaSchedule::VariancePreserving,
        }
    }

    /// Brownian-bridge two-sided interpolant with scale `a`.
    pub fn brownian_bridge(a: f64) -> Result<Self> {
        Ok(Self::two_sided(GammaSchedule::brownian_bridge(a)?))
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == InterpolantMode::OneSidedVp && self.gamma != GammaSchedule::VariancePreserving {
            return Err(IlabError::Config(
                "the one-sided interpolant requires the variance-preserving gamma".into(),
            ));
        }
        if let GammaSchedule::BrownianBridge { a } = self.gamma {
            GammaSchedule::brownian_bridge(a)?;
        }
        Ok(())
    }

    /// Coefficients at any `t` in `[0, 1]`.
    pub fn coefficients(&self, t: f64) -> Result<Coefficients> {
        if !(0.0..=1.0).contains(&t) {
            return Err(IlabError::Domain(format!("time {t} outside [0, 1]")));
        }
        let (alpha, dalpha) = match self.mode {
            InterpolantMode::TwoSided => (1.0 - t, -1.0),
            InterpolantMode::OneSidedVp => (0.0, 0.0),
        };
        Ok(Coefficients {
            alpha,
            dalpha,
            beta: t,
            dbeta: 1.0,
            gamma_sq: self.gamma.gamma_sq(t),
            gamma_dgamma: self.gamma.gamma_dgamma(t),
        })
    }

    /// Whether the law of `x_t` is well defined (non-degenerate) at `t`.
    pub fn admits_time(&self, t: f64) -> bool {
        match self.mode {
            InterpolantMode::TwoSided => t > 0.0 && t < 1.0,
            InterpolantMode::OneSidedVp => (0.0..1.0).contains(&t),
        }
    }
}

/// Returns `(gamma(t), gamma(t) gamma'(t))` for `t` strictly inside `(0, 1)`.
pub fn gamma_eval(spec: &InterpolantSpec, t: f64) -> Result<(f64, f64)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(IlabError::Domain(format!("time {t} outside (0, 1)")));
    }
    Ok((spec.gamma.gamma_sq(t).sqrt(), spec.gamma.gamma_dgamma(t)))
}

/// Evaluates `x_t` for given endpoint draws and latent noise.
///
/// The one-sided interpolant ignores `x0`.
pub fn interp_point(
    spec: &InterpolantSpec,
    t: f64,
    x0: &DVector<f64>,
    x1: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim(x0.len(), x1.len())?;
    check_dim(x0.len(), z.len())?;
    let c = spec.coefficients(t)?;
    Ok(x0 * c.alpha + x1 * c.beta + z * c.gamma())
}
