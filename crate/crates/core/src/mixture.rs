//! Gaussian mixtures with dense SPD covariances.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, IlabError, Result};
use crate::rng::{sample_rng, SampleRng};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One weighted Gaussian component; the covariance is factorized on construction.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    lower: DMatrix<f64>,
    log_det: f64,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if !(weight > 0.0 && weight <= 1.0 + 1e-12) {
            return Err(IlabError::Config(format!("component weight {weight} outside (0, 1]")));
        }
        check_dim(mean.len(), cov.nrows())?;
        check_dim(mean.len(), cov.ncols())?;
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-12 * cov.amax().max(1.0) {
            return Err(IlabError::Factorization { component: 0 });
        }
        let chol = Cholesky::new(cov.clone()).ok_or(IlabError::Factorization { component: 0 })?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(IlabError::Factorization { component: 0 });
        }
        let lower = chol.l();
        Ok(GaussianComponent {
            weight,
            mean,
            cov,
            chol,
            lower,
            log_det,
        })
    }

    /// Isotropic component `N(mean, variance * I)`.
    pub fn isotropic(weight: f64, mean: DVector<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(weight, mean, DMatrix::identity(d, d) * variance)
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower Cholesky factor of the covariance.
    pub fn chol_factor(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `log w + log N(x; mean, cov)`.
    pub fn weighted_logpdf(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let l = self.chol.l_dirty();
        let mut y = diff;
        // Forward substitution on the lower factor.
        for i in 0..y.len() {
            let mut s = y[i];
            for j in 0..i {
                s -= l[(i, j)] * y[j];
            }
            y[i] = s / l[(i, i)];
        }
        self.weight.ln() - 0.5 * (x.len() as f64 * LN_2PI + self.log_det + y.norm_squared())
    }
}

/// A finite mixture of Gaussians sharing one dimension.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| IlabError::Config("a mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(IlabError::Config("mixture dimension must be positive".into()));
        }
        for c in &components {
            check_dim(dim, c.mean.len())?;
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(IlabError::Config(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(GaussianMixture { components, dim })
    }

    /// `N(mean, variance * I)`.
    pub fn isotropic_gaussian(mean: DVector<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![GaussianComponent::isotropic(1.0, mean, variance)?])
    }

    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::isotropic_gaussian(DVector::zeros(dim), 1.0)
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.components
            .iter()
            .fold(DVector::zeros(self.dim), |acc, c| acc + &c.mean * c.weight)
    }

    /// `log sum_i w_i N(x; mu_i, Sigma_i)` via log-sum-exp.
    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(log_sum_exp(self.components.iter().map(|c| c.weighted_logpdf(x))))
    }

    pub fn pdf(&self, x: &[f64]) -> Result<f64> {
        Ok(self.logpdf(x)?.exp())
    }

    fn pick_component(&self, rng: &mut SampleRng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return i;
            }
        }
        self.components.len() - 1
    }

    /// Draws one point (and its component label) from a caller-owned stream.
    pub fn draw(&self, rng: &mut SampleRng) -> (usize, DVector<f64>) {
        let mut out = DVector::zeros(self.dim);
        let mut z = DVector::zeros(self.dim);
        let i = self.draw_into(rng, &mut out, &mut z);
        (i, out)
    }

    /// Allocation-free draw into `out`; `z` is scratch of length `dim`.
    pub fn draw_into(&self, rng: &mut SampleRng, out: &mut DVector<f64>, z: &mut DVector<f64>) -> usize {
        let i = self.pick_component(rng);
        let c = &self.components[i];
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        out.copy_from(&c.mean);
        out.gemv(1.0, &c.lower, z, 1.0);
        i
    }

    /// `n` i.i.d. draws as a row-major `n x d` buffer; draw `i` only depends
    /// on `(seed, i)`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        self.sample_with_labels(n, seed).0
    }

    pub fn sample_with_labels(&self, n: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let draws: Vec<(usize, DVector<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| self.draw(&mut sample_rng(seed, i as u64)))
            .collect();
        let mut flat = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for (label, x) in draws {
            labels.push(label);
            flat.extend(x.iter());
        }
        (flat, labels)
    }

    pub fn from_spec(spec: &MixtureSpec) -> Result<Self> {
        let mut comps = Vec::with_capacity(spec.components.len());
        for (k, c) in spec.components.iter().enumerate() {
            check_dim(spec.dim, c.mean.len())?;
            let cov = match &c.cov {
                CovSpec::Iso { iso } => DMatrix::identity(spec.dim, spec.dim) * *iso,
                CovSpec::Dense(rows) => {
                    if rows.len() != spec.dim || rows.iter().any(|r| r.len() != spec.dim) {
                        return Err(IlabError::Config(format!(
                            "component {k}: covariance must be {0}x{0}",
                            spec.dim
                        )));
                    }
                    DMatrix::from_fn(spec.dim, spec.dim, |i, j| rows[i][j])
                }
            };
            let comp =
                GaussianComponent::new(c.weight, DVector::from_vec(c.mean.clone()), cov).map_err(|e| match e {
                    IlabError::Factorization { .. } => IlabError::Factorization { component: k },
                    other => other,
                })?;
            comps.push(comp);
        }
        Self::new(comps)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_spec(&serde_json::from_str(text)?)
    }

    pub fn to_spec(&self) -> MixtureSpec {
        MixtureSpec {
            dim: self.dim,
            components: self
                .components
                .iter()
                .map(|c| ComponentSpec {
                    weight: c.weight,
                    mean: c.mean.iter().copied().collect(),
                    cov: CovSpec::Dense(
                        (0..self.dim)
                            .map(|i| (0..self.dim).map(|j| c.cov[(i, j)]).collect())
                            .collect(),
                    ),
                })
                .collect(),
        }
    }
}

/// Numerically stable `log(sum(exp(v)))`; `-inf` for an empty input.
pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// JSON document describing a mixture:
/// `{"dim": 2, "components": [{"weight": 1.0, "mean": [0, 0], "cov": {"iso": 1.0}}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub dim: usize,
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: CovSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovSpec {
    Dense(Vec<Vec<f64>>),
    Iso { iso: f64 },
}
