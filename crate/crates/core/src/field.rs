//! Velocity fields `b(t, x)` and the evaluation protocol used by the solvers.
//!
//! A field is first frozen at a time `t` (which lets the mixture field
//! factorize its per-time moments once) and the frozen slice is then
//! evaluated at many points without allocating.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::mixture::GaussianMixture;

/// Which optional outputs an evaluation should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Want {
    pub jacobian: bool,
    pub divergence: bool,
    pub score: bool,
}

impl Want {
    pub const VELOCITY: Want = Want {
        jacobian: false,
        divergence: false,
        score: false,
    };
    pub const JACOBIAN: Want = Want {
        jacobian: true,
        divergence: true,
        score: false,
    };
    pub const ALL: Want = Want {
        jacobian: true,
        divergence: true,
        score: true,
    };

    pub fn needs_jacobian(&self) -> bool {
        self.jacobian || self.divergence
    }
}

/// Result of evaluating a field at one point.
///
/// `jacobian[(a, b)] = d b_a / d x_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityEval {
    pub b: DVector<f64>,
    pub jacobian: Option<DMatrix<f64>>,
    pub divergence: Option<f64>,
    pub score: Option<DVector<f64>>,
    /// Set when every mixture responsibility underflowed and the nearest
    /// component pair was used instead.
    pub far_tail: bool,
}

impl VelocityEval {
    pub fn zeros(dim: usize) -> Self {
        VelocityEval {
            b: DVector::zeros(dim),
            jacobian: None,
            divergence: None,
            score: None,
            far_tail: false,
        }
    }

    /// Makes the optional buffers match `want`, reusing existing storage.
    pub fn prepare(&mut self, want: Want) {
        let d = self.b.len();
        if want.needs_jacobian() {
            self.jacobian.get_or_insert_with(|| DMatrix::zeros(d, d));
        } else {
            self.jacobian = None;
        }
        if want.score {
            self.score.get_or_insert_with(|| DVector::zeros(d));
        } else {
            self.score = None;
        }
        self.divergence = None;
        self.far_tail = false;
    }

    /// Fills `divergence` from the Jacobian when requested.
    pub fn finish(&mut self, want: Want) {
        if want.divergence {
            self.divergence = self.jacobian.as_ref().map(|j| j.trace());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.b.iter().all(|v| v.is_finite()) && self.jacobian.as_ref().map_or(true, |j| j.iter().all(|v| v.is_finite()))
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        self.jacobian.as_ref().expect("jacobian was not requested")
    }
}

/// Reusable scratch buffers for allocation-free evaluation.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    pub(crate) log_w: Vec<f64>,
    pub(crate) diffs: Vec<DVector<f64>>,
    pub(crate) grads: Vec<DVector<f64>>,
    pub(crate) vels: Vec<DVector<f64>>,
    pub(crate) tmp: Option<DVector<f64>>,
}

impl Scratch {
    pub(crate) fn ensure(&mut self, pairs: usize, dim: usize) {
        if self.log_w.len() != pairs {
            self.log_w = vec![0.0; pairs];
        }
        for buf in [&mut self.diffs, &mut self.grads, &mut self.vels] {
            if buf.len() != pairs || buf.first().is_some_and(|v| v.len() != dim) {
                *buf = vec![DVector::zeros(dim); pairs];
            }
        }
        if self.tmp.as_ref().map_or(true, |v| v.len() != dim) {
            self.tmp = Some(DVector::zeros(dim));
        }
    }
}

/// A field with its time argument fixed.
pub trait FrozenField: Send + Sync {
    fn time(&self) -> f64;
    fn dim(&self) -> usize;
    /// Evaluates at `x`, writing into `out` (which must have `dim` entries).
    fn eval_into(&self, x: &DVector<f64>, want: Want, out: &mut VelocityEval, scratch: &mut Scratch);

    fn eval(&self, x: &DVector<f64>, want: Want) -> VelocityEval {
        let mut out = VelocityEval::zeros(self.dim());
        self.eval_into(x, want, &mut out, &mut Scratch::default());
        out
    }
}

/// An evaluable velocity field `b(t, x)` with Jacobian and (optionally) score.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;

    /// Freezes the field at time `t`.
    fn at(&self, t: f64) -> Result<Box<dyn FrozenField + '_>>;

    /// The law `rho(t)` transported by this field, when known in closed form.
    fn marginal(&self, _t: f64) -> Option<GaussianMixture> {
        None
    }

    fn eval(&self, t: f64, x: &DVector<f64>, want: Want) -> Result<VelocityEval> {
        check_dim(self.dim(), x.len())?;
        Ok(self.at(t)?.eval(x, want))
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Arc<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn at(&self, t: f64) -> Result<Box<dyn FrozenField + '_>> {
        (**self).at(t)
    }
    fn marginal(&self, t: f64) -> Option<GaussianMixture> {
        (**self).marginal(t)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn at(&self, t: f64) -> Result<Box<dyn FrozenField + '_>> {
        (**self).at(t)
    }
    fn marginal(&self, t: f64) -> Option<GaussianMixture> {
        (**self).marginal(t)
    }
}

/// `b(t, x) = c`.
#[derive(Debug, Clone)]
pub struct ConstantField {
    pub value: DVector<f64>,
}

/// `b(t, x) = M x`.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub matrix: DMatrix<f64>,
}

/// `b(t, x) = t * v`, constant in space.
#[derive(Debug, Clone)]
pub struct TimeLinearField {
    pub direction: DVector<f64>,
}

struct Frozen<'a, F> {
    t: f64,
    field: &'a F,
}

macro_rules! freeze_impl {
    ($ty:ty, $dim:expr) => {
        impl VelocityField for $ty {
            fn dim(&self) -> usize {
                $dim(self)
            }
            fn at(&self, t: f64) -> Result<Box<dyn FrozenField + '_>> {
                Ok(Box::new(Frozen { t, field: self }))
            }
        }
    };
}

freeze_impl!(ConstantField, |f: &ConstantField| f.value.len());
freeze_impl!(LinearField, |f: &LinearField| f.matrix.nrows());
freeze_impl!(TimeLinearField, |f: &TimeLinearField| f.direction.len());

impl FrozenField for Frozen<'_, ConstantField> {
    fn time(&self) -> f64 {
        self.t
    }
    fn dim(&self) -> usize {
        self.field.value.len()
    }
    fn eval_into(&self, _x: &DVector<f64>, want: Want, out: &mut VelocityEval, _: &mut Scratch) {
        out.prepare(want);
        out.b.copy_from(&self.field.value);
        if let Some(j) = out.jacobian.as_mut() {
            j.fill(0.0);
        }
        out.finish(want);
    }
}

impl FrozenField for Frozen<'_, LinearField> {
    fn time(&self) -> f64 {
        self.t
    }
    fn dim(&self) -> usize {
        self.field.matrix.nrows()
    }
    fn eval_into(&self, x: &DVector<f64>, want: Want, out: &mut VelocityEval, _: &mut Scratch) {
        out.prepare(want);
        out.b.gemv(1.0, &self.field.matrix, x, 0.0);
        if let Some(j) = out.jacobian.as_mut() {
            j.copy_from(&self.field.matrix);
        }
        out.finish(want);
    }
}

impl FrozenField for Frozen<'_, TimeLinearField> {
    fn time(&self) -> f64 {
        self.t
    }
    fn dim(&self) -> usize {
        self.field.direction.len()
    }
    fn eval_into(&self, _x: &DVector<f64>, want: Want, out: &mut VelocityEval, _: &mut Scratch) {
        out.prepare(want);
        out.b.copy_from(&self.field.direction);
        out.b *= self.t;
        if let Some(j) = out.jacobian.as_mut() {
            j.fill(0.0);
        }
        out.finish(want);
    }
}

/// Shape of an injected drift error `eta(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationMode {
    /// `eta = magnitude * e_1`.
    ConstantShift,
    /// `eta_a = magnitude / sqrt(d) * sin(x_a)`.
    SinusoidalInX,
}

/// `b_hat = b + eta` with `|eta| <= magnitude` everywhere.
///
/// The marginal of the wrapped field is still reported, since it is the
/// target the perturbed field is measured against.
pub struct PerturbedField {
    inner: Arc<dyn VelocityField>,
    magnitude: f64,
    mode: PerturbationMode,
}

pub fn perturb_field(field: Arc<dyn VelocityField>, magnitude: f64, mode: PerturbationMode) -> Result<PerturbedField> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(crate::IlabError::Config(format!(
            "perturbation magnitude must be non-negative, got {magnitude}"
        )));
    }
    Ok(PerturbedField {
        inner: field,
        magnitude,
        mode,
    })
}

impl PerturbedField {
    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }
    pub fn mode(&self) -> PerturbationMode {
        self.mode
    }
}

struct FrozenPerturbed<'a> {
    inner: Box<dyn FrozenField + 'a>,
    magnitude: f64,
    mode: PerturbationMode,
}

impl VelocityField for PerturbedField {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn at(&self, t: f64) -> Result<Box<dyn FrozenField + '_>> {
        Ok(Box::new(FrozenPerturbed {
            inner: self.inner.at(t)?,
            magnitude: self.magnitude,
            mode: self.mode,
        }))
    }
    fn marginal(&self, t: f64) -> Option<GaussianMixture> {
        self.inner.marginal(t)
    }
}

impl FrozenField for FrozenPerturbed<'_> {
    fn time(&self) -> f64 {
        self.inner.time()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval_into(&self, x: &DVector<f64>, want: Want, out: &mut VelocityEval, scratch: &mut Scratch) {
        self.inner.eval_into(x, want, out, scratch);
        if self.magnitude == 0.0 {
            return;
        }
        match self.mode {
            PerturbationMode::ConstantShift => out.b[0] += self.magnitude,
            PerturbationMode::SinusoidalInX => {
                let scale = self.magnitude / (x.len() as f64).sqrt();
                for a in 0..x.len() {
                    out.b[a] += scale * x[a].sin();
                }
                if let Some(j) = out.jacobian.as_mut() {
                    for a in 0..x.len() {
                        j[(a, a)] += scale * x[a].cos();
                    }
                }
                out.finish(want);
            }
        }
    }
}
