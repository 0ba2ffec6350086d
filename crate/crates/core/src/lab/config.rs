//! JSON experiment configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IlabError, Result};
use crate::field::PerturbationMode;
use crate::interpolant::{GammaSchedule, InterpolantMode, InterpolantSpec};
use crate::metrics::TvMethod;
use crate::mixture::{GaussianMixture, MixtureSpec};
use crate::schedule::ScheduleKind;
use crate::solvers::{IntegratorKind, MAX_TRACKED_DIM};

use super::presets;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Dimension for presets parametrized by `d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho0: Option<MixtureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho1: Option<MixtureSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaKind {
    BrownianBridge,
    VariancePreserving,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolantConfig {
    #[serde(default = "default_mode")]
    pub mode: InterpolantMode,
    #[serde(default = "default_gamma")]
    pub gamma: GammaKind,
    #[serde(default = "default_a")]
    pub a: f64,
}

fn default_mode() -> InterpolantMode {
    InterpolantMode::TwoSided
}
fn default_gamma() -> GammaKind {
    GammaKind::BrownianBridge
}
fn default_a() -> f64 {
    1.0
}

impl Default for InterpolantConfig {
    fn default() -> Self {
        InterpolantConfig {
            mode: default_mode(),
            gamma: default_gamma(),
            a: default_a(),
        }
    }
}

impl InterpolantConfig {
    pub fn spec(&self) -> Result<InterpolantSpec> {
        let gamma = match self.gamma {
            GammaKind::BrownianBridge => GammaSchedule::brownian_bridge(self.a)?,
            GammaKind::VariancePreserving => GammaSchedule::VariancePreserving,
            GammaKind::None => GammaSchedule::None,
        };
        let spec = InterpolantSpec { mode: self.mode, gamma };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_kind")]
    pub kind: ScheduleKind,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_list: Option<Vec<f64>>,
    #[serde(default = "default_delta")]
    pub delta_start: f64,
    #[serde(default = "default_delta")]
    pub delta_end: f64,
}

fn default_kind() -> ScheduleKind {
    ScheduleKind::GeometricMid
}
fn default_h() -> f64 {
    0.1
}
fn default_delta() -> f64 {
    0.01
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: default_kind(),
            h: default_h(),
            h_list: None,
            delta_start: default_delta(),
            delta_end: default_delta(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub mode: PerturbationMode,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityCheckConfig {
    #[serde(default = "default_oracle_probes")]
    pub oracle_probes: usize,
    #[serde(default = "default_oracle_samples")]
    pub oracle_samples: usize,
    #[serde(default = "default_fd_probes")]
    pub derivative_probes: usize,
    #[serde(default = "default_continuity_probes")]
    pub continuity_probes: usize,
}

fn default_oracle_probes() -> usize {
    20
}
fn default_oracle_samples() -> usize {
    1_000_000
}
fn default_fd_probes() -> usize {
    50
}
fn default_continuity_probes() -> usize {
    30
}

impl Default for VelocityCheckConfig {
    fn default() -> Self {
        VelocityCheckConfig {
            oracle_probes: default_oracle_probes(),
            oracle_samples: default_oracle_samples(),
            derivative_probes: default_fd_probes(),
            continuity_probes: default_continuity_probes(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorName {
    Euler,
    Heun,
}

impl IntegratorName {
    pub fn kind(&self) -> IntegratorKind {
        match self {
            IntegratorName::Euler => IntegratorKind::Euler,
            IntegratorName::Heun => IntegratorKind::Heun,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub interpolant: InterpolantConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_integrators")]
    pub integrators: Vec<IntegratorName>,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_metric")]
    pub metric: TvMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_list: Option<Vec<usize>>,
    #[serde(default)]
    pub velocity_check: VelocityCheckConfig,
}

fn default_integrators() -> Vec<IntegratorName> {
    vec![IntegratorName::Euler, IntegratorName::Heun]
}
fn default_n_samples() -> usize {
    100_000
}
fn default_metric() -> TvMethod {
    TvMethod::DensityRatio
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A config for a named preset with every other field at its default.
    pub fn for_preset(preset: &str) -> Self {
        ExperimentConfig {
            task: TaskConfig {
                preset: Some(preset.to_string()),
                dim: None,
                rho0: None,
                rho1: None,
            },
            interpolant: InterpolantConfig::default(),
            schedule: ScheduleConfig::default(),
            integrators: default_integrators(),
            n_samples: default_n_samples(),
            seed: 0,
            metric: default_metric(),
            perturbation: None,
            d_list: None,
            velocity_check: VelocityCheckConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        match (&t.preset, &t.rho0, &t.rho1) {
            (Some(name), None, None) => {
                if !presets::PRESETS.contains(&name.as_str()) {
                    return Err(IlabError::Config(format!(
                        "unknown preset '{name}' (known: {})",
                        presets::PRESETS.join(", ")
                    )));
                }
            }
            (None, Some(_), Some(_)) => {}
            _ => {
                return Err(IlabError::Config(
                    "task needs either a preset or both rho0 and rho1".into(),
                ))
            }
        }
        self.interpolant.spec()?;
        if self.integrators.is_empty() {
            return Err(IlabError::Config("at least one integrator is required".into()));
        }
        if self.n_samples == 0 {
            return Err(IlabError::Config("n_samples must be positive".into()));
        }
        if let Some(hs) = &self.schedule.h_list {
            if hs.windows(2).any(|w| w[1] >= w[0]) {
                return Err(IlabError::Config("h_list must be strictly decreasing".into()));
            }
        }
        if let Some(ds) = &self.d_list {
            if ds.is_empty() || ds[0] == 0 || ds.windows(2).any(|w| w[1] <= w[0]) {
                return Err(IlabError::Config(
                    "d_list must be positive and strictly increasing".into(),
                ));
            }
            if let Some(&d) = ds.iter().find(|&&d| d > MAX_TRACKED_DIM) {
                return Err(IlabError::Config(format!(
                    "d = {d} exceeds the density-tracking limit of {MAX_TRACKED_DIM}"
                )));
            }
        }
        if let Some(p) = &self.perturbation {
            if !(p.magnitude >= 0.0) {
                return Err(IlabError::Config("perturbation magnitude must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Name echoed into CSV rows: the preset, or `custom`.
    pub fn task_name(&self) -> &str {
        self.task.preset.as_deref().unwrap_or("custom")
    }

    /// The endpoint pair, instantiated at `dim` for presets parametrized by `d`.
    pub fn endpoints(&self, dim: Option<usize>) -> Result<(GaussianMixture, GaussianMixture)> {
        match &self.task.preset {
            Some(name) => presets::preset(name, dim.or(self.task.dim)),
            None => {
                if dim.is_some() {
                    return Err(IlabError::Config("explicit mixtures cannot be re-dimensioned".into()));
                }
                let rho0 = GaussianMixture::from_spec(self.task.rho0.as_ref().unwrap())?;
                let rho1 = GaussianMixture::from_spec(self.task.rho1.as_ref().unwrap())?;
                if rho0.dim() != rho1.dim() {
                    return Err(IlabError::Config("rho0 and rho1 dimensions differ".into()));
                }
                Ok((rho0, rho1))
            }
        }
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}
