//! Numerical laboratory for ODE-based stochastic interpolants.
//!
//! Gaussian-mixture endpoints give the interpolant's velocity field, score
//! and Jacobian in closed form. The crate integrates that field with
//! forward Euler and Heun under geometric step schedules, tracks the pushed
//! density through the step-map Jacobians, and measures the terminal
//! total-variation error to verify first- and second-order convergence.

pub mod error;
pub mod field;
pub mod interpolant;
pub mod lab;
pub mod metrics;
pub mod mixture;
pub mod mixture_field;
pub mod oracle;
pub mod probe;
pub mod rng;
pub mod schedule;
pub mod solvers;

pub use error::{IlabError, Result};
pub use field::{
    perturb_field, ConstantField, FrozenField, LinearField, PerturbationMode, PerturbedField, Scratch, TimeLinearField,
    VelocityEval, VelocityField, Want,
};
pub use interpolant::{gamma_eval, interp_point, GammaSchedule, InterpolantMode, InterpolantSpec};
pub use metrics::{
    continuity_report, continuity_residual, fit_loglog_slope, tv_density_ratio, tv_histogram, ContinuityReport,
    HistogramGrid, SlopeFit, TvEstimate, TvMethod,
};
pub use mixture::{GaussianComponent, GaussianMixture, MixtureSpec};
pub use mixture_field::{marginal_mixture, pair_moments, velocity, MixtureField, PairMoment};
pub use oracle::{oracle_velocity_mc, OracleEstimate};
pub use probe::{lipschitz_probe, lipschitz_profile, probe_points};
pub use schedule::{make_schedule, predicted_steps, Schedule, ScheduleKind};
pub use solvers::{
    diffeo_check, euler_step, euler_step_jacobian, heun_step, heun_step_jacobian, integrate, push_ensemble,
    reference_solution, DiffeoReport, IntegratorKind, PushedEnsemble, Trajectory,
};
