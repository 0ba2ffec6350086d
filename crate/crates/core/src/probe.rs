//! Probe points on the marginals and the empirical Lipschitz constant.

use nalgebra::DVector;

use crate::error::Result;
use crate::field::{Scratch, VelocityEval, VelocityField, Want};
use crate::rng::sample_rng;
use crate::schedule::Schedule;

/// `n` points drawn from `rho(t)` when the field knows its marginal, from
/// `N(0, I)` otherwise.
pub fn probe_points(field: &dyn VelocityField, t: f64, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let d = field.dim();
    let marginal = field.marginal(t);
    let normal = rand_distr::StandardNormal;
    (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            match &marginal {
                Some(m) => m.draw(&mut rng).1,
                None => DVector::from_fn(d, |_, _| rand::Rng::sample::<f64, _>(&mut rng, normal)),
            }
        })
        .collect()
}

/// `max |grad b(t_k, x)|_F` over probes at each grid time.
pub fn lipschitz_profile(
    field: &dyn VelocityField,
    schedule: &Schedule,
    probes_per_step: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let d = field.dim();
    let mut out = VelocityEval::zeros(d);
    let mut scratch = Scratch::default();
    schedule
        .times()
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let frozen = field.at(t)?;
            let mut worst: f64 = 0.0;
            for x in probe_points(field, t, probes_per_step, crate::rng::derive_seed(seed, k as u64)) {
                frozen.eval_into(&x, Want::JACOBIAN, &mut out, &mut scratch);
                worst = worst.max(out.jacobian().norm());
            }
            Ok(worst)
        })
        .collect()
}

/// Empirical Lipschitz constant `L_hat` over all grid times.
pub fn lipschitz_probe(
    field: &dyn VelocityField,
    schedule: &Schedule,
    probes_per_step: usize,
    seed: u64,
) -> Result<f64> {
    Ok(lipschitz_profile(field, schedule, probes_per_step, seed)?
        .into_iter()
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, LinearField};
    use crate::interpolant::InterpolantSpec;
    use crate::mixture::{GaussianComponent, GaussianMixture};
    use crate::mixture_field::MixtureField;
    use crate::schedule::{make_schedule, ScheduleKind};
    use nalgebra::DMatrix;

    #[test]
    fn constant_and_linear_fields() {
        let s = make_schedule(ScheduleKind::Uniform, 0.2, 0.1, 0.1).unwrap();
        let c = ConstantField {
            value: DVector::from_vec(vec![1.0, 2.0]),
        };
        assert_eq!(lipschitz_probe(&c, &s, 5, 0).unwrap(), 0.0);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 3.0]);
        let l = LinearField { matrix: m.clone() };
        assert!((lipschitz_probe(&l, &s, 5, 0).unwrap() - m.norm()).abs() < 1e-14);
    }

    #[test]
    fn bounds_finite_difference_quotients() {
        let rho0 = GaussianMixture::standard_normal(1).unwrap();
        let rho1 = GaussianMixture::new(vec![
            GaussianComponent::isotropic(0.5, DVector::from_vec(vec![-1.5]), 0.1).unwrap(),
            GaussianComponent::isotropic(0.5, DVector::from_vec(vec![1.5]), 0.1).unwrap(),
        ])
        .unwrap();
        let field = MixtureField::new(rho0, rho1, InterpolantSpec::brownian_bridge(1.0).unwrap()).unwrap();
        let s = make_schedule(ScheduleKind::GeometricMid, 0.2, 0.05, 0.05).unwrap();
        let l_hat = lipschitz_probe(&field, &s, 200, 1).unwrap();
        let mut worst: f64 = 0.0;
        for (k, &t) in s.times().iter().enumerate() {
            let pts = probe_points(&field, t, 2 * (1000 / s.times().len() + 1), 50 + k as u64);
            for pair in pts.chunks(2) {
                let (a, b) = (&pair[0], &pair[1]);
                let ba = field.eval(t, a, Want::VELOCITY).unwrap().b;
                let bb = field.eval(t, b, Want::VELOCITY).unwrap().b;
                worst = worst.max((ba - bb).norm() / (a - b).norm());
            }
        }
        assert!(worst <= l_hat, "fd {worst} vs L_hat {l_hat}");
    }
}
