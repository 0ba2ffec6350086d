//! Named endpoint pairs shipped with the harness.

use nalgebra::DVector;

use crate::error::{IlabError, Result};
use crate::mixture::{GaussianComponent, GaussianMixture};

pub const PRESETS: &[&str] = &["symmetric", "shift", "bimodal-1d", "grid-checker-2d", "iso-mix-d"];

/// Dimension used by `iso-mix-d` when none is given.
pub const DEFAULT_ISO_DIM: usize = 2;

fn e1(d: usize, scale: f64) -> DVector<f64> {
    let mut v = DVector::zeros(d);
    v[0] = scale;
    v
}

fn iso(weight: f64, mean: DVector<f64>, variance: f64) -> Result<GaussianComponent> {
    GaussianComponent::isotropic(weight, mean, variance)
}

/// `N(0, I) -> N(0, I)`: the velocity vanishes identically.
pub fn symmetric(d: usize) -> Result<(GaussianMixture, GaussianMixture)> {
    Ok((
        GaussianMixture::standard_normal(d)?,
        GaussianMixture::standard_normal(d)?,
    ))
}

/// `N(0, I) -> N(2 e_1, I)`: constant velocity `2 e_1`.
pub fn shift(d: usize) -> Result<(GaussianMixture, GaussianMixture)> {
    Ok((
        GaussianMixture::standard_normal(d)?,
        GaussianMixture::isotropic_gaussian(e1(d, 2.0), 1.0)?,
    ))
}

/// `N(0, 1) -> (N(-2, 1/4) + N(2, 1/4)) / 2`.
pub fn bimodal_1d() -> Result<(GaussianMixture, GaussianMixture)> {
    let rho1 = GaussianMixture::new(vec![
        iso(0.5, DVector::from_element(1, -2.0), 0.25)?,
        iso(0.5, DVector::from_element(1, 2.0), 0.25)?,
    ])?;
    Ok((GaussianMixture::standard_normal(1)?, rho1))
}

/// `N(0, I_2)` to eight narrow Gaussians on the dark cells of a 4x4
/// checkerboard over `[-2, 2]^2`.
pub fn grid_checker_2d() -> Result<(GaussianMixture, GaussianMixture)> {
    let mut comps = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            if (i + j) % 2 == 0 {
                let c = DVector::from_vec(vec![-1.5 + i as f64, -1.5 + j as f64]);
                comps.push(iso(0.125, c, 0.04)?);
            }
        }
    }
    Ok((GaussianMixture::standard_normal(2)?, GaussianMixture::new(comps)?))
}

/// Two-component isotropic mixtures with means `+-e_1` at both ends;
/// unit variance at `t = 0`, variance `1/4` at `t = 1`.
pub fn iso_mix(d: usize) -> Result<(GaussianMixture, GaussianMixture)> {
    let pair = |variance: f64| -> Result<GaussianMixture> {
        GaussianMixture::new(vec![iso(0.5, e1(d, -1.0), variance)?, iso(0.5, e1(d, 1.0), variance)?])
    };
    Ok((pair(1.0)?, pair(0.25)?))
}

/// Instantiates a preset; `dim` applies to `symmetric`, `shift` (default 1)
/// and `iso-mix-d` (default 2).
pub fn preset(name: &str, dim: Option<usize>) -> Result<(GaussianMixture, GaussianMixture)> {
    let fixed = |d: usize| match dim {
        Some(x) if x != d => Err(IlabError::Config(format!("preset '{name}' is fixed at d = {d}"))),
        _ => Ok(()),
    };
    if dim == Some(0) {
        return Err(IlabError::Config("dimension must be positive".into()));
    }
    match name {
        "symmetric" => symmetric(dim.unwrap_or(1)),
        "shift" => shift(dim.unwrap_or(1)),
        "bimodal-1d" => {
            fixed(1)?;
            bimodal_1d()
        }
        "grid-checker-2d" => {
            fixed(2)?;
            grid_checker_2d()
        }
        "iso-mix-d" => iso_mix(dim.unwrap_or(DEFAULT_ISO_DIM)),
        _ => Err(IlabError::Config(format!("unknown preset '{name}'"))),
    }
}
