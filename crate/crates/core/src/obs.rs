//! Exponential-family observation models with canonical links.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{GumError, Result};

/// Predictors above this are clipped inside the Poisson exponential.
pub const POISSON_CLIP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ObservationModel {
    /// Identity link; `dispersion` is the noise variance s.
    Gaussian { dispersion: f64 },
    /// Logit link.
    Bernoulli,
    /// Log link.
    Poisson,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + eˣ) without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn clipped_exp(rho: f64) -> f64 {
    if rho > POISSON_CLIP {
        log::debug!("predictor {rho} clipped at {POISSON_CLIP} in exp");
        POISSON_CLIP.exp()
    } else {
        rho.exp()
    }
}

impl ObservationModel {
    pub fn gaussian(dispersion: f64) -> Result<Self> {
        if dispersion.is_finite() && dispersion > 0.0 {
            Ok(ObservationModel::Gaussian { dispersion })
        } else {
            Err(GumError::InvalidInput(format!(
                "Gaussian dispersion must be positive, got {dispersion}"
            )))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObservationModel::Gaussian { .. } => "gaussian",
            ObservationModel::Bernoulli => "bernoulli",
            ObservationModel::Poisson => "poisson",
        }
    }

    pub fn dispersion(&self) -> f64 {
        match self {
            ObservationModel::Gaussian { dispersion } => *dispersion,
            _ => 1.0,
        }
    }

    pub fn with_dispersion(&self, s: f64) -> Self {
        match self {
            ObservationModel::Gaussian { .. } => ObservationModel::Gaussian { dispersion: s },
            other => *other,
        }
    }

    pub fn inv_link(&self, rho: f64) -> f64 {
        match self {
            ObservationModel::Gaussian { .. } => rho,
            ObservationModel::Bernoulli => sigmoid(rho),
            ObservationModel::Poisson => clipped_exp(rho),
        }
    }

    /// R = (g⁻¹)′(ρ)
    pub fn curvature(&self, rho: f64) -> f64 {
        match self {
            ObservationModel::Gaussian { .. } => 1.0,
            ObservationModel::Bernoulli => {
                let p = sigmoid(rho);
                p * (1.0 - p)
            }
            ObservationModel::Poisson => clipped_exp(rho),
        }
    }

    /// Exact log density of one observation, normalizers included.
    pub fn loglik_point(&self, y: f64, rho: f64) -> f64 {
        match self {
            ObservationModel::Gaussian { dispersion: s } => {
                -0.5 * (2.0 * PI * s).ln() - (y - rho).powi(2) / (2.0 * s)
            }
            ObservationModel::Bernoulli => y * rho - softplus(rho),
            ObservationModel::Poisson => {
                let r = rho.min(POISSON_CLIP);
                y * r - clipped_exp(rho) - ln_gamma(y + 1.0)
            }
        }
    }

    pub fn loglik(&self, y: &[f64], rho: &[f64]) -> f64 {
        y.iter().zip(rho).map(|(&y, &r)| self.loglik_point(y, r)).sum()
    }

    /// ∂ log p / ∂ρ = (y − g⁻¹(ρ)) / s
    pub fn dloglik(&self, y: f64, rho: f64) -> f64 {
        (y - self.inv_link(rho)) / self.dispersion()
    }

    /// −∂² log p / ∂ρ² = R / s
    pub fn weight(&self, rho: f64) -> f64 {
        self.curvature(rho) / self.dispersion()
    }

    pub fn check_support(&self, y: &[f64]) -> Result<()> {
        for (index, &value) in y.iter().enumerate() {
            let ok = match self {
                ObservationModel::Gaussian { .. } => value.is_finite(),
                ObservationModel::Bernoulli => value == 0.0 || value == 1.0,
                ObservationModel::Poisson => value >= 0.0 && value.fract() == 0.0 && value.is_finite(),
            };
            if !ok {
                return Err(GumError::SupportViolation {
                    family: self.name(),
                    index,
                    value,
                });
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rho: &[f64], rng: &mut R) -> Vec<f64> {
        rho.iter()
            .map(|&r| match self {
                ObservationModel::Gaussian { dispersion } => {
                    Normal::new(r, dispersion.sqrt()).expect("positive dispersion").sample(rng)
                }
                ObservationModel::Bernoulli => f64::from(u8::from(rng.random::<f64>() < sigmoid(r))),
                ObservationModel::Poisson => {
                    let lambda = clipped_exp(r);
                    if lambda <= 0.0 {
                        0.0
                    } else {
                        Poisson::new(lambda).expect("positive rate").sample(rng)
                    }
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn links_and_weights() {
        assert_eq!(ObservationModel::Poisson.inv_link(0.0), 1.0);
        assert_eq!(ObservationModel::Bernoulli.inv_link(0.0), 0.5);
        let g = ObservationModel::gaussian(1.0).unwrap();
        assert_eq!(g.inv_link(-3.2), -3.2);
        assert_eq!(ObservationModel::Bernoulli.curvature(0.0), 0.25);
        assert_eq!(ObservationModel::Poisson.curvature(0.0), 1.0);
        assert_eq!(g.curvature(7.0), 1.0);
    }

    #[test]
    fn log_densities() {
        assert!((ObservationModel::Bernoulli.loglik_point(1.0, 0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!((ObservationModel::Poisson.loglik_point(0.0, 0.0) + 1.0).abs() < 1e-15);
        let g = ObservationModel::gaussian(1.0).unwrap();
        assert!((g.loglik_point(0.4, 0.4) + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn support_and_dispersion() {
        assert!(ObservationModel::gaussian(0.0).is_err());
        assert!(matches!(
            ObservationModel::Bernoulli.check_support(&[0.0, 2.0]),
            Err(GumError::SupportViolation { index: 1, .. })
        ));
        assert!(ObservationModel::Poisson.check_support(&[0.5]).is_err());
        assert!(ObservationModel::Poisson.check_support(&[0.0, 3.0]).is_ok());
    }

    #[test]
    fn sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = ObservationModel::Poisson.sample(&vec![0.0; 100_000], &mut rng);
        let m = y.iter().sum::<f64>() / y.len() as f64;
        assert!((0.98..=1.02).contains(&m), "{m}");
        let b = ObservationModel::Bernoulli.sample(&[20.0; 100], &mut rng);
        assert!(b.iter().all(|&v| v == 1.0));
        let a = ObservationModel::Poisson.sample(&[0.3; 50], &mut ChaCha8Rng::seed_from_u64(9));
        let c = ObservationModel::Poisson.sample(&[0.3; 50], &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, c);
    }

    #[test]
    fn stable_logistic() {
        for r in [-700.0, -50.0, 0.0, 50.0, 700.0] {
            let l = ObservationModel::Bernoulli.loglik_point(1.0, r);
            assert!(l.is_finite());
            assert!(ObservationModel::Bernoulli.curvature(r).is_finite());
        }
    }

    fn families() -> impl Strategy<Value = (ObservationModel, f64)> {
        prop_oneof![
            (0.1f64..3.0, -5.0f64..5.0).prop_map(|(s, y)| (ObservationModel::Gaussian { dispersion: s }, y)),
            (0u8..2).prop_map(|y| (ObservationModel::Bernoulli, y as f64)),
            (0u8..20).prop_map(|y| (ObservationModel::Poisson, y as f64)),
        ]
    }

    proptest! {
        #[test]
        fn derivatives_match_finite_differences((m, y) in families(), rho in -4.0f64..4.0) {
            let h = 1e-5;
            let fd1 = (m.loglik_point(y, rho + h) - m.loglik_point(y, rho - h)) / (2.0 * h);
            let an1 = m.dloglik(y, rho);
            prop_assert!((fd1 - an1).abs() <= 1e-7 * an1.abs().max(1.0));
            let fd2 = -(m.dloglik(y, rho + h) - m.dloglik(y, rho - h)) / (2.0 * h);
            let an2 = m.weight(rho);
            prop_assert!((fd2 - an2).abs() <= 1e-7 * an2.abs().max(1.0));
        }
    }
}
