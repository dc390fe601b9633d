//! Covariance functions for the Gaussian-process priors.
//!
//! Every hyperparameter is strictly positive and exposed to optimizers in log
//! coordinates: `variance` as log β², `lengthscale` as log ℓ, `period` as log T.
//! Gradients returned by [`KernelSpec::grad_hyper`] are with respect to those
//! logarithms.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GumError, Result};
use crate::linalg::Chol;

/// Diagonal jitter of every prior covariance, relative to the kernel variance.
pub const PRIOR_JITTER: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    /// β² exp(−|x−x'|² / 2ℓ²)
    SquaredExp { variance: f64, lengthscale: f64 },
    /// β² exp(−2 sin²(π|x−x'|/T) / ℓ²)
    Periodic {
        variance: f64,
        lengthscale: f64,
        period: f64,
    },
    /// σ² on the diagonal of the unique-value grid, zero elsewhere.
    WhiteScaled { variance: f64 },
}

impl KernelSpec {
    pub fn squared_exp(variance: f64, lengthscale: f64) -> Self {
        KernelSpec::SquaredExp {
            variance,
            lengthscale,
        }
    }

    pub fn periodic(variance: f64, lengthscale: f64, period: f64) -> Self {
        KernelSpec::Periodic {
            variance,
            lengthscale,
            period,
        }
    }

    pub fn white(variance: f64) -> Self {
        KernelSpec::WhiteScaled { variance }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::SquaredExp { .. } => "squared_exp",
            KernelSpec::Periodic { .. } => "periodic",
            KernelSpec::WhiteScaled { .. } => "white",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.hyper().iter().all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(GumError::InvalidInput(format!(
                "kernel hyperparameters must be finite and positive: {self:?}"
            )))
        }
    }

    /// Prior variance k(x, x).
    pub fn variance(&self) -> f64 {
        match *self {
            KernelSpec::SquaredExp { variance, .. }
            | KernelSpec::Periodic { variance, .. }
            | KernelSpec::WhiteScaled { variance } => variance,
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let d = (x - y).abs();
        match *self {
            KernelSpec::SquaredExp {
                variance,
                lengthscale,
            } => variance * (-d * d / (2.0 * lengthscale * lengthscale)).exp(),
            KernelSpec::Periodic {
                variance,
                lengthscale,
                period,
            } => {
                let s = (PI * d / period).sin();
                variance * (-2.0 * s * s / (lengthscale * lengthscale)).exp()
            }
            KernelSpec::WhiteScaled { variance } => {
                if d == 0.0 {
                    variance
                } else {
                    0.0
                }
            }
        }
    }

    /// Gram matrix over `xs` with `jitter` added to the diagonal.
    pub fn gram(&self, xs: &[f64], jitter: f64) -> DMatrix<f64> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.eval(xs[i], xs[i]) + jitter;
            for j in 0..i {
                let v = self.eval(xs[i], xs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// Prior covariance over `xs`: the Gram matrix plus a fixed jitter of
    /// [`PRIOR_JITTER`] times the variance.
    pub fn prior_gram(&self, xs: &[f64]) -> DMatrix<f64> {
        self.gram(xs, PRIOR_JITTER * self.variance())
    }

    /// ∂/∂ log γ_j of [`KernelSpec::prior_gram`]; the jitter scales with the variance.
    pub fn prior_grad(&self, xs: &[f64]) -> Vec<DMatrix<f64>> {
        let mut g = self.grad_hyper(xs);
        for i in 0..xs.len() {
            g[0][(i, i)] += PRIOR_JITTER * self.variance();
        }
        g
    }

    /// Prior covariance factorized with the jitter ladder; fails with
    /// `NotPositiveDefinite` when even the largest jitter is not enough.
    pub fn gram_chol(&self, xs: &[f64]) -> Result<(DMatrix<f64>, Chol)> {
        let k = self.prior_gram(xs);
        let c = Chol::new(&k)?;
        Ok((k, c))
    }

    /// Cross-covariance K(xs, zs).
    pub fn cross(&self, xs: &[f64], zs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), zs.len(), |i, j| self.eval(xs[i], zs[j]))
    }

    /// Positive hyperparameters in canonical order.
    pub fn hyper(&self) -> Vec<f64> {
        match *self {
            KernelSpec::SquaredExp {
                variance,
                lengthscale,
            } => vec![variance, lengthscale],
            KernelSpec::Periodic {
                variance,
                lengthscale,
                period,
            } => vec![variance, lengthscale, period],
            KernelSpec::WhiteScaled { variance } => vec![variance],
        }
    }

    pub fn hyper_names(&self) -> &'static [&'static str] {
        match self {
            KernelSpec::SquaredExp { .. } => &["variance", "lengthscale"],
            KernelSpec::Periodic { .. } => &["variance", "lengthscale", "period"],
            KernelSpec::WhiteScaled { .. } => &["variance"],
        }
    }

    /// Which hyperparameters are learned; periods stay fixed.
    pub fn learnable(&self) -> Vec<bool> {
        match self {
            KernelSpec::SquaredExp { .. } => vec![true, true],
            KernelSpec::Periodic { .. } => vec![true, true, false],
            KernelSpec::WhiteScaled { .. } => vec![true],
        }
    }

    pub fn log_hyper(&self) -> Vec<f64> {
        self.hyper().iter().map(|v| v.ln()).collect()
    }

    pub fn with_log_hyper(&self, log_values: &[f64]) -> Self {
        let v: Vec<f64> = log_values.iter().map(|l| l.exp()).collect();
        match self {
            KernelSpec::SquaredExp { .. } => KernelSpec::SquaredExp {
                variance: v[0],
                lengthscale: v[1],
            },
            KernelSpec::Periodic { .. } => KernelSpec::Periodic {
                variance: v[0],
                lengthscale: v[1],
                period: v[2],
            },
            KernelSpec::WhiteScaled { .. } => KernelSpec::WhiteScaled { variance: v[0] },
        }
    }

    /// ∂k(x, y)/∂ log γ_j for every hyperparameter γ_j.
    fn grad_point(&self, x: f64, y: f64, out: &mut [f64]) {
        let d = (x - y).abs();
        let k = self.eval(x, y);
        match *self {
            KernelSpec::SquaredExp { lengthscale, .. } => {
                out[0] = k;
                out[1] = k * d * d / (lengthscale * lengthscale);
            }
            KernelSpec::Periodic {
                lengthscale,
                period,
                ..
            } => {
                let u = PI * d / period;
                let (s, c) = u.sin_cos();
                let l2 = lengthscale * lengthscale;
                out[0] = k;
                out[1] = k * 4.0 * s * s / l2;
                out[2] = k * 4.0 * u * s * c / l2;
            }
            KernelSpec::WhiteScaled { .. } => {
                out[0] = k;
            }
        }
    }

    /// ∂K/∂ log γ_j over the Gram matrix of `xs`, one matrix per hyperparameter.
    pub fn grad_hyper(&self, xs: &[f64]) -> Vec<DMatrix<f64>> {
        self.cross_grad(xs, xs)
    }

    /// ∂K(xs, zs)/∂ log γ_j, one matrix per hyperparameter.
    pub fn cross_grad(&self, xs: &[f64], zs: &[f64]) -> Vec<DMatrix<f64>> {
        let h = self.hyper().len();
        let mut out = vec![DMatrix::zeros(xs.len(), zs.len()); h];
        let mut buf = vec![0.0; h];
        for (i, &x) in xs.iter().enumerate() {
            for (j, &z) in zs.iter().enumerate() {
                self.grad_point(x, z, &mut buf);
                for (m, g) in out.iter_mut().zip(&buf) {
                    m[(i, j)] = *g;
                }
            }
        }
        out
    }
}
