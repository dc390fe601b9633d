//! Gaussian posterior over one function, shared by both inference backends.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::kernels::KernelSpec;
use crate::linalg::Chol;
use crate::model::design::Support;
use crate::model::fixed::FixedFn;
use crate::model::graph::FunctionKind;

/// MVN posterior over a function's values at support points (a grid or inducing
/// inputs), or over linear weights. Predictions elsewhere compose the GP
/// conditional with this posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionPosterior {
    Gp {
        kernel: KernelSpec,
        support: Vec<f64>,
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Linear {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Fixed {
        func: FixedFn,
    },
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

impl FunctionPosterior {
    pub fn from_parts(kind: &FunctionKind, support: &Support, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        match (kind, support) {
            (FunctionKind::Gp { kernel }, Support::Grid(x)) => FunctionPosterior::Gp {
                kernel: kernel.clone(),
                support: x.clone(),
                mean: mean.iter().copied().collect(),
                cov: rows(&cov),
            },
            (FunctionKind::Linear { .. }, _) => FunctionPosterior::Linear {
                mean: mean.iter().copied().collect(),
                cov: rows(&cov),
            },
            (FunctionKind::Fixed { func }, _) => FunctionPosterior::Fixed { func: *func },
            _ => unreachable!("support matches kind"),
        }
    }

    pub fn gp(kernel: KernelSpec, support: Vec<f64>, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        FunctionPosterior::Gp {
            kernel,
            support,
            mean: mean.iter().copied().collect(),
            cov: rows(&cov),
        }
    }

    /// Posterior mean and variance at scalar query inputs. Linear functions take
    /// `arity` consecutive values per query.
    pub fn predict(&self, xs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.predict_with(xs, false)
    }

    /// As [`predict`](Self::predict); `cross_variance` switches GP variances to the form
    /// k(x,x) − k(x,z)ᵀ Σ⁻¹ k(x,z).
    pub fn predict_with(&self, xs: &[f64], cross_variance: bool) -> (Vec<f64>, Vec<f64>) {
        match self {
            FunctionPosterior::Fixed { func } => (xs.iter().map(|&x| func.eval(x)).collect(), vec![0.0; xs.len()]),
            FunctionPosterior::Linear { mean, cov } => {
                let a = mean.len();
                let s = matrix(cov);
                let m = DVector::from_column_slice(mean);
                xs.chunks(a)
                    .map(|x| {
                        let v = DVector::from_column_slice(x);
                        (m.dot(&v), (v.transpose() * &s * &v)[0].max(0.0))
                    })
                    .unzip()
            }
            FunctionPosterior::Gp {
                kernel,
                support,
                mean,
                cov,
            } => {
                let m = DVector::from_column_slice(mean);
                let s = matrix(cov);
                let kz = Chol::new(&kernel.prior_gram(support)).expect("kernel gram factorizable");
                let sigma_chol = if cross_variance { Chol::new(&s).ok() } else { None };
                let mut means = Vec::with_capacity(xs.len());
                let mut vars = Vec::with_capacity(xs.len());
                for &x in xs {
                    if let Ok(j) = support.binary_search_by(|g| g.total_cmp(&x)) {
                        if !cross_variance {
                            means.push(m[j]);
                            vars.push(s[(j, j)].max(0.0));
                            continue;
                        }
                    }
                    let kx = DVector::from_iterator(support.len(), support.iter().map(|&z| kernel.eval(x, z)));
                    let a = kz.solve(&kx);
                    let kxx = kernel.eval(x, x);
                    means.push(a.dot(&m));
                    let v = if cross_variance {
                        match &sigma_chol {
                            Some(c) => kxx - c.quad_form(&kx),
                            None => f64::NAN,
                        }
                    } else {
                        (kxx - kx.dot(&a) + (a.transpose() * &s * &a)[0]).max(0.0)
                    };
                    vars.push(v);
                }
                (means, vars)
            }
        }
    }

    pub fn support(&self) -> Option<&[f64]> {
        match self {
            FunctionPosterior::Gp { support, .. } => Some(support),
            _ => None,
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            FunctionPosterior::Gp { mean, .. } | FunctionPosterior::Linear { mean, .. } => mean.clone(),
            FunctionPosterior::Fixed { .. } => Vec::new(),
        }
    }

    pub fn sd(&self) -> Vec<f64> {
        match self {
            FunctionPosterior::Gp { cov, .. } | FunctionPosterior::Linear { cov, .. } => {
                (0..cov.len()).map(|i| cov[i][i].max(0.0).sqrt()).collect()
            }
            FunctionPosterior::Fixed { .. } => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post() -> FunctionPosterior {
        let kernel = KernelSpec::squared_exp(2.0, 0.3);
        let z = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let m = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0, 0.5]);
        let s = DMatrix::identity(5, 5) * 0.01;
        FunctionPosterior::gp(kernel, z, m, s)
    }

    #[test]
    fn interpolates_at_support() {
        let p = post();
        let (m, v) = p.predict(&[0.25, 1.0]);
        assert_eq!(m, vec![-0.2, 0.5]);
        assert_eq!(v, vec![0.01, 0.01]);
        let (m2, v2) = p.predict(&[0.2500000001]);
        assert!((m2[0] + 0.2).abs() < 1e-6);
        assert!((v2[0] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let (m, v) = post().predict(&[10.0]);
        assert!(m[0].abs() < 1e-12);
        assert!((v[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn linear_prediction() {
        let p = FunctionPosterior::Linear {
            mean: vec![2.0],
            cov: vec![vec![0.5]],
        };
        let (m, v) = p.predict(&[3.0]);
        assert_eq!(m, vec![6.0]);
        assert_eq!(v, vec![4.5]);
    }
}
