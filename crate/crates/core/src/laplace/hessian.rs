use nalgebra::{DMatrix, DVector};

use super::Problem;
use crate::error::{GumError, Result};
use crate::linalg::{min_eigenvalue, symmetrize, Chol};
use crate::model::params::{projection_matrix, ParameterState};
use crate::model::predictor::{factor_values, jacobian_theta, predictor_from_factors, second_derivative_theta};

/// Negative Hessian of the log joint over all free coordinates:
/// JᵀWJ − Σ_n r_n ∂²ρ_n + K̃⁻¹, with r_n = (y_n − g⁻¹(ρ_n))/s.
/// `gauss_newton` drops the product-coupling term.
pub fn full_hessian(problem: &Problem<'_>, state: &ParameterState, gauss_newton: bool) -> DMatrix<f64> {
    let design = problem.design;
    let layout = &problem.layout;
    let fv = factor_values(state, design);
    let rho = predictor_from_factors(&fv, state, design);
    let jt = jacobian_theta(state, design, layout, &fv);
    let p = projection_matrix(design, layout);
    let j = &jt * p.transpose();
    let w = DVector::from_iterator(design.n_obs, rho.iter().map(|&r| problem.obs.weight(r)));
    let mut wj = j.clone();
    for (o, wo) in w.iter().enumerate() {
        wj.row_mut(o).scale_mut(*wo);
    }
    let mut h = j.transpose() * wj;
    if !gauss_newton {
        let resid: Vec<f64> = (0..design.n_obs)
            .map(|o| problem.obs.dloglik(design.y[o], rho[o]))
            .collect();
        let t = second_derivative_theta(state, design, layout, &fv, &resid);
        h -= &p * t * p.transpose();
    }
    h += problem.prior.precision(layout);
    symmetrize(&mut h);
    h
}

/// Σ = H⁻¹, failing when H is not positive definite.
pub fn posterior_covariance(h: &DMatrix<f64>) -> Result<(DMatrix<f64>, Chol)> {
    match Chol::new(h) {
        Ok(c) if c.jitter == 0.0 => {
            let mut s = c.inverse();
            symmetrize(&mut s);
            Ok((s, c))
        }
        _ => Err(GumError::HessianNotPD {
            min_eigenvalue: min_eigenvalue(h),
        }),
    }
}

/// Gradient of the log joint over all free coordinates: Jᵀr − K̃⁻¹U.
pub fn log_joint_gradient(problem: &Problem<'_>, state: &ParameterState) -> DVector<f64> {
    let design = problem.design;
    let layout = &problem.layout;
    let fv = factor_values(state, design);
    let rho = predictor_from_factors(&fv, state, design);
    let jt = jacobian_theta(state, design, layout, &fv);
    let p = projection_matrix(design, layout);
    let resid = DVector::from_iterator(design.n_obs, (0..design.n_obs).map(|o| problem.obs.dloglik(design.y[o], rho[o])));
    let u = state.to_free(design, layout);
    p * (jt.transpose() * resid) - problem.prior.precision_times(&u, layout)
}
