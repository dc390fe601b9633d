use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::HyperState;
use crate::error::Result;
use crate::model::design::Design;
use crate::model::graph::{FunctionKind, ModelGraph};
use crate::obs::ObservationModel;
use crate::vi::{fit_vi, InducingConfig, McNoise, VariationalFit, VariationalModel, VariationalState, ViOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HpViOptions {
    pub vi: ViOptions,
    pub max_outer: usize,
    pub tol: f64,
    pub max_halvings: usize,
    /// Largest change of any log-hyperparameter in one step.
    pub max_step: f64,
}

impl Default for HpViOptions {
    fn default() -> Self {
        HpViOptions {
            vi: ViOptions::default(),
            max_outer: 50,
            tol: 1e-8,
            max_halvings: 20,
            max_step: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HpViFit {
    pub hyper: HyperState,
    pub graph: ModelGraph,
    pub fit: VariationalFit,
    /// Evaluation ELBO after every inner fit.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Gradient of the fixed-noise ELBO over the learnable log-hyperparameters, q fixed.
pub fn elbo_hyper_gradient(model: &VariationalModel<'_>, hyper: &HyperState, state: &VariationalState, noise: &McNoise) -> Vec<f64> {
    hyper.select(&model.elbo_grad_hyper(state, noise))
}

/// ∂K_zz/∂ log γ of every hyperparameter of function `k`.
fn inducing_grads(model: &VariationalModel<'_>, k: usize) -> Vec<DMatrix<f64>> {
    match &model.graph.functions[k].decl.kind {
        FunctionKind::Gp { kernel } => kernel.prior_grad(model.config.z[k].as_ref().expect("inducing inputs")),
        FunctionKind::Linear { .. } => vec![model.prior_cov(k).expect("linear prior").clone()],
        FunctionKind::Fixed { .. } => Vec::new(),
    }
}

/// ELBO gradient over the learnable log-hyperparameters with q held fixed in
/// whitened coordinates m = R⁻¹μ, S = R⁻¹L, R the prior Cholesky factor. Uses
/// dR = R Φ(R⁻¹ dK R⁻ᵀ), Φ taking the lower triangle with a halved diagonal.
fn whitened_gradient(model: &VariationalModel<'_>, hyper: &HyperState, state: &VariationalState, noise: &McNoise) -> Vec<f64> {
    let direct = model.elbo_grad_hyper(state, noise);
    let (_, g) = model.elbo_grad(state, noise);
    let r = model.prior_state().chol;
    let white_mu = r.solve_lower_triangular(&state.mu).expect("triangular prior factor");
    let white_l = r.solve_lower_triangular(&state.chol).expect("triangular prior factor");
    hyper
        .slots
        .iter()
        .map(|slot| {
            let k = slot.func;
            let Some((start, m)) = model.inducing_range(k) else {
                return 0.0;
            };
            let rk = r.view((start, start), (m, m)).into_owned();
            let dk = &inducing_grads(model, k)[slot.index];
            let left = rk.solve_lower_triangular(dk).expect("triangular prior factor");
            let mut x = rk.solve_lower_triangular(&left.transpose()).expect("triangular prior factor");
            for i in 0..m {
                x[(i, i)] *= 0.5;
                for j in (i + 1)..m {
                    x[(i, j)] = 0.0;
                }
            }
            let dr = &rk * x;
            let d_mu = &dr * white_mu.rows(start, m);
            let d_l = &dr * white_l.rows(start, m);
            direct[k][slot.index] + g.mu.rows(start, m).dot(&d_mu) + g.chol.rows(start, m).dot(&d_l)
        })
        .collect()
}

/// The same q in whitened coordinates, re-expressed under another model's prior.
fn carry_whitened(from: &VariationalModel<'_>, to: &VariationalModel<'_>, state: &VariationalState) -> VariationalState {
    let r = from.prior_state().chol;
    let r2 = to.prior_state().chol;
    VariationalState {
        mu: &r2 * r.solve_lower_triangular(&state.mu).expect("triangular prior factor"),
        chol: &r2 * r.solve_lower_triangular(&state.chol).expect("triangular prior factor"),
        offset_mean: state.offset_mean.clone(),
        offset_log_sd: state.offset_log_sd.clone(),
    }
}

/// Gradient ascent in γ on the ELBO maximized over q. The direction is the
/// ELBO gradient at the fitted q held fixed in whitened coordinates; each
/// trial step refits q from the carried state and is kept only if the
/// refitted ELBO improves.
pub fn fit_hp_vi(graph: &ModelGraph, design: &Design, obs: ObservationModel, config: &InducingConfig, opts: &HpViOptions) -> Result<HpViFit> {
    let mut hyper = HyperState::from_graph(graph);
    let mut g = hyper.apply(graph);
    let mut model_obs = obs;
    let mut fit = fit_vi(&VariationalModel::new(&g, design, model_obs, config.clone())?, None, &opts.vi)?;
    let mut trace = vec![fit.elbo.value];
    let mut converged = hyper.is_empty();
    let mut iterations = 0;
    let mut step = opts.max_step;
    while !converged && iterations < opts.max_outer {
        iterations += 1;
        model_obs = fit.obs;
        let model = VariationalModel::new(&g, design, model_obs, config.clone())?;
        let noise = model.noise(opts.vi.eval_seed, opts.vi.n_eval);
        let grad = whitened_gradient(&model, &hyper, &fit.state, &noise);
        let gmax = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(gmax > 1e-12) {
            converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = hyper.log_values.iter().zip(&grad).map(|(x, d)| x + d * step / gmax).collect();
            let cand = hyper.with_log_values(&cand);
            let cg = cand.apply(graph);
            if let Ok(m) = VariationalModel::new(&cg, design, model_obs, config.clone()) {
                let start = carry_whitened(&model, &m, &fit.state);
                if let Ok(f) = fit_vi(&m, Some(&start), &opts.vi) {
                    if f.elbo.value.is_finite() && f.elbo.value > fit.elbo.value {
                        accepted = Some((cand, cg, f));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((cand, cg, f)) = accepted else {
            converged = true;
            break;
        };
        let gain = f.elbo.value - fit.elbo.value;
        hyper = cand;
        g = cg;
        fit = f;
        trace.push(fit.elbo.value);
        step = (step * 2.0).min(opts.max_step);
        converged = gain <= opts.tol * (1.0 + fit.elbo.value.abs());
    }
    Ok(HpViFit {
        graph: g,
        hyper,
        fit,
        trace,
        iterations,
        converged,
    })
}
