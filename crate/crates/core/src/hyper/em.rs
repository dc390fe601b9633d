use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{prior_grads, HyperState};
use crate::error::Result;
use crate::kernels::KernelSpec;
use crate::laplace::{LaplaceFit, LaplaceOptions, Problem};
use crate::linalg::Chol;
use crate::model::design::Design;
use crate::model::graph::{FunctionKind, ModelGraph};
use crate::obs::ObservationModel;

/// Variances below this are floored by the closed-form update.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    pub laplace: LaplaceOptions,
    pub max_iter: usize,
    /// Stop when no log-hyperparameter moves by more than this.
    pub tol: f64,
    pub m_step_iters: usize,
    pub m_tol: f64,
    pub max_halvings: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            laplace: LaplaceOptions::default(),
            max_iter: 50,
            tol: 1e-3,
            m_step_iters: 200,
            m_tol: 1e-12,
            max_halvings: 30,
        }
    }
}

/// Q = −½ [tr(K̃⁻¹Σ̃) + log|K̃| + UᵀK̃⁻¹U] for one function.
pub fn em_q(kt: &DMatrix<f64>, u: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let c = Chol::new(kt)?;
    Ok(-0.5 * ((c.solve_mat(sigma)).trace() + c.log_det() + c.quad_form(u)))
}

/// ∂Q/∂γ_h = ½ tr((K̃⁻¹ B K̃⁻¹ − K̃⁻¹) ∂K̃_h) with B = Σ̃ + UUᵀ.
pub fn em_q_grad(kt: &DMatrix<f64>, dkt: &[DMatrix<f64>], u: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    let c = Chol::new(kt)?;
    let kinv = c.inverse();
    let b = sigma + u * u.transpose();
    let m = &kinv * b * &kinv - &kinv;
    Ok(dkt.iter().map(|d| 0.5 * m.dot(d)).collect())
}

/// Maximizer of Q over λ² when K̃ = λ² P Pᵀ: tr((PPᵀ)⁻¹(Σ̃ + UUᵀ)) / dim, floored.
pub fn white_closed_form(p_mat: &DMatrix<f64>, u: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let d = p_mat.nrows();
    let m = p_mat * p_mat.transpose();
    let b = sigma + u * u.transpose();
    let lambda2 = Chol::new(&m)?.solve_mat(&b).trace() / d as f64;
    if lambda2 < VARIANCE_FLOOR {
        log::warn!("closed-form variance {lambda2:e} floored at {VARIANCE_FLOOR:e}");
        return Ok(VARIANCE_FLOOR);
    }
    Ok(lambda2)
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub hyper: HyperState,
    pub graph: ModelGraph,
    /// Laplace fit at the returned hyperparameters.
    pub fit: LaplaceFit,
    /// Laplace evidence after every E-step.
    pub evidence_trace: Vec<f64>,
    /// Accepted Q values of every gradient M-step, one entry per iteration and function.
    pub q_traces: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

/// Free-coordinate prior covariance of function `k` under `kind`.
fn projected_prior(kind: &FunctionKind, design: &Design, k: usize) -> Option<DMatrix<f64>> {
    let fd = &design.functions[k];
    let p = &fd.projection.as_ref()?.p_mat;
    let k_full = match (kind, fd.grid()) {
        (FunctionKind::Gp { kernel }, Some(x)) => kernel.prior_gram(x),
        (FunctionKind::Linear { variance }, None) => DMatrix::identity(fd.dim(), fd.dim()) * *variance,
        _ => return None,
    };
    Some(p * k_full * p.transpose())
}

/// Gradient ascent with backtracking on Q over the learnable log-hyperparameters
/// of one function. Returns the new values and the accepted Q values.
fn m_step_gradient(
    graph: &ModelGraph,
    design: &Design,
    hyper: &HyperState,
    slots: &[usize],
    u: &DVector<f64>,
    sigma: &DMatrix<f64>,
    opts: &EmOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = hyper.slots[slots[0]].func;
    let p = design.functions[k].projection.as_ref().expect("learnable function").p_mat.clone();
    let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut logs = hyper.log_values.clone();
        for (&s, &v) in slots.iter().zip(x) {
            logs[s] = v;
        }
        let g = hyper.with_log_values(&logs).apply(graph);
        let kt = projected_prior(&g.functions[k].decl.kind, design, k).expect("learnable function");
        let q = em_q(&kt, u, sigma)?;
        let all = prior_grads(&g, design, k);
        let dkt: Vec<DMatrix<f64>> = slots.iter().map(|&s| &p * &all[hyper.slots[s].index] * p.transpose()).collect();
        Ok((q, em_q_grad(&kt, &dkt, u, sigma)?))
    };
    let mut x: Vec<f64> = slots.iter().map(|&s| hyper.log_values[s]).collect();
    let (mut q, mut g) = eval(&x)?;
    let mut trace = vec![q];
    let mut step = 1.0;
    for _ in 0..opts.m_step_iters {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax < 1e-12 {
            break;
        }
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + b * step / gmax).collect();
            match eval(&cand) {
                Ok((qc, gc)) if qc.is_finite() && qc >= q => {
                    accepted = Some((cand, qc, gc));
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some((xc, qc, gc)) = accepted else { break };
        let gain = qc - q;
        x = xc;
        q = qc;
        g = gc;
        trace.push(q);
        step = (step * 2.0).min(2.0);
        if gain <= opts.m_tol * (1.0 + q.abs()) {
            break;
        }
    }
    Ok((x, trace))
}

fn has_closed_form(kind: &FunctionKind) -> bool {
    matches!(
        kind,
        FunctionKind::Linear { .. }
            | FunctionKind::Gp {
                kernel: KernelSpec::WhiteScaled { .. }
            }
    )
}

/// Laplace-EM: alternate a Laplace fit with per-function maximization of Q.
/// White and linear priors use the closed-form variance update.
pub fn em_fit(graph: &ModelGraph, design: &Design, obs: ObservationModel, opts: &EmOptions) -> Result<EmFit> {
    let mut hyper = HyperState::from_graph(graph);
    let mut g = hyper.apply(graph);
    let mut fit = Problem::new(&g, design, obs)?.fit(&opts.laplace)?;
    let mut evidence_trace = vec![fit.log_evidence];
    let mut q_traces = Vec::new();
    let mut converged = hyper.is_empty();
    let mut iterations = 0;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let problem = Problem::new(&g, design, obs)?;
        let mut funcs: Vec<usize> = hyper.slots.iter().map(|s| s.func).collect();
        funcs.dedup();
        let mut new_logs = hyper.log_values.clone();
        let mut traces = Vec::new();
        for k in funcs {
            let slots: Vec<usize> = (0..hyper.len()).filter(|&s| hyper.slots[s].func == k).collect();
            let (o, d) = (problem.layout.free_off[k], problem.layout.free_dim[k]);
            if d == 0 {
                continue;
            }
            let u = fit.u.rows(o, d).into_owned();
            let sigma = fit.cov_free.view((o, o), (d, d)).into_owned();
            let kind = &g.functions[k].decl.kind;
            if has_closed_form(kind) {
                let p = &design.functions[k].projection.as_ref().expect("learnable function").p_mat;
                new_logs[slots[0]] = white_closed_form(p, &u, &sigma)?.ln();
            } else {
                let (x, trace) = m_step_gradient(&g, design, &hyper, &slots, &u, &sigma, opts)?;
                for (&s, v) in slots.iter().zip(x) {
                    new_logs[s] = v;
                }
                traces.push(trace);
            }
        }
        q_traces.extend(traces);
        let change = new_logs
            .iter()
            .zip(&hyper.log_values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        hyper = hyper.with_log_values(&new_logs);
        g = hyper.apply(graph);
        let problem = Problem::new(&g, design, obs)?;
        let map = problem.map_estimate(&fit.state, &opts.laplace)?;
        fit = problem.finish(map, &opts.laplace)?;
        evidence_trace.push(fit.log_evidence);
        converged = change < opts.tol;
    }
    Ok(EmFit {
        hyper,
        graph: g,
        fit,
        evidence_trace,
        q_traces,
        iterations,
        converged,
    })
}
