//! Hyperparameter learning by cross-validated likelihood, Laplace-EM, and
//! ELBO maximization. All searches run over log-hyperparameters.

mod cv;
mod em;
mod elbo;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use cv::{cvll, fit_hp_cv, make_folds, map_derivative, CvFit, CvOptions, CvScore, Folds};
pub use elbo::{elbo_hyper_gradient, fit_hp_vi, HpViFit, HpViOptions};
pub use em::{em_fit, em_q, em_q_grad, white_closed_form, EmFit, EmOptions};

use crate::model::design::{Design, Support};
use crate::model::graph::{FunctionKind, ModelGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperMethod {
    Cv,
    Em,
    Elbo,
    Fixed,
}

/// One learnable hyperparameter: function `func`, position `index` in its
/// kernel's canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperSlot {
    pub function: String,
    pub func: usize,
    pub index: usize,
    pub name: String,
}

/// Flat vector of learnable log-hyperparameters with the map back to kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperState {
    pub log_values: Vec<f64>,
    pub slots: Vec<HyperSlot>,
}

impl HyperState {
    /// Learnable hyperparameters of every GP kernel and linear weight prior.
    pub fn from_graph(graph: &ModelGraph) -> Self {
        let mut log_values = Vec::new();
        let mut slots = Vec::new();
        for (k, spec) in graph.functions.iter().enumerate() {
            match &spec.decl.kind {
                FunctionKind::Gp { kernel } => {
                    let logs = kernel.log_hyper();
                    for (i, learn) in kernel.learnable().into_iter().enumerate() {
                        if learn {
                            log_values.push(logs[i]);
                            slots.push(HyperSlot {
                                function: spec.name().to_string(),
                                func: k,
                                index: i,
                                name: kernel.hyper_names()[i].to_string(),
                            });
                        }
                    }
                }
                FunctionKind::Linear { variance } => {
                    log_values.push(variance.ln());
                    slots.push(HyperSlot {
                        function: spec.name().to_string(),
                        func: k,
                        index: 0,
                        name: "variance".to_string(),
                    });
                }
                FunctionKind::Fixed { .. } => {}
            }
        }
        HyperState { log_values, slots }
    }

    pub fn len(&self) -> usize {
        self.log_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_values.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.log_values.iter().map(|v| v.exp()).collect()
    }

    pub fn with_log_values(&self, log_values: &[f64]) -> Self {
        assert_eq!(log_values.len(), self.len());
        HyperState {
            log_values: log_values.to_vec(),
            slots: self.slots.clone(),
        }
    }

    /// Copy of `graph` with these hyperparameters written into its kernels.
    pub fn apply(&self, graph: &ModelGraph) -> ModelGraph {
        let mut g = graph.clone();
        for (slot, &v) in self.slots.iter().zip(&self.log_values) {
            match &mut g.functions[slot.func].decl.kind {
                FunctionKind::Gp { kernel } => {
                    let mut logs = kernel.log_hyper();
                    logs[slot.index] = v;
                    *kernel = kernel.with_log_hyper(&logs);
                }
                FunctionKind::Linear { variance } => *variance = v.exp(),
                FunctionKind::Fixed { .. } => unreachable!("fixed functions have no hyperparameters"),
            }
        }
        g
    }

    /// Picks the learnable entries out of per-function gradients over all hyperparameters.
    pub fn select(&self, per_function: &[Vec<f64>]) -> Vec<f64> {
        self.slots.iter().map(|s| per_function[s.func][s.index]).collect()
    }
}

/// ∂K/∂ log γ for every hyperparameter of function `k` on its support.
pub fn prior_grads(graph: &ModelGraph, design: &Design, k: usize) -> Vec<DMatrix<f64>> {
    match (&graph.functions[k].decl.kind, &design.functions[k].support) {
        (FunctionKind::Gp { kernel }, Support::Grid(x)) => kernel.prior_grad(x),
        (FunctionKind::Linear { variance }, Support::Weights(a)) => vec![DMatrix::identity(*a, *a) * *variance],
        _ => Vec::new(),
    }
}

/// Akaike information criterion 2p − 2 log L with p learnable hyperparameters.
pub fn aic(n_hyper: usize, log_l: f64) -> f64 {
    2.0 * n_hyper as f64 - 2.0 * log_l
}
