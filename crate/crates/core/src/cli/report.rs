//! Fit reports and predictions from them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{FitConfig, Method};
use crate::dsl::format;
use crate::error::{GumError, Result};
use crate::hyper::{aic, em_fit, fit_hp_cv, fit_hp_vi, HyperMethod, HyperState};
use crate::laplace::fit_design;
use crate::model::graph::{constraint_table, Offset};
use crate::model::{Dataset, Design, FunctionKind, Layout, ModelGraph};
use crate::obs::ObservationModel;
use crate::posterior::FunctionPosterior;
use crate::vi::{fit_vi, init_inducing, VariationalModel};

pub const FIT_REPORT_FORMAT: &str = "gum-fit-report/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub fingerprint: String,
    pub n_obs: usize,
    pub n_rows: usize,
    pub columns: Vec<String>,
}

impl DataSummary {
    pub fn of(data: &Dataset) -> Self {
        DataSummary {
            fingerprint: data.fingerprint(),
            n_obs: data.n_obs(),
            n_rows: data.n_rows(),
            columns: data.names.clone(),
        }
    }
}

/// Equal-width binning applied to a function's inputs before gridding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Binning {
    /// Snaps `v` to its bin centre; values outside [lo, hi] are left alone.
    pub fn snap(&self, v: f64) -> f64 {
        if !(self.hi > self.lo) || self.bins < 2 || v < self.lo || v > self.hi {
            return v;
        }
        let w = (self.hi - self.lo) / self.bins as f64;
        let b = (((v - self.lo) / w) as usize).min(self.bins - 1);
        self.lo + (b as f64 + 0.5) * w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionReport {
    pub name: String,
    pub kind: String,
    pub constraint: String,
    /// Unique (binned) inputs; empty for linear and fixed functions.
    pub grid: Vec<f64>,
    /// Posterior mean and SD on the grid, or of the weights of a linear function.
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binning: Option<Binning>,
    pub posterior: FunctionPosterior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetReport {
    pub name: String,
    /// Position of a factor offset; both absent for the intercept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<usize>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperValue {
    pub function: String,
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub format: String,
    pub config: FitConfig,
    pub data: DataSummary,
    /// Canonical form of the formula.
    pub formula: String,
    pub constraints: BTreeMap<String, String>,
    pub method: Method,
    /// `log_evidence` (Laplace) or `elbo` (variational).
    pub objective: String,
    pub log_marginal: f64,
    /// Number of learnable hyperparameters, the p of the AIC.
    pub n_hyper: usize,
    pub aic: f64,
    pub hyperparameters: Vec<HyperValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispersion: Option<f64>,
    pub functions: Vec<FunctionReport>,
    pub offsets: Vec<OffsetReport>,
    /// Predictor with every function at its posterior mean, per observation.
    pub fitted: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Log joint per accepted Newton step, or evaluation ELBO per epoch.
    pub trace: Vec<f64>,
    /// Hyperparameter search objective per accepted step; empty when fixed.
    pub hyper_trace: Vec<f64>,
    pub hyper_converged: bool,
    pub max_constraint_residual: f64,
    pub warnings: Vec<String>,
}

/// Input ranges of every binned GP function, as the design computed them.
fn binnings(graph: &ModelGraph, data: &Dataset) -> Result<Vec<Option<Binning>>> {
    graph
        .functions
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let (Some(bins), FunctionKind::Gp { .. }) = (spec.decl.bins, &spec.decl.kind) else {
                return Ok(None);
            };
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for b in &graph.blocks {
                for f in &b.factors {
                    for t in f.terms.iter().filter(|t| t.func == k) {
                        for &v in data.finite_column(&t.vars[0])? {
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                }
            }
            Ok(Some(Binning { lo, hi, bins }))
        })
        .collect()
}

fn kind_name(kind: &FunctionKind) -> String {
    match kind {
        FunctionKind::Gp { kernel } => kernel.name().to_string(),
        FunctionKind::Linear { .. } => "linear".into(),
        FunctionKind::Fixed { func } => format!("fixed:{func}"),
    }
}

struct Posterior {
    /// Per function: mean and variance on the grid or of the weights.
    marginals: Vec<(Vec<f64>, Vec<f64>)>,
    posteriors: Vec<FunctionPosterior>,
    offsets: Vec<(f64, f64)>,
    obs: ObservationModel,
    log_marginal: f64,
    converged: bool,
    iterations: usize,
    trace: Vec<f64>,
    residual: f64,
}

fn diag(p: &FunctionPosterior) -> (Vec<f64>, Vec<f64>) {
    match p {
        FunctionPosterior::Gp { mean, cov, .. } | FunctionPosterior::Linear { mean, cov } => {
            (mean.clone(), (0..mean.len()).map(|i| cov[i][i].max(0.0)).collect())
        }
        FunctionPosterior::Fixed { .. } => (Vec::new(), Vec::new()),
    }
}

fn infer(cfg: &FitConfig, graph: &ModelGraph, design: &Design, obs: ObservationModel) -> Result<Posterior> {
    let n = graph.functions.len();
    match cfg.method {
        Method::Laplace => {
            let fit = fit_design(graph, design, obs, &cfg.laplace)?;
            let layout = Layout::new(design);
            let posteriors: Vec<FunctionPosterior> = (0..n).map(|k| fit.function_posterior(graph, design, k)).collect();
            let sd = fit.offset_sd(&layout);
            Ok(Posterior {
                marginals: posteriors.iter().map(diag).collect(),
                posteriors,
                offsets: fit.state.offsets.iter().copied().zip(sd.into_iter().map(|s| s * s)).collect(),
                obs: fit.obs,
                log_marginal: fit.log_evidence,
                converged: fit.converged,
                iterations: fit.cycles,
                trace: fit.trace.clone(),
                residual: fit.state.max_constraint_residual(design),
            })
        }
        Method::Vi => {
            let config = init_inducing(graph, design, cfg.inducing.policy, cfg.inducing.points);
            let model = VariationalModel::new(graph, design, obs, config)?;
            let fit = fit_vi(&model, None, &cfg.vi)?;
            let posteriors: Vec<FunctionPosterior> = (0..n).map(|k| model.function_posterior(&fit.state, k)).collect();
            let marginals = (0..n)
                .map(|k| match (model.grid_mean(&fit.state, k), model.grid_var(&fit.state, k)) {
                    (Some(m), Some(v)) => (m.iter().copied().collect(), v.iter().map(|x| x.max(0.0)).collect()),
                    _ => diag(&posteriors[k]),
                })
                .collect();
            Ok(Posterior {
                marginals,
                posteriors,
                offsets: fit
                    .state
                    .offset_mean
                    .iter()
                    .zip(&fit.state.offset_log_sd)
                    .map(|(m, l)| (*m, (2.0 * l).exp()))
                    .collect(),
                obs: fit.obs,
                log_marginal: fit.elbo.value,
                converged: fit.converged,
                iterations: fit.epochs,
                trace: fit.trace.clone(),
                residual: model.max_constraint_residual(&fit.state),
            })
        }
    }
}

/// Hyperparameter search, final fit, and the report.
pub fn run_fit(cfg: &FitConfig, data: &Dataset) -> Result<FitReport> {
    let base = cfg.graph()?;
    let design = Design::build(&base, data)?;
    let obs = cfg.observation_model()?;
    let (hyper, hyper_trace, hyper_converged) = match cfg.hyper {
        HyperMethod::Fixed => (HyperState::from_graph(&base), Vec::new(), true),
        HyperMethod::Cv => {
            let f = fit_hp_cv(&base, &design, obs, &cfg.cv)?;
            (f.hyper, f.trace, f.converged)
        }
        HyperMethod::Em => {
            let f = em_fit(&base, &design, obs, &cfg.em)?;
            (f.hyper, f.evidence_trace, f.converged)
        }
        HyperMethod::Elbo => {
            let z = init_inducing(&base, &design, cfg.inducing.policy, cfg.inducing.points);
            let f = fit_hp_vi(&base, &design, obs, &z, &cfg.elbo)?;
            (f.hyper, f.trace, f.converged)
        }
    };
    let graph = hyper.apply(&base);
    let post = infer(cfg, &graph, &design, obs)?;
    let bins = binnings(&graph, data)?;
    let functions: Vec<FunctionReport> = graph
        .functions
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let (mean, var) = &post.marginals[k];
            FunctionReport {
                name: spec.name().to_string(),
                kind: kind_name(&spec.decl.kind),
                constraint: spec.constraint.name().to_string(),
                grid: design.functions[k].grid().map_or_else(Vec::new, <[f64]>::to_vec),
                mean: mean.clone(),
                sd: var.iter().map(|v| v.sqrt()).collect(),
                binning: bins[k],
                posterior: post.posteriors[k].clone(),
            }
        })
        .collect();
    let mut offsets: Vec<OffsetReport> = graph
        .free_offsets()
        .into_iter()
        .map(|(c, d)| OffsetReport {
            name: format!("block{c}.factor{d}"),
            block: Some(c),
            factor: Some(d),
            mean: 0.0,
            sd: 0.0,
        })
        .collect();
    if graph.intercept {
        offsets.push(OffsetReport {
            name: "intercept".into(),
            block: None,
            factor: None,
            mean: 0.0,
            sd: 0.0,
        });
    }
    for (o, (m, v)) in offsets.iter_mut().zip(&post.offsets) {
        o.mean = *m;
        o.sd = v.max(0.0).sqrt();
    }
    let mut report = FitReport {
        format: FIT_REPORT_FORMAT.into(),
        config: cfg.clone(),
        data: DataSummary::of(data),
        formula: format(&graph.ast),
        constraints: constraint_table(&graph),
        method: cfg.method,
        objective: match cfg.method {
            Method::Laplace => "log_evidence".into(),
            Method::Vi => "elbo".into(),
        },
        log_marginal: post.log_marginal,
        n_hyper: hyper.len(),
        aic: aic(hyper.len(), post.log_marginal),
        hyperparameters: hyper
            .slots
            .iter()
            .zip(hyper.values())
            .map(|(s, value)| HyperValue {
                function: s.function.clone(),
                name: s.name.clone(),
                value,
            })
            .collect(),
        dispersion: matches!(post.obs, ObservationModel::Gaussian { .. }).then(|| post.obs.dispersion()),
        functions,
        offsets,
        fitted: Vec::new(),
        converged: post.converged,
        iterations: post.iterations,
        trace: post.trace,
        hyper_trace,
        hyper_converged,
        max_constraint_residual: post.residual,
        warnings: graph.warnings.iter().map(|w| w.to_string()).collect(),
    };
    let columns = |name: &str| data.finite_column(name).map(<[f64]>::to_vec);
    report.fitted = predict_rows(&report, &graph, &columns, data.n_rows(), &data.row_obs(), data.n_obs())?.predictor;
    Ok(report)
}

/// Posterior means and SDs at query rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Per function: mean and SD at each row, from the function's first term.
    pub functions: Vec<(String, Vec<f64>, Vec<f64>)>,
    /// Plug-in predictor per observation.
    pub predictor: Vec<f64>,
}

/// Evaluates every term of `graph` at the query rows with the report's
/// posteriors and sums the blocks into one predictor per observation.
pub fn predict_rows(
    report: &FitReport,
    graph: &ModelGraph,
    columns: &dyn Fn(&str) -> Result<Vec<f64>>,
    n_rows: usize,
    row_obs: &[usize],
    n_obs: usize,
) -> Result<Prediction> {
    let term_values = |k: usize, vars: &[String]| -> Result<(Vec<f64>, Vec<f64>)> {
        let f = &report.functions[k];
        let cols: Vec<Vec<f64>> = vars.iter().map(|v| columns(v)).collect::<Result<_>>()?;
        let xs: Vec<f64> = match &f.posterior {
            FunctionPosterior::Linear { .. } => (0..n_rows).flat_map(|r| cols.iter().map(move |c| c[r])).collect(),
            _ => cols[0].iter().map(|&v| f.binning.map_or(v, |b| b.snap(v))).collect(),
        };
        let (m, v) = f.posterior.predict(&xs);
        Ok((m, v.into_iter().map(f64::sqrt).collect()))
    };
    let mut functions = Vec::new();
    for (k, spec) in graph.functions.iter().enumerate() {
        let first = graph
            .blocks
            .iter()
            .flat_map(|b| &b.factors)
            .flat_map(|f| &f.terms)
            .find(|t| t.func == k)
            .expect("every function appears in the formula");
        let (m, s) = term_values(k, &first.vars)?;
        functions.push((spec.name().to_string(), m, s));
    }
    let free = graph.free_offsets();
    let intercept = if graph.intercept {
        report.offsets.last().map_or(0.0, |o| o.mean)
    } else {
        0.0
    };
    let mut predictor = vec![intercept; n_obs];
    let mut row_sum = vec![0.0; n_rows];
    for (c, block) in graph.blocks.iter().enumerate() {
        let mut prod = vec![1.0; n_rows];
        for (d, factor) in block.factors.iter().enumerate() {
            let base = match factor.offset {
                Offset::FixedZero => 0.0,
                Offset::FixedOne => 1.0,
                Offset::Free => {
                    let slot = free.iter().position(|&p| p == (c, d)).expect("free offset slot");
                    report.offsets[slot].mean
                }
            };
            let mut value = vec![base; n_rows];
            for t in &factor.terms {
                let (m, _) = term_values(t.func, &t.vars)?;
                for (a, b) in value.iter_mut().zip(m) {
                    *a += b;
                }
            }
            for (p, v) in prod.iter_mut().zip(value) {
                *p *= v;
            }
        }
        for (s, p) in row_sum.iter_mut().zip(prod) {
            *s += p;
        }
    }
    for (r, s) in row_sum.into_iter().enumerate() {
        predictor[row_obs[r]] += s;
    }
    Ok(Prediction { functions, predictor })
}

impl FitReport {
    /// The model structure behind this report, with the fitted hyperparameters.
    pub fn graph(&self) -> Result<ModelGraph> {
        let base = self.config.graph()?;
        let hyper = HyperState::from_graph(&base);
        if hyper.len() != self.hyperparameters.len() {
            return Err(GumError::InvalidInput("report hyperparameters do not match its configuration".into()));
        }
        let logs: Vec<f64> = self.hyperparameters.iter().map(|h| h.value.ln()).collect();
        Ok(hyper.with_log_values(&logs).apply(&base))
    }

    pub fn observation_model(&self) -> Result<ObservationModel> {
        let obs = self.config.observation_model()?;
        Ok(match self.dispersion {
            Some(s) => obs.with_dispersion(s),
            None => obs,
        })
    }
}
