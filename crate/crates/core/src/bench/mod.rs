//! Synthetic data generation, recovery experiments and posterior error metrics.

mod scenarios;
mod vonmises;

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use scenarios::{grating_glm_graph, grating_gum_graph, grating_recovery_scenario, grating_scenario, poisson_scenario, GRATING_BINS, POISSON_BINS};
pub use vonmises::sample_von_mises;

use crate::dsl::{parse, validate};
use crate::error::{GumError, Result};
use crate::hyper::HyperState;
use crate::laplace::{fit_design, LaplaceOptions};
use crate::linalg::pearson;
use crate::model::design::Design;
use crate::model::graph::{ModelGraph, Offset};
use crate::model::params::{Layout, ParameterState};
use crate::model::predictor::predictor;
use crate::model::{Dataset, FixedFn, FunctionDecl};
use crate::obs::ObservationModel;
use crate::vi::{fit_vi, init_inducing, InducingPolicy, VariationalModel, ViOptions};

/// How one regressor column is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputDist {
    /// Uniform on [lo, hi).
    Uniform { lo: f64, hi: f64 },
    /// Von Mises with concentration `kappa` around `centers[c]`, wrapped to
    /// [−π, π); the category c is drawn once per observation and shared by its rows.
    VonMises { kappa: f64, centers: Vec<f64> },
    /// Position of the row inside its observation, scaled to [0, 1].
    Position,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    pub dist: InputDist,
}

/// A generating model: a formula whose functions are all registered analytic
/// truths, the input distributions, and the observation family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub formula: String,
    /// Truth of every function in the formula, by name.
    pub truths: Vec<(String, FixedFn)>,
    pub inputs: Vec<InputSpec>,
    /// Rows feeding one observation (1 unless observations pool several rows).
    pub rows_per_obs: usize,
    pub family: ObservationModel,
    pub seed: u64,
}

impl TruthSpec {
    pub fn truth(&self, name: &str) -> Option<FixedFn> {
        self.truths.iter().find(|(n, _)| n == name).map(|(_, f)| *f)
    }

    /// The formula with every function fixed to its truth, without offsets or intercept.
    pub fn graph(&self) -> Result<ModelGraph> {
        let ast = parse(&self.formula)?;
        let mut decls = Vec::new();
        for name in ast.function_names() {
            let func = self
                .truth(&name)
                .ok_or_else(|| GumError::Config(format!("no truth registered for function `{name}`")))?;
            decls.push(FunctionDecl::fixed(&name, func));
        }
        let mut g = validate(&ast, &decls).map_err(GumError::Validation)?;
        g.intercept = false;
        Ok(g)
    }

    /// True predictor at every observation of `data`.
    pub fn predictor(&self, data: &Dataset) -> Result<Vec<f64>> {
        let g = self.graph()?;
        let design = Design::build(&g, data)?;
        Ok(predictor(&ParameterState::zeros(&design), &design).iter().copied().collect())
    }
}

/// Draws `n` observations from seed stream 0 of the spec's seed.
pub fn simulate(spec: &TruthSpec, n: usize) -> Result<Dataset> {
    simulate_stream(spec, n, 0)
}

/// Draws `n` observations; distinct streams give independent datasets.
pub fn simulate_stream(spec: &TruthSpec, n: usize, stream: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(GumError::InvalidInput("at least one observation is required".into()));
    }
    let rows = spec.rows_per_obs.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let n_rows = n * rows;
    let mut columns = vec![Vec::with_capacity(n_rows); spec.inputs.len()];
    for _ in 0..n {
        let category: Vec<usize> = spec
            .inputs
            .iter()
            .map(|i| match &i.dist {
                InputDist::VonMises { centers, .. } => rng.random_range(0..centers.len()),
                _ => 0,
            })
            .collect();
        for r in 0..rows {
            for (j, input) in spec.inputs.iter().enumerate() {
                let v = match &input.dist {
                    InputDist::Uniform { lo, hi } => rng.random_range(*lo..*hi),
                    InputDist::VonMises { kappa, centers } => sample_von_mises(&mut rng, centers[category[j]], *kappa),
                    InputDist::Position => {
                        if rows > 1 {
                            r as f64 / (rows - 1) as f64
                        } else {
                            0.0
                        }
                    }
                };
                columns[j].push(v);
            }
        }
    }
    let names: Vec<String> = spec.inputs.iter().map(|i| i.name.clone()).collect();
    let groups = (rows > 1).then(|| (0..n_rows).map(|r| r / rows).collect::<Vec<_>>());
    let blank = Dataset::with_groups(names.clone(), columns.clone(), "y".into(), vec![0.0; n], groups.clone())?;
    let rho = spec.predictor(&blank)?;
    let y = spec.family.sample(&rho, &mut rng);
    Dataset::with_groups(names, columns, "y".into(), y, groups)
}

/// Squared-error decomposition of a posterior against a truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorTerms {
    pub err: f64,
    pub bias: f64,
    pub variance: f64,
}

/// Mean over points of E_q[(f − f_true)²] = (m − f_true)² + v.
pub fn function_error(mean: &[f64], var: &[f64], truth: &[f64]) -> ErrorTerms {
    let n = mean.len().max(1) as f64;
    let bias = mean.iter().zip(truth).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / n;
    let variance = var.iter().sum::<f64>() / n;
    ErrorTerms {
        err: bias + variance,
        bias,
        variance,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    Laplace,
    Vi,
}

impl FitMethod {
    pub fn name(self) -> &'static str {
        match self {
            FitMethod::Laplace => "laplace",
            FitMethod::Vi => "vi",
        }
    }
}

/// Grid marginals, offsets and predictor mean of one fit, from either backend.
#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    /// Per function: grid, posterior mean and variance. `None` for fixed and
    /// linear functions. A function that alone fills a factor with a free
    /// offset is reported as the whole factor f_k + c.
    pub functions: Vec<Option<(Vec<f64>, Vec<f64>, Vec<f64>)>>,
    /// Whether each curve includes its factor's free offset.
    pub with_offset: Vec<bool>,
    pub offsets: Vec<f64>,
    pub predictor: Vec<f64>,
    /// Laplace log evidence or ELBO.
    pub log_evidence: f64,
    pub converged: bool,
}

/// Free offset index of the factor that function `k` fills alone, if any.
pub fn sole_factor_offset(graph: &ModelGraph, design: &Design, k: usize) -> Option<usize> {
    match graph.occurrences(k).as_slice() {
        [(c, d)] if graph.blocks[*c].factors[*d].terms.len() == 1 => design.blocks[*c][*d].free_offset,
        _ => None,
    }
}

/// Fits `graph` to `design` and summarizes the posterior.
pub fn fit_summary(graph: &ModelGraph, design: &Design, family: ObservationModel, method: FitMethod, opts: &ExperimentOptions) -> Result<FitSummary> {
    match method {
        FitMethod::Laplace => {
            let fit = fit_design(graph, design, family, &opts.laplace)?;
            let layout = Layout::new(design);
            let functions = (0..graph.functions.len())
                .map(|k| {
                    let grid = design.functions[k].grid()?;
                    let (o, d) = (layout.theta_off[k], layout.theta_dim[k]);
                    let mut mean: Vec<f64> = fit.state.f[k].iter().copied().collect();
                    let mut var: Vec<f64> = (0..d).map(|i| fit.cov_theta[(o + i, o + i)]).collect();
                    if let Some(j) = sole_factor_offset(graph, design, k) {
                        let c = layout.theta_offsets_at + j;
                        for i in 0..d {
                            mean[i] += fit.state.offsets[j];
                            var[i] += fit.cov_theta[(c, c)] + 2.0 * fit.cov_theta[(o + i, c)];
                        }
                    }
                    Some((grid.to_vec(), mean, var.into_iter().map(|v| v.max(0.0)).collect()))
                })
                .collect();
            Ok(FitSummary {
                functions,
                with_offset: (0..graph.functions.len()).map(|k| sole_factor_offset(graph, design, k).is_some()).collect(),
                offsets: fit.state.offsets.clone(),
                predictor: fit.fitted_predictor(design).iter().copied().collect(),
                log_evidence: fit.log_evidence,
                converged: fit.converged,
            })
        }
        FitMethod::Vi => {
            let config = init_inducing(graph, design, opts.inducing_policy, opts.inducing);
            let model = VariationalModel::new(graph, design, family, config)?;
            let fit = fit_vi(&model, None, &opts.vi)?;
            let functions = (0..graph.functions.len())
                .map(|k| {
                    let grid = design.functions[k].grid()?;
                    let mut mean: Vec<f64> = model.grid_mean(&fit.state, k)?.iter().copied().collect();
                    let mut var: Vec<f64> = model.grid_var(&fit.state, k)?.iter().copied().collect();
                    // Offsets are independent of u under q.
                    if let Some(j) = sole_factor_offset(graph, design, k) {
                        let vc = (2.0 * fit.state.offset_log_sd[j]).exp();
                        mean.iter_mut().for_each(|m| *m += fit.state.offset_mean[j]);
                        var.iter_mut().for_each(|v| *v += vc);
                    }
                    Some((grid.to_vec(), mean, var))
                })
                .collect();
            let noise = model.noise(opts.vi.eval_seed, opts.vi.n_eval);
            Ok(FitSummary {
                functions,
                with_offset: (0..graph.functions.len()).map(|k| sole_factor_offset(graph, design, k).is_some()).collect(),
                offsets: fit.state.offset_mean.clone(),
                predictor: model.predictor_mean(&fit.state, &noise).iter().copied().collect(),
                log_evidence: fit.elbo.value,
                converged: fit.converged,
            })
        }
    }
}

/// Truth of every GP function on its grid, moved into the fitted model's gauge.
///
/// In each block the factor truths are rescaled by s_d with Π s_d = 1. Factors
/// whose scale is pinned by a fixed offset and a constraint take the scale the
/// constraint implies; the rest take least-squares scales against the fitted
/// factor values, normalized so the product stays one. Each scaled truth is then
/// shifted to satisfy the function's constraint, and unconstrained functions
/// take the fitted mean level. Curves that include a free factor offset are
/// compared with the scaled factor truth directly.
pub fn aligned_truths(graph: &ModelGraph, design: &Design, spec: &TruthSpec, fit: &FitSummary) -> Vec<Option<Vec<f64>>> {
    let n = graph.functions.len();
    let mut scale = vec![1.0; n];
    for (c, block) in graph.blocks.iter().enumerate() {
        if block.dim() < 2 {
            continue;
        }
        let mut pinned = Vec::new();
        let mut free = Vec::new();
        for (d, factor) in block.factors.iter().enumerate() {
            let [term] = factor.terms.as_slice() else { continue };
            let k = term.func;
            let (Some((grid, mean, _)), Some(truth)) = (&fit.functions[k], spec.truth(graph.functions[k].name())) else {
                continue;
            };
            let t: Vec<f64> = grid.iter().map(|&x| truth.eval(x)).collect();
            let proj = design.functions[k].projection.as_ref();
            let offset = match factor.offset {
                Offset::FixedZero => Some(0.0),
                Offset::FixedOne => Some(1.0),
                Offset::Free => None,
            };
            let target = match (offset, proj) {
                (Some(o), Some(p)) if !p.is_none() => Some(p.l + o * p.p.sum()),
                _ => None,
            };
            match target {
                Some(target) if target != 0.0 => {
                    let p = &proj.expect("constrained").p;
                    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
                    pinned.push((k, target / pt));
                }
                _ => {
                    let off = match offset {
                        Some(o) => o,
                        None if fit.with_offset[k] => 0.0,
                        None => design.blocks[c][d].free_offset.map_or(0.0, |i| fit.offsets[i]),
                    };
                    let f: Vec<f64> = mean.iter().map(|m| m + off).collect();
                    let tt: f64 = t.iter().map(|v| v * v).sum();
                    let ft: f64 = f.iter().zip(&t).map(|(a, b)| a * b).sum();
                    free.push((k, if tt > 0.0 { ft / tt } else { 1.0 }));
                }
            }
        }
        let pinned_prod: f64 = pinned.iter().map(|(_, s)| s).product();
        if !free.is_empty() {
            let log_free: f64 = free.iter().map(|(_, s)| s.abs().ln()).sum::<f64>() + pinned_prod.abs().ln();
            let g = (log_free / free.len() as f64).exp();
            for (k, s) in &free {
                scale[*k] = s / g;
            }
        }
        for (k, s) in pinned {
            scale[k] = s;
        }
    }
    (0..n)
        .map(|k| {
            let (grid, mean, _) = fit.functions[k].as_ref()?;
            let truth = spec.truth(graph.functions[k].name())?;
            let mut t: Vec<f64> = grid.iter().map(|&x| scale[k] * truth.eval(x)).collect();
            let shift = match design.functions[k].projection.as_ref() {
                _ if fit.with_offset[k] => 0.0,
                Some(p) if !p.is_none() => {
                    let pt: f64 = p.p.iter().zip(&t).map(|(a, b)| a * b).sum();
                    (pt - p.l) / p.p.sum()
                }
                _ => (t.iter().sum::<f64>() - mean.iter().sum::<f64>()) / t.len() as f64,
            };
            t.iter_mut().for_each(|v| *v -= shift);
            Some(t)
        })
        .collect()
}

/// Fraction of points whose truth lies within ±2 posterior SD of the mean.
pub fn coverage(mean: &[f64], var: &[f64], truth: &[f64]) -> f64 {
    let hits = mean
        .iter()
        .zip(var)
        .zip(truth)
        .filter(|((m, v), t)| (*m - *t).abs() <= 2.0 * v.max(0.0).sqrt())
        .count();
    hits as f64 / mean.len().max(1) as f64
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64).sqrt()
}

/// A truth together with the prior model used to recover it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub truth: TruthSpec,
    pub formula: String,
    pub priors: Vec<FunctionDecl>,
}

impl Scenario {
    pub fn graph(&self) -> Result<ModelGraph> {
        validate(&parse(&self.formula)?, &self.priors).map_err(GumError::Validation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub laplace: LaplaceOptions,
    pub vi: ViOptions,
    pub inducing: usize,
    pub inducing_policy: InducingPolicy,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            laplace: LaplaceOptions::default(),
            vi: ViOptions {
                epochs: 150,
                n_eval: 256,
                ..ViOptions::default()
            },
            inducing: 32,
            inducing_policy: InducingPolicy::Quantile,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub function: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub truth: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionRecovery {
    pub function: String,
    pub error: ErrorTerms,
    pub coverage: f64,
}

/// One simulate-and-fit run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub n: usize,
    pub rep: usize,
    /// Seed stream of the simulated dataset.
    pub stream: u64,
    pub data_fingerprint: String,
    pub functions: Vec<FunctionRecovery>,
    pub predictor_rmse: f64,
    pub log_evidence: f64,
    pub converged: bool,
    /// Posterior curves, kept for the first repetition only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curves: Option<Vec<Curve>>,
    /// Wall-clock fit time; not serialized so reports stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepFailure {
    pub n: usize,
    pub rep: usize,
    pub message: String,
}

/// Mean and standard error of the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sem: f64,
}

impl Aggregate {
    /// Sorted before summing so the result does not depend on input order.
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        if v.is_empty() {
            return Aggregate { mean: f64::NAN, sem: f64::NAN };
        }
        let mean = v.iter().sum::<f64>() / n;
        let sem = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        Aggregate { mean, sem }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionAggregate {
    pub function: String,
    pub err: Aggregate,
    pub bias: Aggregate,
    pub variance: Aggregate,
    pub coverage: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub n: usize,
    pub completed: usize,
    pub failed: usize,
    pub functions: Vec<FunctionAggregate>,
    pub predictor_rmse: Aggregate,
    /// Mean wall-clock fit time; not serialized.
    #[serde(skip)]
    pub mean_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub scenario: Scenario,
    pub method: FitMethod,
    pub options: ExperimentOptions,
    /// Learnable hyperparameters of the fitted model, held fixed during the experiment.
    pub hyperparameters: Vec<(String, f64)>,
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub summary: Vec<SizeSummary>,
    pub runs: Vec<RepResult>,
    pub failures: Vec<RepFailure>,
}

/// Stream of repetition `rep` at the `i`-th sample size.
fn rep_stream(i: usize, rep: usize) -> u64 {
    ((i as u64) << 32) | rep as u64
}

fn run_once(scenario: &Scenario, graph: &ModelGraph, n: usize, stream: u64, rep: usize, method: FitMethod, opts: &ExperimentOptions) -> Result<RepResult> {
    let data = simulate_stream(&scenario.truth, n, stream)?;
    let design = Design::build(graph, &data)?;
    let start = Instant::now();
    let fit = fit_summary(graph, &design, scenario.truth.family, method, opts)?;
    let seconds = start.elapsed().as_secs_f64();
    let truths = aligned_truths(graph, &design, &scenario.truth, &fit);
    let mut functions = Vec::new();
    let mut curves = Vec::new();
    for (k, t) in truths.iter().enumerate() {
        let (Some(t), Some((grid, mean, var))) = (t, &fit.functions[k]) else {
            continue;
        };
        let name = graph.functions[k].name().to_string();
        functions.push(FunctionRecovery {
            function: name.clone(),
            error: function_error(mean, var, t),
            coverage: coverage(mean, var, t),
        });
        curves.push(Curve {
            function: name,
            x: grid.clone(),
            mean: mean.clone(),
            sd: var.iter().map(|v| v.max(0.0).sqrt()).collect(),
            truth: t.clone(),
        });
    }
    let rho = scenario.truth.predictor(&data)?;
    Ok(RepResult {
        n,
        rep,
        stream,
        data_fingerprint: data.fingerprint(),
        functions,
        predictor_rmse: rmse(&fit.predictor, &rho),
        log_evidence: fit.log_evidence,
        converged: fit.converged,
        curves: (rep == 0).then_some(curves),
        seconds,
    })
}

/// Independent simulate-and-fit repetitions at every sample size, with
/// per-size means and standard errors. Failed fits are recorded and excluded.
pub fn recovery_experiment(scenario: &Scenario, n_list: &[usize], reps: usize, method: FitMethod, opts: &ExperimentOptions) -> Result<RecoveryReport> {
    let graph = scenario.graph()?;
    let jobs: Vec<(usize, usize, usize)> = n_list
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| (0..reps).map(move |rep| (i, n, rep)))
        .collect();
    let outcomes: Vec<(usize, usize, Result<RepResult>)> = jobs
        .par_iter()
        .map(|&(i, n, rep)| (n, rep, run_once(scenario, &graph, n, rep_stream(i, rep), rep, method, opts)))
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (n, rep, outcome) in outcomes {
        match outcome {
            Ok(r) => runs.push(r),
            Err(e) => {
                log::warn!("repetition {rep} at N={n} failed: {e}");
                failures.push(RepFailure {
                    n,
                    rep,
                    message: e.to_string(),
                })
            }
        }
    }
    let summary = n_list
        .iter()
        .map(|&n| {
            let at: Vec<&RepResult> = runs.iter().filter(|r| r.n == n).collect();
            let names: Vec<String> = at.first().map_or_else(Vec::new, |r| r.functions.iter().map(|f| f.function.clone()).collect());
            let functions = names
                .iter()
                .enumerate()
                .map(|(j, name)| {
                    let pick = |f: &dyn Fn(&FunctionRecovery) -> f64| Aggregate::of(&at.iter().map(|r| f(&r.functions[j])).collect::<Vec<_>>());
                    FunctionAggregate {
                        function: name.clone(),
                        err: pick(&|f| f.error.err),
                        bias: pick(&|f| f.error.bias),
                        variance: pick(&|f| f.error.variance),
                        coverage: pick(&|f| f.coverage),
                    }
                })
                .collect();
            SizeSummary {
                n,
                completed: at.len(),
                failed: failures.iter().filter(|f| f.n == n).count(),
                functions,
                predictor_rmse: Aggregate::of(&at.iter().map(|r| r.predictor_rmse).collect::<Vec<_>>()),
                mean_seconds: at.iter().map(|r| r.seconds).sum::<f64>() / at.len().max(1) as f64,
            }
        })
        .collect();
    let hyper = HyperState::from_graph(&graph);
    let hyperparameters = hyper
        .slots
        .iter()
        .zip(hyper.values())
        .map(|(s, v)| (format!("{}.{}", s.function, s.name), v))
        .collect();
    Ok(RecoveryReport {
        scenario: scenario.clone(),
        method,
        options: opts.clone(),
        hyperparameters,
        n_list: n_list.to_vec(),
        reps,
        summary,
        runs,
        failures,
    })
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

impl RecoveryReport {
    /// Error-versus-N table: one row per sample size and function.
    pub fn error_csv(&self) -> String {
        let mut rows = Vec::new();
        for s in &self.summary {
            for f in &s.functions {
                rows.push(vec![
                    self.method.name().to_string(),
                    s.n.to_string(),
                    f.function.clone(),
                    f.err.mean.to_string(),
                    f.err.sem.to_string(),
                    f.bias.mean.to_string(),
                    f.variance.mean.to_string(),
                    f.coverage.mean.to_string(),
                    s.predictor_rmse.mean.to_string(),
                    s.predictor_rmse.sem.to_string(),
                ]);
            }
        }
        csv_string(
            &["method", "n", "function", "err_mean", "err_sem", "bias_mean", "variance_mean", "coverage_mean", "rmse_mean", "rmse_sem"],
            rows,
        )
    }

    /// Posterior curves of the first repetition at every sample size.
    pub fn curves_csv(&self) -> String {
        let mut rows = Vec::new();
        for r in self.runs.iter().filter(|r| r.curves.is_some()) {
            for c in r.curves.as_ref().expect("filtered") {
                for i in 0..c.x.len() {
                    rows.push(vec![
                        r.n.to_string(),
                        c.function.clone(),
                        c.x[i].to_string(),
                        c.mean[i].to_string(),
                        c.sd[i].to_string(),
                        c.truth[i].to_string(),
                    ]);
                }
            }
        }
        csv_string(&["n", "function", "x", "mean", "sd", "truth"], rows)
    }

    /// Mean fit time per sample size, kept out of the JSON report.
    pub fn timings_csv(&self) -> String {
        let rows = self
            .summary
            .iter()
            .map(|s| vec![self.method.name().to_string(), s.n.to_string(), s.mean_seconds.to_string()])
            .collect();
        csv_string(&["method", "n", "mean_seconds"], rows)
    }
}

/// Correlation of the recovered mapping with the truth on its grid.
pub fn mapping_correlation(fit: &FitSummary, k: usize, truth: FixedFn) -> Option<f64> {
    let (grid, mean, _) = fit.functions[k].as_ref()?;
    let t: Vec<f64> = grid.iter().map(|&x| truth.eval(x)).collect();
    Some(pearson(mean, &t))
}

/// Mean of a function's posterior mean on its grid.
pub fn grid_mean(fit: &FitSummary, k: usize) -> Option<f64> {
    let (_, mean, _) = fit.functions[k].as_ref()?;
    Some(DVector::from_column_slice(mean).mean())
}
