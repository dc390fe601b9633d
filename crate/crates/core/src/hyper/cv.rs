use std::cell::RefCell;

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{prior_grads, HyperState};
use crate::error::{GumError, Result};
use crate::laplace::{LaplaceFit, LaplaceOptions, Problem};
use crate::linalg::{condition_number, Chol};
use crate::model::design::{Design, TermData};
use crate::model::graph::ModelGraph;
use crate::model::params::projection_matrix;
use crate::model::predictor::{backprop, factor_values, predictor};
use crate::obs::ObservationModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    pub laplace: LaplaceOptions,
    /// Prior Gram matrices above this condition number make the gradient unreliable.
    pub cond_limit: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub max_halvings: usize,
    /// Largest change of any log-hyperparameter in one step.
    pub max_step: f64,
    /// Iteration budget of the simplex fallback.
    pub max_evals: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            folds: 5,
            seed: 0,
            laplace: LaplaceOptions {
                tol: 1e-12,
                ..LaplaceOptions::default()
            },
            cond_limit: 1e10,
            max_iter: 50,
            tol: 1e-6,
            max_halvings: 10,
            max_step: 1.0,
            max_evals: 200,
        }
    }
}

/// Test sets of each fold; the training set is the complement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Folds {
    pub test: Vec<Vec<usize>>,
}

impl Folds {
    pub fn train(&self, fold: usize, n_obs: usize) -> Vec<usize> {
        let mut in_test = vec![false; n_obs];
        for &o in &self.test[fold] {
            in_test[o] = true;
        }
        (0..n_obs).filter(|&o| !in_test[o]).collect()
    }
}

fn index_terms(design: &Design) -> Vec<(usize, &[usize])> {
    let mut out = Vec::new();
    for block in &design.blocks {
        for f in block {
            for t in &f.terms {
                if let TermData::Index(ix) = &t.data {
                    out.push((t.func, ix.as_slice()));
                }
            }
        }
    }
    out
}

/// Test observations using a grid value that no training row uses.
fn uncovered(design: &Design, test: &[usize]) -> Vec<usize> {
    let mut in_test = vec![false; design.n_obs];
    for &o in test {
        in_test[o] = true;
    }
    let terms = index_terms(design);
    let mut used: Vec<Vec<bool>> = design.functions.iter().map(|f| vec![false; f.dim()]).collect();
    for r in 0..design.n_rows {
        if !in_test[design.row_obs[r]] {
            for &(k, ix) in &terms {
                used[k][ix[r]] = true;
            }
        }
    }
    let mut bad: Vec<usize> = (0..design.n_rows)
        .filter(|&r| in_test[design.row_obs[r]] && terms.iter().any(|&(k, ix)| !used[k][ix[r]]))
        .map(|r| design.row_obs[r])
        .collect();
    bad.sort_unstable();
    bad.dedup();
    bad
}

/// Random `k`-fold partition in which every test value also occurs in
/// training. Folds are redrawn until coverage holds; if no draw succeeds the
/// uncovered observations are dropped from their test sets.
pub fn make_folds(design: &Design, k: usize, seed: u64) -> Result<Folds> {
    let n = design.n_obs;
    if k < 2 || k > n {
        return Err(GumError::InvalidInput(format!("cannot split {n} observations into {k} folds")));
    }
    let draw = |attempt: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut test = vec![Vec::new(); k];
        for (j, &o) in perm.iter().enumerate() {
            test[j % k].push(o);
        }
        for t in &mut test {
            t.sort_unstable();
        }
        test
    };
    for attempt in 0..100 {
        let test = draw(attempt);
        if test.iter().all(|t| uncovered(design, t).is_empty()) {
            return Ok(Folds { test });
        }
    }
    let mut test = draw(0);
    for t in &mut test {
        loop {
            let bad = uncovered(design, t);
            if bad.is_empty() {
                break;
            }
            t.retain(|o| bad.binary_search(o).is_err());
        }
    }
    log::warn!("no fold draw covers every test value; uncovered test observations were moved to training");
    if test.iter().any(|t| t.is_empty()) {
        return Err(GumError::InvalidInput("a cross-validation fold has no testable observations".into()));
    }
    Ok(Folds { test })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvScore {
    /// Mean over folds of the test log-likelihood at the training MAP.
    pub score: f64,
    pub fold_scores: Vec<f64>,
    /// Gradient with respect to the learnable log-hyperparameters.
    pub gradient: Option<Vec<f64>>,
    /// False when some prior Gram matrix is too ill-conditioned for the gradient to be trusted.
    pub reliable: bool,
}

/// Per-function pair (Pᵀ K̃⁻¹ a, Pᵀ K̃⁻¹ U) such that aᵀ H⁻¹ K̃⁻¹ ∂K̃ K̃⁻¹ U = xᵀ ∂K y with a = H⁻¹g.
fn sandwich(problem: &Problem<'_>, fit: &LaplaceFit, a: &DVector<f64>, k: usize) -> Option<(DVector<f64>, DVector<f64>)> {
    let proj = problem.design.functions[k].projection.as_ref()?;
    let (o, d) = (problem.layout.free_off[k], problem.layout.free_dim[k]);
    if d == 0 {
        return None;
    }
    let c = &problem.prior.chols[k];
    let x = proj.p_mat.transpose() * c.solve(&a.rows(o, d).into_owned());
    let y = proj.p_mat.transpose() * c.solve(&fit.u.rows(o, d).into_owned());
    Some((x, y))
}

/// dU_MAP/dγ for a hyperparameter with prior derivative `dk` on function `k`:
/// H⁻¹ K̃⁻¹ ∂K̃ K̃⁻¹ U with ∂K̃ = P ∂K Pᵀ.
pub fn map_derivative(problem: &Problem<'_>, fit: &LaplaceFit, k: usize, dk: &DMatrix<f64>) -> Result<DVector<f64>> {
    let mut e = DVector::zeros(fit.u.len());
    if let Some(proj) = &problem.design.functions[k].projection {
        let (o, d) = (problem.layout.free_off[k], problem.layout.free_dim[k]);
        let c = &problem.prior.chols[k];
        let v = c.solve(&fit.u.rows(o, d).into_owned());
        let inner = &proj.p_mat * dk * proj.p_mat.transpose() * v;
        e.rows_mut(o, d).copy_from(&c.solve(&inner));
    }
    Ok(Chol::new(&fit.hessian)?.solve(&e))
}

struct FoldResult {
    score: f64,
    gradient: Option<Vec<f64>>,
}

fn fold_score(
    graph: &ModelGraph,
    hyper: &HyperState,
    design: &Design,
    obs: ObservationModel,
    train_idx: &[usize],
    test_idx: &[usize],
    opts: &LaplaceOptions,
    with_gradient: bool,
) -> Result<FoldResult> {
    let train = design.subset(train_idx);
    let test = design.subset(test_idx);
    let problem = Problem::new(graph, &train, obs)?;
    let fit = problem.fit(opts)?;
    let rho = predictor(&fit.state, &test);
    let score = obs.loglik(&test.y, rho.as_slice());
    if !with_gradient {
        return Ok(FoldResult { score, gradient: None });
    }
    let fv = factor_values(&fit.state, &test);
    let w: Vec<f64> = (0..test.n_obs).map(|o| obs.dloglik(test.y[o], rho[o])).collect();
    let g_theta = backprop(&fit.state, &test, &problem.layout, &fv, &w);
    let g_u = projection_matrix(&train, &problem.layout) * g_theta;
    let a = Chol::new(&fit.hessian)?.solve(&g_u);
    let mut per_func: Vec<Option<(DVector<f64>, DVector<f64>)>> = vec![None; graph.functions.len()];
    let mut grads = Vec::with_capacity(hyper.len());
    for slot in &hyper.slots {
        let k = slot.func;
        if per_func[k].is_none() {
            per_func[k] = sandwich(&problem, &fit, &a, k);
        }
        let g = match &per_func[k] {
            Some((x, y)) => {
                let dk = &prior_grads(graph, design, k)[slot.index];
                (x.transpose() * dk * y)[(0, 0)]
            }
            None => 0.0,
        };
        grads.push(g);
    }
    Ok(FoldResult {
        score,
        gradient: Some(grads),
    })
}

/// Cross-validated log-likelihood of `hyper` and, optionally, its gradient.
/// Folds are fitted in parallel.
pub fn cvll(
    hyper: &HyperState,
    graph: &ModelGraph,
    design: &Design,
    obs: ObservationModel,
    folds: &Folds,
    opts: &CvOptions,
    with_gradient: bool,
) -> Result<CvScore> {
    if folds.test.is_empty() || folds.test.iter().any(|t| t.is_empty()) {
        return Err(GumError::InvalidInput("cross-validation folds must have nonempty test sets".into()));
    }
    let g = hyper.apply(graph);
    let results: Vec<Result<FoldResult>> = (0..folds.test.len())
        .into_par_iter()
        .map(|i| {
            let train = folds.train(i, design.n_obs);
            if train.is_empty() {
                return Err(GumError::InvalidInput("cross-validation fold has no training data".into()));
            }
            fold_score(&g, hyper, design, obs, &train, &folds.test[i], &opts.laplace, with_gradient)
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let fold_scores: Vec<f64> = results.iter().map(|r| r.score).collect();
    let score = fold_scores.iter().sum::<f64>() / n;
    let gradient = with_gradient.then(|| {
        let mut g = vec![0.0; hyper.len()];
        for r in &results {
            for (a, b) in g.iter_mut().zip(r.gradient.as_ref().expect("requested")) {
                *a += b / n;
            }
        }
        g
    });
    let prior = crate::model::params::Prior::new(&g, design)?;
    let mut funcs: Vec<usize> = hyper.slots.iter().map(|s| s.func).collect();
    funcs.dedup();
    let reliable = funcs.iter().all(|&k| condition_number(&prior.full[k]) <= opts.cond_limit);
    Ok(CvScore {
        score,
        fold_scores,
        gradient,
        reliable,
    })
}

#[derive(Clone, Debug)]
pub struct CvFit {
    pub hyper: HyperState,
    pub score: f64,
    /// Score after every accepted step; nondecreasing.
    pub trace: Vec<f64>,
    pub used_simplex: bool,
    pub evaluations: usize,
    pub converged: bool,
    pub folds: Folds,
}

struct SimplexCost<'a> {
    hyper: &'a HyperState,
    graph: &'a ModelGraph,
    design: &'a Design,
    obs: ObservationModel,
    folds: &'a Folds,
    opts: &'a CvOptions,
    best: &'a RefCell<(f64, Vec<f64>)>,
    trace: &'a RefCell<Vec<f64>>,
    evals: &'a RefCell<usize>,
}

impl CostFunction for SimplexCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        *self.evals.borrow_mut() += 1;
        let s = cvll(&self.hyper.with_log_values(p), self.graph, self.design, self.obs, self.folds, self.opts, false)
            .map(|s| s.score)
            .unwrap_or(f64::NEG_INFINITY);
        if !s.is_finite() {
            return Ok(f64::INFINITY);
        }
        let mut best = self.best.borrow_mut();
        if s > best.0 {
            *best = (s, p.clone());
            self.trace.borrow_mut().push(s);
        }
        Ok(-s)
    }
}

/// Gradient ascent with backtracking on the cross-validated log-likelihood,
/// switching to a Nelder–Mead search when the gradient is unreliable.
pub fn fit_hp_cv(graph: &ModelGraph, design: &Design, obs: ObservationModel, opts: &CvOptions) -> Result<CvFit> {
    let folds = make_folds(design, opts.folds, opts.seed)?;
    let mut hyper = HyperState::from_graph(graph);
    let mut cur = cvll(&hyper, graph, design, obs, &folds, opts, !hyper.is_empty())?;
    let mut trace = vec![cur.score];
    let mut evaluations = 1;
    let mut converged = hyper.is_empty();
    let mut used_simplex = false;
    let mut step = opts.max_step;
    for _ in 0..opts.max_iter {
        if converged {
            break;
        }
        if !cur.reliable {
            used_simplex = true;
            break;
        }
        let g = cur.gradient.clone().expect("gradient requested");
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax < 1e-12 {
            converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = hyper.log_values.iter().zip(&g).map(|(x, gi)| x + gi * step / gmax).collect();
            let cand = hyper.with_log_values(&cand);
            evaluations += 1;
            match cvll(&cand, graph, design, obs, &folds, opts, true) {
                Ok(s) if s.score.is_finite() && s.score >= cur.score => {
                    accepted = Some((cand, s));
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some((h, s)) = accepted else {
            converged = true;
            break;
        };
        let gain = s.score - cur.score;
        hyper = h;
        cur = s;
        trace.push(cur.score);
        step = (step * 2.0).min(opts.max_step);
        if gain < opts.tol * (1.0 + cur.score.abs()) {
            converged = true;
        }
    }
    if used_simplex {
        let start = hyper.log_values.clone();
        let mut simplex = vec![start.clone()];
        for i in 0..start.len() {
            let mut v = start.clone();
            v[i] += 0.5;
            simplex.push(v);
        }
        let best = RefCell::new((f64::NEG_INFINITY, start.clone()));
        let found = RefCell::new(Vec::new());
        let evals = RefCell::new(0);
        let cost = SimplexCost {
            hyper: &hyper,
            graph,
            design,
            obs,
            folds: &folds,
            opts,
            best: &best,
            trace: &found,
            evals: &evals,
        };
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(opts.tol)
            .map_err(|e| GumError::InvalidInput(e.to_string()))?;
        let res = Executor::new(cost, solver)
            .configure(|s| s.max_iters(opts.max_evals as u64))
            .run();
        if let Err(e) = res {
            log::warn!("simplex search stopped early: {e}");
        }
        let (best, p) = best.into_inner();
        evaluations += evals.into_inner();
        trace.extend(found.into_inner().into_iter().filter(|&s| s > cur.score));
        if best > cur.score {
            hyper = hyper.with_log_values(&p);
            cur.score = best;
        }
        converged = true;
    }
    Ok(CvFit {
        hyper,
        score: cur.score,
        trace,
        used_simplex,
        evaluations,
        converged,
        folds,
    })
}
