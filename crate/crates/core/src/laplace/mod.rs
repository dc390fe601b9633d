//! Laplace approximation: blockwise Newton MAP search, full-Hessian posterior
//! covariance, evidence, and predictions.

mod hessian;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use hessian::{full_hessian, log_joint_gradient, posterior_covariance};

use crate::error::{GumError, Result};
use crate::linalg::{block_diag, Chol};
use crate::model::design::Design;
use crate::model::graph::{ModelGraph, Offset};
use crate::model::params::{projection_matrix, Layout, ParameterState, Prior};
use crate::model::predictor::{chosen_set, collapse, factor_values, predictor, set_free, ParamSet};
use crate::model::Dataset;
use crate::obs::ObservationModel;
use crate::posterior::FunctionPosterior;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaplaceOptions {
    pub tol: f64,
    pub max_cycles: usize,
    pub max_halvings: usize,
    pub n_init: usize,
    pub seed: u64,
    /// Scale of the random initial function draws relative to the prior.
    pub init_scale: f64,
    /// Drop the product-coupling second-derivative term from the posterior Hessian.
    pub gauss_newton: bool,
    pub rescale: bool,
    /// Estimate the Gaussian dispersion by maximizing the evidence.
    pub estimate_dispersion: bool,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        LaplaceOptions {
            tol: 1e-8,
            max_cycles: 200,
            max_halvings: 20,
            n_init: 1,
            seed: 0,
            init_scale: 0.1,
            gauss_newton: false,
            rescale: true,
            estimate_dispersion: false,
        }
    }
}

/// Everything fixed during one fit: structure, design, prior and likelihood.
#[derive(Clone, Debug)]
pub struct Problem<'a> {
    pub graph: &'a ModelGraph,
    pub design: &'a Design,
    pub layout: Layout,
    pub prior: Prior,
    pub obs: ObservationModel,
}

impl<'a> Problem<'a> {
    pub fn new(graph: &'a ModelGraph, design: &'a Design, obs: ObservationModel) -> Result<Self> {
        obs.check_support(&design.y)?;
        Ok(Problem {
            graph,
            design,
            layout: Layout::new(design),
            prior: Prior::new(graph, design)?,
            obs,
        })
    }

    pub fn loglik(&self, state: &ParameterState) -> f64 {
        let rho = predictor(state, self.design);
        self.obs.loglik(&self.design.y, rho.as_slice())
    }

    pub fn log_joint(&self, state: &ParameterState) -> f64 {
        let u = state.to_free(self.design, &self.layout);
        self.loglik(state) + self.prior.log_density(&u, &self.layout)
    }

    /// Prior covariance restricted to a parameter set.
    fn set_prior(&self, set: &ParamSet) -> DMatrix<f64> {
        let mut parts: Vec<DMatrix<f64>> = set.funcs.iter().map(|&k| self.prior.blocks[k].clone()).collect();
        parts.push(DMatrix::identity(set.offsets.len(), set.offsets.len()) * self.prior.offset_variance);
        block_diag(&parts)
    }

    /// Random initial state: functions in unit-offset factors start at their
    /// constraint constant, others at a scaled prior draw.
    pub fn initial_state(&self, seed: u64, scale: f64) -> ParameterState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_unit_factor = vec![false; self.graph.functions.len()];
        for b in &self.graph.blocks {
            for f in b.factors.iter().filter(|f| f.offset == Offset::FixedOne) {
                for t in &f.terms {
                    in_unit_factor[t.func] = true;
                }
            }
        }
        let mut u = DVector::zeros(self.layout.n_free());
        for k in 0..self.layout.n_functions() {
            let draw = self.prior.sample_function(k, scale, &mut rng);
            if !in_unit_factor[k] && !draw.is_empty() {
                u.rows_mut(self.layout.free_off[k], draw.len()).copy_from(&draw);
            }
        }
        ParameterState::from_free(&u, self.design, &self.layout)
    }

    /// One damped Newton step on `set`. Returns the new state and its log joint,
    /// or `None` when no step length improves the log joint.
    pub fn newton_step(&self, state: &ParameterState, current: f64, set: &ParamSet, max_halvings: usize) -> Result<Option<(ParameterState, f64)>> {
        let m = set.free_dim(&self.layout);
        if m == 0 {
            return Ok(None);
        }
        let col = collapse(state, self.design, &self.layout, set);
        let rho = &col.phi * &col.u + &col.c;
        let s = self.obs.dispersion();
        let n = self.design.n_obs;
        let mut wphi = col.phi.clone();
        let mut resid = DVector::zeros(n);
        for o in 0..n {
            let w = self.obs.weight(rho[o]);
            wphi.row_mut(o).scale_mut(w);
            resid[o] = (self.design.y[o] - self.obs.inv_link(rho[o])) / s;
        }
        let a = col.phi.transpose() * &wphi;
        let b = &a * &col.u + col.phi.transpose() * &resid;
        let k = self.set_prior(set);
        let l = Chol::new(&k).map_err(|_| GumError::SingularNewtonSystem)?.l();
        let mut inner = l.transpose() * &a * &l;
        for i in 0..m {
            inner[(i, i)] += 1.0;
        }
        let bc = Chol::new(&inner).map_err(|_| GumError::SingularNewtonSystem)?;
        let target = &l * bc.solve(&(l.transpose() * &b));
        if target.iter().any(|v| !v.is_finite()) {
            return Err(GumError::SingularNewtonSystem);
        }
        let delta = &target - &col.u;
        let mut step = 1.0;
        for _ in 0..=max_halvings {
            let cand_u = &col.u + &delta * step;
            let cand = set_free(state, self.design, &self.layout, set, &cand_u);
            let lj = self.log_joint(&cand);
            if lj.is_finite() && lj >= current {
                return Ok(Some((cand, lj)));
            }
            step *= 0.5;
        }
        Ok(None)
    }

    /// Damped Newton step on every free coordinate at once, with the exact
    /// Hessian when it is positive definite and Gauss-Newton otherwise. Moves
    /// along ridges that couple factors, where blockwise steps crawl.
    pub fn joint_step(&self, state: &ParameterState, current: f64, max_halvings: usize) -> Result<Option<(ParameterState, f64)>> {
        let g = log_joint_gradient(self, state);
        let chol = match Chol::new(&full_hessian(self, state, false)) {
            Ok(c) if c.jitter == 0.0 => c,
            _ => match Chol::new(&full_hessian(self, state, true)) {
                Ok(c) => c,
                Err(_) => return Ok(None),
            },
        };
        let delta = chol.solve(&g);
        if delta.iter().any(|v| !v.is_finite()) {
            return Ok(None);
        }
        let u = state.to_free(self.design, &self.layout);
        let mut step = 1.0;
        for _ in 0..=max_halvings {
            let cand = ParameterState::from_free(&(&u + &delta * step), self.design, &self.layout);
            let lj = self.log_joint(&cand);
            if lj.is_finite() && lj >= current {
                return Ok(Some((cand, lj)));
            }
            step *= 0.5;
        }
        Ok(None)
    }

    /// Equalizes the prior quadratic forms of scale-free factors within a block,
    /// leaving the predictor unchanged.
    pub fn rescale(&self, state: &ParameterState) -> ParameterState {
        let mut out = state.clone();
        for c in 0..self.graph.blocks.len() {
            let free = self.graph.scale_free_factors(c);
            if free.len() < 2 {
                continue;
            }
            let shared = free.iter().any(|&d| {
                self.graph.blocks[c].factors[d]
                    .terms
                    .iter()
                    .any(|t| self.graph.occurrences(t.func).len() > 1)
            });
            if shared {
                continue;
            }
            let alphas: Vec<f64> = free.iter().map(|&d| self.factor_alpha(&out, c, d)).collect();
            if alphas.iter().any(|a| !(*a > 1e-300) || !a.is_finite()) {
                continue;
            }
            let g = (alphas.iter().map(|a| a.ln()).sum::<f64>() / (2.0 * alphas.len() as f64)).exp();
            for (&d, &a) in free.iter().zip(&alphas) {
                let s = g / a.sqrt();
                let factor = &self.graph.blocks[c].factors[d];
                let mut done = Vec::new();
                for t in &factor.terms {
                    if !done.contains(&t.func) && !self.graph.functions[t.func].is_fixed() {
                        out.f[t.func] *= s;
                        done.push(t.func);
                    }
                }
                if let Some(slot) = self.design.blocks[c][d].free_offset {
                    out.offsets[slot] *= s;
                }
            }
        }
        out
    }

    /// Prior quadratic form of one factor's parameters.
    pub fn factor_alpha(&self, state: &ParameterState, c: usize, d: usize) -> f64 {
        let mut funcs: Vec<usize> = self.graph.blocks[c].factors[d].terms.iter().map(|t| t.func).collect();
        funcs.sort_unstable();
        funcs.dedup();
        let mut a = 0.0;
        for k in funcs {
            if let Some(p) = &self.design.functions[k].projection {
                if p.free_dim() > 0 {
                    a += self.prior.chols[k].quad_form(&p.project(&state.f[k]));
                }
            }
        }
        if let Some(slot) = self.design.blocks[c][d].free_offset {
            a += state.offsets[slot].powi(2) / self.prior.offset_variance;
        }
        a
    }

    /// Parameter sets updated in one cycle: one per factor index, then singletons
    /// for functions those sets could not include.
    pub fn schedule(&self) -> Vec<ParamSet> {
        let max_d = self.graph.max_dim();
        let mut sets = Vec::new();
        let mut covered = vec![false; self.layout.n_functions()];
        for t in 0..max_d {
            let choice: Vec<usize> = self.graph.blocks.iter().map(|b| t % b.dim()).collect();
            let set = chosen_set(self.graph, self.design, &choice);
            for &k in &set.funcs {
                covered[k] = true;
            }
            if !sets.contains(&set) {
                sets.push(set);
            }
        }
        for k in 0..covered.len() {
            if !covered[k] && self.design.functions[k].projection.is_some() {
                sets.push(ParamSet {
                    funcs: vec![k],
                    offsets: self.design.intercept_slot().into_iter().collect(),
                });
            }
        }
        sets
    }

    /// Blockwise Newton ascent from `init`.
    pub fn map_estimate(&self, init: &ParameterState, opts: &LaplaceOptions) -> Result<MapResult> {
        let mut state = init.clone();
        let mut lj = self.log_joint(&state);
        if !lj.is_finite() {
            return Err(GumError::NonFiniteLogJoint);
        }
        let mut trace = vec![lj];
        let sets = self.schedule();
        let mut converged = false;
        let mut cycles = 0;
        while cycles < opts.max_cycles {
            cycles += 1;
            let start = lj;
            for set in &sets {
                if let Some((s, v)) = self.newton_step(&state, lj, set, opts.max_halvings)? {
                    state = s;
                    lj = v;
                    trace.push(lj);
                }
            }
            if let Some((s, v)) = self.joint_step(&state, lj, opts.max_halvings)? {
                state = s;
                lj = v;
                trace.push(lj);
            }
            if opts.rescale {
                let r = self.rescale(&state);
                let v = self.log_joint(&r);
                if v >= lj {
                    state = r;
                    lj = v;
                    trace.push(lj);
                }
            }
            if !lj.is_finite() {
                return Err(GumError::NonFiniteLogJoint);
            }
            if (lj - start).abs() < opts.tol * (1.0 + lj.abs()) {
                converged = true;
                break;
            }
        }
        Ok(MapResult {
            state,
            log_joint: lj,
            trace,
            converged,
            cycles,
        })
    }

    /// MAP search from `n_init` random starts, then posterior covariance and evidence.
    pub fn fit(&self, opts: &LaplaceOptions) -> Result<LaplaceFit> {
        let mut best: Option<MapResult> = None;
        for i in 0..opts.n_init.max(1) {
            let init = self.initial_state(opts.seed.wrapping_add(i as u64), opts.init_scale);
            let r = self.map_estimate(&init, opts)?;
            if best.as_ref().is_none_or(|b| r.log_joint > b.log_joint) {
                best = Some(r);
            }
        }
        self.finish(best.expect("at least one start"), opts)
    }

    /// Posterior covariance and evidence at a MAP estimate.
    pub fn finish(&self, map: MapResult, opts: &LaplaceOptions) -> Result<LaplaceFit> {
        let u = map.state.to_free(self.design, &self.layout);
        let h = full_hessian(self, &map.state, opts.gauss_newton);
        let (cov_free, h_chol) = posterior_covariance(&h)?;
        let p = projection_matrix(self.design, &self.layout);
        let cov_theta = p.transpose() * &cov_free * &p;
        let loglik = self.loglik(&map.state);
        let log_evidence = loglik - 0.5 * self.prior.quad(&u, &self.layout)
            - 0.5 * (self.prior.log_det(&self.layout) + h_chol.log_det());
        Ok(LaplaceFit {
            state: map.state,
            u,
            cov_free,
            cov_theta,
            hessian: h,
            log_evidence,
            log_joint: map.log_joint,
            loglik,
            trace: map.trace,
            converged: map.converged,
            cycles: map.cycles,
            obs: self.obs,
        })
    }
}

#[derive(Clone, Debug)]
pub struct MapResult {
    pub state: ParameterState,
    pub log_joint: f64,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub cycles: usize,
}

#[derive(Clone, Debug)]
pub struct LaplaceFit {
    pub state: ParameterState,
    /// MAP in free coordinates.
    pub u: DVector<f64>,
    pub cov_free: DMatrix<f64>,
    /// Pᵀ Σ_free P over the stacked θ vector.
    pub cov_theta: DMatrix<f64>,
    /// Negative log-joint Hessian in free coordinates.
    pub hessian: DMatrix<f64>,
    pub log_evidence: f64,
    pub log_joint: f64,
    pub loglik: f64,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub cycles: usize,
    pub obs: ObservationModel,
}

impl LaplaceFit {
    /// Posterior over function `k` on its support.
    pub fn function_posterior(&self, graph: &ModelGraph, design: &Design, k: usize) -> FunctionPosterior {
        let layout = Layout::new(design);
        let (o, d) = (layout.theta_off[k], layout.theta_dim[k]);
        FunctionPosterior::from_parts(
            &graph.functions[k].decl.kind,
            &design.functions[k].support,
            self.state.f[k].clone(),
            self.cov_theta.view((o, o), (d, d)).into_owned(),
        )
    }

    pub fn fitted_predictor(&self, design: &Design) -> DVector<f64> {
        predictor(&self.state, design)
    }

    /// Posterior standard deviation of each free offset.
    pub fn offset_sd(&self, layout: &Layout) -> Vec<f64> {
        (0..layout.n_offsets)
            .map(|i| {
                let j = layout.free_offsets_at + i;
                self.cov_free[(j, j)].max(0.0).sqrt()
            })
            .collect()
    }
}

/// Builds the design and fits in one call. Gaussian dispersion is estimated
/// when requested.
pub fn fit(graph: &ModelGraph, data: &Dataset, obs: ObservationModel, opts: &LaplaceOptions) -> Result<(Design, LaplaceFit)> {
    let design = Design::build(graph, data)?;
    let fit = fit_design(graph, &design, obs, opts)?;
    Ok((design, fit))
}

pub fn fit_design(graph: &ModelGraph, design: &Design, obs: ObservationModel, opts: &LaplaceOptions) -> Result<LaplaceFit> {
    if opts.estimate_dispersion && matches!(obs, ObservationModel::Gaussian { .. }) {
        return fit_dispersion(graph, design, opts);
    }
    Problem::new(graph, design, obs)?.fit(opts)
}

/// Golden-section search over log s for the Gaussian dispersion maximizing the evidence.
fn fit_dispersion(graph: &ModelGraph, design: &Design, opts: &LaplaceOptions) -> Result<LaplaceFit> {
    let y = &design.y;
    let mean = y.iter().sum::<f64>() / y.len().max(1) as f64;
    let var = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len().max(1) as f64).max(1e-8);
    let eval = |log_s: f64| -> Result<LaplaceFit> {
        Problem::new(graph, design, ObservationModel::Gaussian { dispersion: log_s.exp() })?.fit(opts)
    };
    let (mut a, mut b) = ((var * 1e-4).ln(), (var * 2.0).ln());
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let mut f1 = eval(x1)?;
    let mut f2 = eval(x2)?;
    while b - a > 1e-4 {
        if f1.log_evidence >= f2.log_evidence {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = eval(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = eval(x2)?;
        }
    }
    Ok(if f1.log_evidence >= f2.log_evidence { f1 } else { f2 })
}

/// Factor values at the MAP, exposed for diagnostics.
pub fn map_factor_values(fit: &LaplaceFit, design: &Design) -> Vec<Vec<Vec<f64>>> {
    factor_values(&fit.state, design)
}
