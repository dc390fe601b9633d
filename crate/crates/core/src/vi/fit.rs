use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ElboEstimate, InducingConfig, VariationalGrad, VariationalModel, VariationalState};
use crate::error::{GumError, Result};
use crate::model::graph::Offset;
use crate::model::predictor::predictor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViOptions {
    /// Monte-Carlo samples per training gradient.
    pub n_samples: usize,
    /// Samples of the held evaluation estimate used to pick the best state.
    pub n_eval: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    /// The step size decays as lr / (1 + epoch / lr_decay).
    pub lr_decay: f64,
    /// Stop after this many epochs without a better evaluation ELBO.
    pub patience: usize,
    pub seed: u64,
    pub eval_seed: u64,
    pub init_scale: f64,
    pub init_sd: f64,
    pub max_inducing: usize,
    pub estimate_dispersion: bool,
    /// Convergence tolerance of the closed-form coordinate ascent.
    pub tol: f64,
    pub max_closed_iters: usize,
}

impl Default for ViOptions {
    fn default() -> Self {
        ViOptions {
            n_samples: 64,
            n_eval: 1024,
            epochs: 300,
            steps_per_epoch: 10,
            learning_rate: 0.02,
            lr_decay: 100.0,
            patience: 60,
            seed: 0,
            eval_seed: 7919,
            init_scale: 0.1,
            init_sd: 0.1,
            max_inducing: 32,
            estimate_dispersion: false,
            tol: 1e-12,
            max_closed_iters: 1000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VariationalFit {
    pub state: VariationalState,
    pub elbo: ElboEstimate,
    /// Evaluation ELBO after every epoch.
    pub trace: Vec<f64>,
    pub epochs: usize,
    pub converged: bool,
    pub obs: crate::obs::ObservationModel,
    pub config: InducingConfig,
}

impl VariationalFit {
    /// Running maximum of the evaluation trace.
    pub fn best_trace(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.trace
            .iter()
            .map(|&v| {
                best = best.max(v);
                best
            })
            .collect()
    }
}

struct Adam {
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: DVector::zeros(n),
            v: DVector::zeros(n),
            t: 0,
        }
    }

    /// Ascent step on `x` along gradient `g`.
    fn step(&mut self, x: &mut DVector<f64>, g: &DVector<f64>, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        self.m = &self.m * B1 + g * (1.0 - B1);
        self.v = &self.v * B2 + g.map(|v| v * v) * (1.0 - B2);
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..x.len() {
            x[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

impl VariationalModel<'_> {
    /// Packs a state into whitened, unconstrained coordinates: m = R⁻¹μ,
    /// S = R⁻¹L with log diagonal, offsets with log standard deviations.
    fn pack(&self, r: &DMatrix<f64>, state: &VariationalState) -> DVector<f64> {
        let n = self.n_inducing;
        let m = r.solve_lower_triangular(&state.mu).expect("triangular prior factor");
        let s = r.solve_lower_triangular(&state.chol).expect("triangular prior factor");
        let no = state.offset_mean.len();
        let mut x = Vec::with_capacity(n + n * (n + 1) / 2 + 2 * no);
        x.extend(m.iter());
        for i in 0..n {
            for j in 0..i {
                x.push(s[(i, j)]);
            }
            x.push(s[(i, i)].ln());
        }
        x.extend(&state.offset_mean);
        x.extend(&state.offset_log_sd);
        DVector::from_vec(x)
    }

    fn unpack(&self, r: &DMatrix<f64>, x: &DVector<f64>) -> VariationalState {
        let n = self.n_inducing;
        let m = x.rows(0, n).into_owned();
        let mut s = DMatrix::zeros(n, n);
        let mut p = n;
        for i in 0..n {
            for j in 0..i {
                s[(i, j)] = x[p];
                p += 1;
            }
            s[(i, i)] = x[p].exp();
            p += 1;
        }
        let no = (x.len() - p) / 2;
        VariationalState {
            mu: r * m,
            chol: r * s,
            offset_mean: x.rows(p, no).iter().copied().collect(),
            offset_log_sd: x.rows(p + no, no).iter().copied().collect(),
        }
    }

    /// Chain rule from (μ, L) gradients to the packed coordinates.
    fn pack_grad(&self, r: &DMatrix<f64>, x: &DVector<f64>, g: &VariationalGrad) -> DVector<f64> {
        let n = self.n_inducing;
        let gm = r.transpose() * &g.mu;
        let gs = r.transpose() * &g.chol;
        let mut out = Vec::with_capacity(x.len());
        out.extend(gm.iter());
        let mut p = n;
        for i in 0..n {
            for j in 0..i {
                out.push(gs[(i, j)]);
                p += 1;
            }
            out.push(gs[(i, i)] * x[p].exp());
            p += 1;
        }
        out.extend(&g.offset_mean);
        out.extend(&g.offset_log_sd);
        DVector::from_vec(out)
    }

    /// Small random whitened means, except for functions in unit-offset factors.
    pub fn initial_state(&self, seed: u64, scale: f64, sd: f64) -> VariationalState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.prior_state().chol;
        let mut unit = vec![false; self.maps.len()];
        for b in &self.graph.blocks {
            for f in b.factors.iter().filter(|f| f.offset == Offset::FixedOne) {
                for t in &f.terms {
                    unit[t.func] = true;
                }
            }
        }
        let mut m = DVector::zeros(self.n_inducing);
        for (k, map) in self.maps.iter().enumerate() {
            if let Some(map) = map {
                for i in 0..map.m {
                    let z: f64 = rng.sample(StandardNormal);
                    if !unit[k] {
                        m[map.start + i] = scale * z;
                    }
                }
            }
        }
        let no = self.layout.n_offsets;
        VariationalState {
            mu: &r * m,
            chol: &r * sd,
            offset_mean: vec![0.0; no],
            offset_log_sd: vec![sd.ln(); no],
        }
    }

    /// Mean squared residual under q, used to re-estimate a Gaussian dispersion.
    fn mean_sq_residual(&self, state: &VariationalState, noise: &super::McNoise) -> f64 {
        let y = &self.design.y;
        let s_n = noise.n_samples();
        let mut total = 0.0;
        for s in 0..s_n {
            let u = &state.chol * noise.eps.column(s) + &state.mu;
            let theta = self.sample_state(state, noise, s, &u);
            let rho = predictor(&theta, self.design);
            total += y.iter().zip(rho.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        total / (s_n * y.len().max(1)) as f64
    }
}

/// Maximizes the ELBO. Gaussian models with additive blocks use exact
/// coordinate ascent; all others use Adam on the reparameterized gradient with
/// common random numbers per epoch. Constraints are enforced after every epoch
/// and the state with the best held-out-seed ELBO is returned.
pub fn fit_vi(model: &VariationalModel<'_>, init: Option<&VariationalState>, opts: &ViOptions) -> Result<VariationalFit> {
    let mut model = model.clone();
    let start = match init {
        Some(s) => s.clone(),
        None => model.initial_state(opts.seed, opts.init_scale, opts.init_sd),
    };
    let mut state = model.enforce_constraint(&start)?;
    let eval_noise = model.noise(opts.eval_seed, opts.n_eval);
    let mut trace = Vec::new();
    let mut best = (state.clone(), model.elbo(&state, &eval_noise));
    if !best.1.value.is_finite() {
        return Err(GumError::NonFiniteElbo);
    }
    let mut converged = false;
    let mut epochs = 0;

    if model.is_closed_form() {
        let mut last = best.1.value;
        for _ in 0..opts.max_closed_iters {
            epochs += 1;
            state = model.optimal_offsets(&state).expect("closed form");
            state = model.optimal_functions(&state)?.expect("closed form");
            state = model.enforce_constraint(&state)?;
            if opts.estimate_dispersion {
                let s = model.mean_sq_residual_exact(&state).max(1e-12);
                model.obs = model.obs.with_dispersion(s);
            }
            let e = model.elbo(&state, &eval_noise);
            if !e.value.is_finite() {
                return Err(GumError::NonFiniteElbo);
            }
            trace.push(e.value);
            if e.value >= best.1.value || opts.estimate_dispersion {
                best = (state.clone(), e.clone());
            }
            if (e.value - last).abs() < opts.tol * (1.0 + e.value.abs()) {
                converged = true;
                break;
            }
            last = e.value;
        }
    } else {
        let r = model.prior_state().chol;
        let mut x = model.pack(&r, &state);
        let mut adam = Adam::new(x.len());
        let mut since_best = 0;
        let mut lr_scale = 1.0;
        for epoch in 0..opts.epochs {
            epochs += 1;
            let noise = model.noise(opts.seed.wrapping_add(1 + epoch as u64), opts.n_samples);
            let lr = lr_scale * opts.learning_rate / (1.0 + epoch as f64 / opts.lr_decay);
            for _ in 0..opts.steps_per_epoch {
                let cur = model.unpack(&r, &x);
                let (_, g) = model.elbo_grad(&cur, &noise);
                let gx = model.pack_grad(&r, &x, &g);
                if gx.iter().any(|v| !v.is_finite()) {
                    break;
                }
                adam.step(&mut x, &gx, lr);
            }
            state = model.enforce_constraint(&model.unpack(&r, &x))?;
            x = model.pack(&r, &state);
            if opts.estimate_dispersion {
                let s = model.mean_sq_residual(&state, &eval_noise).max(1e-12);
                model.obs = model.obs.with_dispersion(s);
            }
            let e = model.elbo(&state, &eval_noise);
            trace.push(e.value);
            if !e.value.is_finite() || e.value < best.1.value - best.1.value.abs() {
                // Diverging: restart from the best state with a fresh optimizer and a smaller step.
                x = model.pack(&r, &best.0);
                adam = Adam::new(x.len());
                lr_scale *= 0.5;
                since_best += 1;
            } else if e.value > best.1.value {
                best = (state.clone(), e);
                since_best = 0;
            } else {
                since_best += 1;
            }
            if since_best >= opts.patience {
                converged = true;
                break;
            }
        }
    }
    if !best.1.value.is_finite() {
        return Err(GumError::NonFiniteElbo);
    }
    Ok(VariationalFit {
        state: best.0,
        elbo: best.1,
        trace,
        epochs,
        converged,
        obs: model.obs,
        config: model.config.clone(),
    })
}

impl VariationalModel<'_> {
    fn mean_sq_residual_exact(&self, state: &VariationalState) -> f64 {
        let cf = self.closed.as_ref().expect("closed form");
        let y = DVector::from_column_slice(&self.design.y);
        let m = DVector::from_column_slice(&state.offset_mean);
        let r = &y - &cf.r0 - &cf.b * &state.mu - &cf.h * &m;
        let sd2 = DVector::from_iterator(state.offset_log_sd.len(), state.offset_log_sd.iter().map(|l| (2.0 * l).exp()));
        let var_c = (cf.h.map(|v| v * v) * sd2).sum();
        (r.norm_squared() + (&cf.b * &state.chol).norm_squared() + cf.dvar.sum() + var_c) / y.len().max(1) as f64
    }
}
