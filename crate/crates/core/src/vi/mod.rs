//! Sparse variational inference: a joint Gaussian q over the inducing values of
//! every function, mean-field Gaussians over free offsets, and a
//! reparameterized Monte-Carlo ELBO.

mod fit;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use fit::{fit_vi, VariationalFit, ViOptions};

use crate::error::{GumError, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{lower, Chol};
use crate::model::design::{Design, Support};
use crate::model::graph::{FunctionKind, ModelGraph};
use crate::model::params::{Layout, ParameterState};
use crate::model::predictor::{backprop, factor_values, jacobian_theta, predictor, predictor_from_factors};
use crate::obs::ObservationModel;
use crate::posterior::FunctionPosterior;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InducingPolicy {
    /// Quantile-spaced over the unique inputs; periodic kernels get points
    /// uniform over one period.
    #[default]
    Quantile,
    /// Every unique input.
    FullGrid,
}

/// Inducing inputs of every GP function (`None` for linear and fixed functions).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingConfig {
    pub policy: InducingPolicy,
    pub z: Vec<Option<Vec<f64>>>,
}

fn quantiles(grid: &[f64], m: usize) -> Vec<f64> {
    let v = grid.len();
    if m == 1 {
        return vec![grid[(v - 1) / 2]];
    }
    (0..m)
        .map(|i| {
            let pos = i as f64 * (v - 1) as f64 / (m - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(v - 1);
            let t = pos - lo as f64;
            grid[lo] * (1.0 - t) + grid[hi] * t
        })
        .collect()
}

/// Chooses `min(m, v_k)` inducing inputs per GP function.
pub fn init_inducing(graph: &ModelGraph, design: &Design, policy: InducingPolicy, m: usize) -> InducingConfig {
    let z = graph
        .functions
        .iter()
        .zip(&design.functions)
        .map(|(spec, fd)| match (&spec.decl.kind, &fd.support) {
            (FunctionKind::Gp { kernel }, Support::Grid(g)) => {
                let mk = m.max(1).min(g.len());
                if policy == InducingPolicy::FullGrid || mk == g.len() {
                    return Some(g.clone());
                }
                Some(match kernel {
                    KernelSpec::Periodic { period, .. } => (0..mk).map(|i| period * i as f64 / mk as f64).collect(),
                    _ => quantiles(g, mk),
                })
            }
            _ => None,
        })
        .collect();
    InducingConfig { policy, z }
}

/// How one function's grid values follow from its inducing values:
/// f = A u + sd ⊙ ξ.
#[derive(Clone, Debug)]
struct FunctionMap {
    /// Start of this function's inducing values in the joint vector.
    start: usize,
    m: usize,
    /// `None` when the inducing inputs are the grid itself (A = I, sd = 0).
    a: Option<DMatrix<f64>>,
    sd: DVector<f64>,
    kzz: DMatrix<f64>,
    chol: Chol,
}

impl FunctionMap {
    fn grid_mean(&self, u: &DVector<f64>) -> DVector<f64> {
        let uk = u.rows(self.start, self.m);
        match &self.a {
            Some(a) => a * uk,
            None => uk.into_owned(),
        }
    }
}

/// Exact Gaussian expectations for Gaussian likelihoods with additive blocks,
/// where ρ = r₀ + B u + H c.
#[derive(Clone, Debug)]
struct ClosedForm {
    r0: DVector<f64>,
    b: DMatrix<f64>,
    h: DMatrix<f64>,
    /// Per-observation variance contributed by the conditional terms.
    dvar: DVector<f64>,
    /// Squared Jacobian entries per function, for hyperparameter gradients.
    j2: Vec<DMatrix<f64>>,
    /// Jacobian columns per function.
    j: Vec<DMatrix<f64>>,
}

/// q(u) = N(μ, L Lᵀ) over the stacked inducing values; q(c_i) = N(m_i, e^{2 ℓ_i}).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub mu: DVector<f64>,
    pub chol: DMatrix<f64>,
    pub offset_mean: Vec<f64>,
    pub offset_log_sd: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalGrad {
    pub mu: DVector<f64>,
    /// Lower-triangular gradient with respect to the Cholesky factor.
    pub chol: DMatrix<f64>,
    pub offset_mean: Vec<f64>,
    pub offset_log_sd: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub expected_loglik: f64,
    pub kl_functions: f64,
    pub kl_offsets: f64,
    /// Zero when the closed form was used.
    pub n_samples: usize,
    pub seed: u64,
}

/// Base noise for a fixed-seed estimate.
#[derive(Clone, Debug)]
pub struct McNoise {
    pub seed: u64,
    eps: DMatrix<f64>,
    xi: Vec<DMatrix<f64>>,
    eta: DMatrix<f64>,
}

impl McNoise {
    pub fn n_samples(&self) -> usize {
        self.eps.ncols()
    }
}

/// Per-sample quantities of one Monte-Carlo pass.
struct McPass {
    loglik: f64,
    /// Grid gradients per function, `v_k × S`.
    g_f: Vec<DMatrix<f64>>,
    /// Sampled inducing values, `n × S`.
    u: DMatrix<f64>,
    g_c: DMatrix<f64>,
    rho_mean: DVector<f64>,
}

/// Precomputed sparse-GP maps for one model, design and set of hyperparameters.
#[derive(Clone, Debug)]
pub struct VariationalModel<'a> {
    pub graph: &'a ModelGraph,
    pub design: &'a Design,
    pub layout: Layout,
    pub obs: ObservationModel,
    pub config: InducingConfig,
    maps: Vec<Option<FunctionMap>>,
    pub n_inducing: usize,
    closed: Option<ClosedForm>,
}

impl<'a> VariationalModel<'a> {
    pub fn new(graph: &'a ModelGraph, design: &'a Design, obs: ObservationModel, config: InducingConfig) -> Result<Self> {
        obs.check_support(&design.y)?;
        let layout = Layout::new(design);
        let mut maps = Vec::new();
        let mut start = 0;
        for (k, (spec, fd)) in graph.functions.iter().zip(&design.functions).enumerate() {
            let map = match (&spec.decl.kind, &fd.support) {
                (FunctionKind::Gp { kernel }, Support::Grid(g)) => {
                    let z = config.z[k].as_ref().ok_or_else(|| {
                        GumError::InvalidInput(format!("no inducing inputs for `{}`", spec.name()))
                    })?;
                    let kzz = kernel.prior_gram(z);
                    let chol = Chol::new(&kzz)?;
                    let (a, sd) = if z == g {
                        (None, DVector::zeros(g.len()))
                    } else {
                        let kxz = kernel.cross(g, z);
                        let a = chol.solve_mat(&kxz.transpose()).transpose();
                        let sd = DVector::from_fn(g.len(), |j, _| {
                            let q: f64 = a.row(j).iter().zip(kxz.row(j).iter()).map(|(p, q)| p * q).sum();
                            (kernel.eval(g[j], g[j]) - q).max(0.0).sqrt()
                        });
                        (Some(a), sd)
                    };
                    Some(FunctionMap {
                        start,
                        m: z.len(),
                        a,
                        sd,
                        kzz,
                        chol,
                    })
                }
                (FunctionKind::Linear { variance }, Support::Weights(w)) => {
                    let kzz = DMatrix::identity(*w, *w) * *variance;
                    let chol = Chol::new(&kzz)?;
                    Some(FunctionMap {
                        start,
                        m: *w,
                        a: None,
                        sd: DVector::zeros(*w),
                        kzz,
                        chol,
                    })
                }
                _ => None,
            };
            if let Some(m) = &map {
                start += m.m;
            }
            maps.push(map);
        }
        let mut model = VariationalModel {
            graph,
            design,
            layout,
            obs,
            config,
            maps,
            n_inducing: start,
            closed: None,
        };
        if matches!(obs, ObservationModel::Gaussian { .. }) && graph.all_additive() {
            model.closed = Some(model.closed_form());
        }
        Ok(model)
    }

    fn closed_form(&self) -> ClosedForm {
        let zero = ParameterState::from_theta(&DVector::zeros(self.layout.n_theta()), &self.layout);
        let fv = factor_values(&zero, self.design);
        let jt = jacobian_theta(&zero, self.design, &self.layout, &fv);
        let r0 = predictor_from_factors(&fv, &zero, self.design);
        let n = self.design.n_obs;
        let mut b = DMatrix::zeros(n, self.n_inducing);
        let mut dvar = DVector::zeros(n);
        let mut j2 = Vec::new();
        let mut js = Vec::new();
        for (k, map) in self.maps.iter().enumerate() {
            let Some(map) = map else {
                j2.push(DMatrix::zeros(0, 0));
                js.push(DMatrix::zeros(0, 0));
                continue;
            };
            let jk = jt.columns(self.layout.theta_off[k], self.layout.theta_dim[k]).into_owned();
            let bk = match &map.a {
                Some(a) => &jk * a,
                None => jk.clone(),
            };
            b.columns_mut(map.start, map.m).copy_from(&bk);
            let sq = jk.map(|v| v * v);
            dvar += &sq * map.sd.map(|s| s * s);
            j2.push(sq);
            js.push(jk);
        }
        let h = jt.columns(self.layout.theta_offsets_at, self.layout.n_offsets).into_owned();
        ClosedForm {
            r0,
            b,
            h,
            dvar,
            j2,
            j: js,
        }
    }

    pub fn is_closed_form(&self) -> bool {
        self.closed.is_some()
    }

    /// Range of function `k` in the stacked inducing vector.
    pub fn inducing_range(&self, k: usize) -> Option<(usize, usize)> {
        self.maps[k].as_ref().map(|m| (m.start, m.m))
    }

    /// Prior covariance of function `k`'s inducing values.
    pub fn prior_cov(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.maps[k].as_ref().map(|m| &m.kzz)
    }

    /// The prior itself as a variational state.
    pub fn prior_state(&self) -> VariationalState {
        let mut l = DMatrix::zeros(self.n_inducing, self.n_inducing);
        for m in self.maps.iter().flatten() {
            l.view_mut((m.start, m.start), (m.m, m.m)).copy_from(&m.chol.l());
        }
        let sd = self.graph.offset_variance.sqrt();
        VariationalState {
            mu: DVector::zeros(self.n_inducing),
            chol: l,
            offset_mean: vec![0.0; self.layout.n_offsets],
            offset_log_sd: vec![sd.ln(); self.layout.n_offsets],
        }
    }

    pub fn noise(&self, seed: u64, n_samples: usize) -> McNoise {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = DMatrix::from_fn(self.n_inducing, n_samples, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xi = self
            .maps
            .iter()
            .map(|m| match m {
                Some(m) if m.a.is_some() => {
                    DMatrix::from_fn(m.sd.len(), n_samples, |_, _| rng.sample::<f64, _>(StandardNormal))
                }
                _ => DMatrix::zeros(0, n_samples),
            })
            .collect();
        let eta = DMatrix::from_fn(self.layout.n_offsets, n_samples, |_, _| rng.sample::<f64, _>(StandardNormal));
        McNoise { seed, eps, xi, eta }
    }

    /// Posterior mean of function `k` on its grid (or its weights).
    pub fn grid_mean(&self, state: &VariationalState, k: usize) -> Option<DVector<f64>> {
        self.maps[k].as_ref().map(|m| m.grid_mean(&state.mu))
    }

    /// Posterior marginal variances of function `k` on its grid.
    pub fn grid_var(&self, state: &VariationalState, k: usize) -> Option<DVector<f64>> {
        self.maps[k].as_ref().map(|m| {
            let lk = state.chol.rows(m.start, m.m);
            let al = match &m.a {
                Some(a) => a * lk,
                None => lk.into_owned(),
            };
            DVector::from_fn(al.nrows(), |j, _| al.row(j).norm_squared() + m.sd[j] * m.sd[j])
        })
    }

    /// Joint marginal of (f_k(x_k) for every `Some` entry, then every offset).
    /// Entries must be `None` for linear and fixed functions.
    pub fn marginal_q(&self, state: &VariationalState, x: &[Option<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut cond = Vec::new();
        for (k, xk) in x.iter().enumerate() {
            let Some(xk) = xk else { continue };
            let map = self.maps[k].as_ref().expect("GP function");
            let FunctionKind::Gp { kernel } = &self.graph.functions[k].decl.kind else {
                panic!("marginal_q takes GP functions only");
            };
            let z = self.config.z[k].as_ref().expect("inducing inputs");
            let kz = DVector::from_iterator(z.len(), z.iter().map(|&zi| kernel.eval(*xk, zi)));
            let a = map.chol.solve(&kz);
            let mut row = DVector::zeros(self.n_inducing);
            row.rows_mut(map.start, map.m).copy_from(&a);
            cond.push((kernel.eval(*xk, *xk) - kz.dot(&a)).max(0.0));
            rows.push(row);
        }
        let nf = rows.len();
        let no = self.layout.n_offsets;
        let mut mean = DVector::zeros(nf + no);
        let mut cov = DMatrix::zeros(nf + no, nf + no);
        let al: Vec<DVector<f64>> = rows.iter().map(|r| state.chol.transpose() * r).collect();
        for i in 0..nf {
            mean[i] = rows[i].dot(&state.mu);
            for j in 0..nf {
                cov[(i, j)] = al[i].dot(&al[j]);
            }
            cov[(i, i)] += cond[i];
        }
        for i in 0..no {
            mean[nf + i] = state.offset_mean[i];
            cov[(nf + i, nf + i)] = (2.0 * state.offset_log_sd[i]).exp();
        }
        (mean, cov)
    }

    /// Posterior of function `k` over its inducing inputs, usable for predictions.
    pub fn function_posterior(&self, state: &VariationalState, k: usize) -> FunctionPosterior {
        let spec = &self.graph.functions[k];
        match (&spec.decl.kind, &self.maps[k]) {
            (FunctionKind::Fixed { func }, _) => FunctionPosterior::Fixed { func: *func },
            (kind, Some(m)) => {
                let mu = state.mu.rows(m.start, m.m).into_owned();
                let lk = state.chol.rows(m.start, m.m).into_owned();
                let cov = &lk * lk.transpose();
                match kind {
                    FunctionKind::Gp { kernel } => FunctionPosterior::gp(
                        kernel.clone(),
                        self.config.z[k].clone().expect("inducing inputs"),
                        mu,
                        cov,
                    ),
                    _ => FunctionPosterior::Linear {
                        mean: mu.iter().copied().collect(),
                        cov: (0..cov.nrows()).map(|i| cov.row(i).iter().copied().collect()).collect(),
                    },
                }
            }
            _ => unreachable!("parameterised function has a map"),
        }
    }

    /// KL[q(u) ‖ p(u)] and its gradients in (μ, L).
    fn kl_functions(&self, state: &VariationalState) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = self.n_inducing;
        let mut kl = 0.0;
        let mut g_mu = DVector::zeros(n);
        let mut kinv_l = DMatrix::zeros(n, n);
        for m in self.maps.iter().flatten() {
            let mu = state.mu.rows(m.start, m.m).into_owned();
            let lk = state.chol.rows(m.start, m.m).into_owned();
            let sol = m.chol.solve_mat(&lk);
            let kmu = m.chol.solve(&mu);
            kl += 0.5 * (lk.dot(&sol) + mu.dot(&kmu) - m.m as f64 + m.chol.log_det());
            g_mu.rows_mut(m.start, m.m).copy_from(&kmu);
            kinv_l.rows_mut(m.start, m.m).copy_from(&sol);
        }
        let mut g_l = lower(&kinv_l);
        for i in 0..n {
            let d = state.chol[(i, i)];
            kl -= d.abs().ln();
            g_l[(i, i)] -= 1.0 / d;
        }
        (kl, g_mu, g_l)
    }

    /// KL of the offset factors and its gradients in (m, ℓ).
    fn kl_offsets(&self, state: &VariationalState) -> (f64, Vec<f64>, Vec<f64>) {
        let s2 = self.graph.offset_variance;
        let mut kl = 0.0;
        let mut gm = Vec::new();
        let mut gl = Vec::new();
        for (m, l) in state.offset_mean.iter().zip(&state.offset_log_sd) {
            let v = (2.0 * l).exp();
            kl += 0.5 * ((v + m * m) / s2 - 1.0 - (2.0 * l - s2.ln()));
            gm.push(m / s2);
            gl.push(v / s2 - 1.0);
        }
        (kl, gm, gl)
    }

    fn sample_state(&self, state: &VariationalState, noise: &McNoise, s: usize, u: &DVector<f64>) -> ParameterState {
        let mut f = Vec::with_capacity(self.maps.len());
        for (k, m) in self.maps.iter().enumerate() {
            f.push(match m {
                None => DVector::zeros(0),
                Some(m) => {
                    let mut g = m.grid_mean(u);
                    if m.a.is_some() {
                        for j in 0..g.len() {
                            g[j] += m.sd[j] * noise.xi[k][(j, s)];
                        }
                    }
                    g
                }
            });
        }
        let offsets = (0..self.layout.n_offsets)
            .map(|i| state.offset_mean[i] + state.offset_log_sd[i].exp() * noise.eta[(i, s)])
            .collect();
        ParameterState { f, offsets }
    }

    fn mc_pass(&self, state: &VariationalState, noise: &McNoise, grads: bool) -> McPass {
        let s_n = noise.n_samples();
        let u_all = &state.chol * &noise.eps + DMatrix::from_columns(&vec![state.mu.clone(); s_n]);
        let mut g_f: Vec<DMatrix<f64>> = self
            .maps
            .iter()
            .map(|m| DMatrix::zeros(m.as_ref().map_or(0, |m| m.sd.len()), if grads { s_n } else { 0 }))
            .collect();
        let mut g_c = DMatrix::zeros(self.layout.n_offsets, if grads { s_n } else { 0 });
        let mut loglik = 0.0;
        let mut rho_mean = DVector::zeros(self.design.n_obs);
        let y = &self.design.y;
        for s in 0..s_n {
            let u = u_all.column(s).into_owned();
            let theta = self.sample_state(state, noise, s, &u);
            let fv = factor_values(&theta, self.design);
            let rho = predictor_from_factors(&fv, &theta, self.design);
            loglik += self.obs.loglik(y, rho.as_slice());
            rho_mean += &rho;
            if grads {
                let w: Vec<f64> = (0..y.len()).map(|o| self.obs.dloglik(y[o], rho[o])).collect();
                let g = backprop(&theta, self.design, &self.layout, &fv, &w);
                for (k, m) in self.maps.iter().enumerate() {
                    if m.is_some() {
                        let (o, d) = (self.layout.theta_off[k], self.layout.theta_dim[k]);
                        g_f[k].column_mut(s).copy_from(&g.rows(o, d));
                    }
                }
                for i in 0..self.layout.n_offsets {
                    g_c[(i, s)] = g[self.layout.theta_offsets_at + i];
                }
            }
        }
        McPass {
            loglik: loglik / s_n as f64,
            g_f,
            u: u_all,
            g_c,
            rho_mean: rho_mean / s_n as f64,
        }
    }

    fn offset_sd(&self, state: &VariationalState) -> DVector<f64> {
        DVector::from_iterator(state.offset_log_sd.len(), state.offset_log_sd.iter().map(|l| l.exp()))
    }

    /// Closed-form E_q[log p(y | θ)] and its gradients.
    fn closed_expectation(&self, cf: &ClosedForm, state: &VariationalState) -> (f64, VariationalGrad, DVector<f64>) {
        let s = self.obs.dispersion();
        let y = DVector::from_column_slice(&self.design.y);
        let m = DVector::from_column_slice(&state.offset_mean);
        let sd = self.offset_sd(state);
        let mean = &cf.r0 + &cf.b * &state.mu + &cf.h * &m;
        let r = &y - &mean;
        let bl = &cf.b * &state.chol;
        let h2 = cf.h.map(|v| v * v);
        let var_c = &h2 * sd.map(|v| v * v);
        let n = y.len() as f64;
        let total = r.norm_squared() + bl.norm_squared() + cf.dvar.sum() + var_c.sum();
        let value = -0.5 * n * (LN_2PI + s.ln()) - total / (2.0 * s);
        let g_mu = cf.b.transpose() * &r / s;
        let g_l = lower(&(cf.b.transpose() * &bl)) * (-1.0 / s);
        let g_m = cf.h.transpose() * &r / s;
        let g_ls = (h2.transpose() * DVector::from_element(h2.nrows(), 1.0)).component_mul(&sd.map(|v| v * v)) * (-1.0 / s);
        (
            value,
            VariationalGrad {
                mu: g_mu,
                chol: g_l,
                offset_mean: g_m.iter().copied().collect(),
                offset_log_sd: g_ls.iter().copied().collect(),
            },
            r,
        )
    }

    pub fn elbo(&self, state: &VariationalState, noise: &McNoise) -> ElboEstimate {
        let (kl_f, _, _) = self.kl_functions(state);
        let (kl_c, _, _) = self.kl_offsets(state);
        let (ell, n_samples) = match &self.closed {
            Some(cf) => (self.closed_expectation(cf, state).0, 0),
            None => (self.mc_pass(state, noise, false).loglik, noise.n_samples()),
        };
        ElboEstimate {
            value: ell - kl_f - kl_c,
            expected_loglik: ell,
            kl_functions: kl_f,
            kl_offsets: kl_c,
            n_samples,
            seed: noise.seed,
        }
    }

    /// Exact gradient of the fixed-noise ELBO estimate.
    pub fn elbo_grad(&self, state: &VariationalState, noise: &McNoise) -> (ElboEstimate, VariationalGrad) {
        let (kl_f, kg_mu, kg_l) = self.kl_functions(state);
        let (kl_c, kg_m, kg_ls) = self.kl_offsets(state);
        let (ell, mut g, n_samples) = match &self.closed {
            Some(cf) => {
                let (v, g, _) = self.closed_expectation(cf, state);
                (v, g, 0)
            }
            None => {
                let pass = self.mc_pass(state, noise, true);
                let s_n = noise.n_samples() as f64;
                let mut g_u = DMatrix::zeros(self.n_inducing, noise.n_samples());
                for (k, m) in self.maps.iter().enumerate() {
                    if let Some(m) = m {
                        let gu = match &m.a {
                            Some(a) => a.transpose() * &pass.g_f[k],
                            None => pass.g_f[k].clone(),
                        };
                        g_u.rows_mut(m.start, m.m).copy_from(&gu);
                    }
                }
                let g_mu = g_u.column_sum() / s_n;
                let g_l = lower(&(&g_u * noise.eps.transpose())) / s_n;
                let sd = self.offset_sd(state);
                let g_m: Vec<f64> = (0..self.layout.n_offsets).map(|i| pass.g_c.row(i).sum() / s_n).collect();
                let g_ls: Vec<f64> = (0..self.layout.n_offsets)
                    .map(|i| pass.g_c.row(i).dot(&noise.eta.row(i)) * sd[i] / s_n)
                    .collect();
                (
                    pass.loglik,
                    VariationalGrad {
                        mu: g_mu,
                        chol: g_l,
                        offset_mean: g_m,
                        offset_log_sd: g_ls,
                    },
                    noise.n_samples(),
                )
            }
        };
        g.mu -= kg_mu;
        g.chol -= kg_l;
        for i in 0..g.offset_mean.len() {
            g.offset_mean[i] -= kg_m[i];
            g.offset_log_sd[i] -= kg_ls[i];
        }
        (
            ElboEstimate {
                value: ell - kl_f - kl_c,
                expected_loglik: ell,
                kl_functions: kl_f,
                kl_offsets: kl_c,
                n_samples,
                seed: noise.seed,
            },
            g,
        )
    }

    /// Gradient of the fixed-noise ELBO with respect to every log-hyperparameter
    /// of every function, holding q(u) fixed. Entry `k` is empty for fixed functions.
    pub fn elbo_grad_hyper(&self, state: &VariationalState, noise: &McNoise) -> Vec<Vec<f64>> {
        // Sensitivities of the expected log-likelihood to A and to the conditional
        // standard deviations, per function.
        let mut sens: Vec<Option<(DMatrix<f64>, DVector<f64>)>> = vec![None; self.maps.len()];
        match &self.closed {
            Some(cf) => {
                let (_, _, r) = self.closed_expectation(cf, state);
                let s = self.obs.dispersion();
                let sigma = &state.chol * state.chol.transpose();
                let g_b = (&r * state.mu.transpose() - &cf.b * &sigma) / s;
                for (k, m) in self.maps.iter().enumerate() {
                    if let Some(m) = m {
                        if m.a.is_some() {
                            let g_a = cf.j[k].transpose() * g_b.columns(m.start, m.m);
                            let col_sq = cf.j2[k].row_sum().transpose();
                            let g_sd = col_sq.component_mul(&m.sd) * (-1.0 / s);
                            sens[k] = Some((g_a, g_sd));
                        }
                    }
                }
            }
            None => {
                let pass = self.mc_pass(state, noise, true);
                let s_n = noise.n_samples() as f64;
                for (k, m) in self.maps.iter().enumerate() {
                    if let Some(m) = m {
                        if m.a.is_some() {
                            let uk = pass.u.rows(m.start, m.m);
                            let g_a = &pass.g_f[k] * uk.transpose() / s_n;
                            let g_sd = pass.g_f[k].component_mul(&noise.xi[k]).column_sum() / s_n;
                            sens[k] = Some((g_a, g_sd));
                        }
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(self.maps.len());
        for (k, m) in self.maps.iter().enumerate() {
            let Some(m) = m else {
                out.push(Vec::new());
                continue;
            };
            let mu = state.mu.rows(m.start, m.m).into_owned();
            let lk = state.chol.rows(m.start, m.m).into_owned();
            let kinv = m.chol.inverse();
            let second = &mu * mu.transpose() + &lk * lk.transpose();
            let kl_mat = (&kinv - &kinv * second * &kinv) * 0.5;
            match &self.graph.functions[k].decl.kind {
                FunctionKind::Gp { kernel } => {
                    let z = self.config.z[k].as_ref().expect("inducing inputs");
                    let dkzz = kernel.prior_grad(z);
                    let mut grads: Vec<f64> = dkzz.iter().map(|dk| -kl_mat.dot(dk)).collect();
                    if let (Some((g_a, g_sd)), Some(a)) = (&sens[k], &m.a) {
                        let grid = self.design.functions[k].grid().expect("grid support");
                        let dkxz = kernel.cross_grad(grid, z);
                        let ga_kinv = g_a * &kinv;
                        // ∂E/∂d_j = ∂E/∂sd_j / (2 sd_j); zero where the conditional variance vanishes.
                        let g_d = DVector::from_fn(grid.len(), |j, _| {
                            if m.sd[j] > 1e-150 {
                                g_sd[j] / (2.0 * m.sd[j])
                            } else {
                                0.0
                            }
                        });
                        let mut diag = vec![vec![0.0; grid.len()]; grads.len()];
                        for (j, &x) in grid.iter().enumerate() {
                            let d = kernel.cross_grad(&[x], &[x]);
                            for (h, dm) in d.iter().enumerate() {
                                diag[h][j] = dm[(0, 0)];
                            }
                        }
                        let at_da = a.transpose() * DMatrix::from_diagonal(&g_d) * a;
                        for h in 0..grads.len() {
                            let da = &dkxz[h] - a * &dkzz[h];
                            let mut e = ga_kinv.dot(&da);
                            let cross: f64 = (0..grid.len())
                                .map(|j| g_d[j] * (diag[h][j] - 2.0 * dkxz[h].row(j).dot(&a.row(j))))
                                .sum();
                            e += cross + at_da.dot(&dkzz[h]);
                            grads[h] += e;
                        }
                    }
                    out.push(grads);
                }
                FunctionKind::Linear { .. } => out.push(vec![-kl_mat.dot(&m.kzz)]),
                FunctionKind::Fixed { .. } => out.push(Vec::new()),
            }
        }
        out
    }

    /// Monte-Carlo (or exact, when ρ is linear) posterior mean of the predictor.
    pub fn predictor_mean(&self, state: &VariationalState, noise: &McNoise) -> DVector<f64> {
        match &self.closed {
            Some(cf) => &cf.r0 + &cf.b * &state.mu + &cf.h * DVector::from_column_slice(&state.offset_mean),
            None => self.mc_pass(state, noise, false).rho_mean,
        }
    }

    /// Predictor evaluated at the posterior means of all parameters.
    pub fn predictor_at_mean(&self, state: &VariationalState) -> DVector<f64> {
        predictor(&self.mean_parameters(state), self.design)
    }

    /// Posterior means as a parameter state over grids and offsets.
    pub fn mean_parameters(&self, state: &VariationalState) -> ParameterState {
        ParameterState {
            f: self
                .maps
                .iter()
                .map(|m| m.as_ref().map_or_else(|| DVector::zeros(0), |m| m.grid_mean(&state.mu)))
                .collect(),
            offsets: state.offset_mean.clone(),
        }
    }

    /// Shifts the mean of every constrained function along the unit vector so
    /// that its posterior mean satisfies pᵀ E[f] = l, compensating free offsets
    /// where the shift can be absorbed.
    pub fn enforce_constraint(&self, state: &VariationalState) -> Result<VariationalState> {
        let mut out = state.clone();
        for (k, m) in self.maps.iter().enumerate() {
            let Some(m) = m else { continue };
            let Some(pr) = &self.design.functions[k].projection else { continue };
            if pr.is_none() {
                continue;
            }
            let mean = m.grid_mean(&out.mu);
            let unit = match &m.a {
                Some(a) => a.column_sum(),
                None => DVector::from_element(m.m, 1.0),
            };
            let den = pr.p.dot(&unit);
            if den.abs() < 1e-12 {
                return Err(GumError::DegenerateDenominator {
                    function: self.graph.functions[k].name().to_string(),
                    value: den,
                });
            }
            let delta = (pr.l - pr.p.dot(&mean)) / den;
            if delta == 0.0 {
                continue;
            }
            for i in 0..m.m {
                out.mu[m.start + i] += delta;
            }
            let shift = delta * unit.mean();
            for (c, d) in self.graph.occurrences(k) {
                if self.graph.blocks[c].dim() == 1 {
                    if let Some(s) = self.design.intercept_slot() {
                        out.offset_mean[s] -= shift;
                    }
                } else if let Some(s) = self.design.blocks[c][d].free_offset {
                    out.offset_mean[s] -= shift;
                }
            }
        }
        Ok(out)
    }

    /// Largest |pᵀ E[f_k] − l_k| over constrained functions.
    pub fn max_constraint_residual(&self, state: &VariationalState) -> f64 {
        self.mean_parameters(state).max_constraint_residual(self.design)
    }

    /// Closed-form q(u) maximizing the ELBO for fixed offset factors (Gaussian,
    /// additive models only).
    fn optimal_functions(&self, state: &VariationalState) -> Result<Option<VariationalState>> {
        let Some(cf) = &self.closed else { return Ok(None) };
        let s = self.obs.dispersion();
        let y = DVector::from_column_slice(&self.design.y);
        let m = DVector::from_column_slice(&state.offset_mean);
        let mut prec = cf.b.transpose() * &cf.b / s;
        for map in self.maps.iter().flatten() {
            let kinv = map.chol.inverse();
            let mut v = prec.view_mut((map.start, map.start), (map.m, map.m));
            v += kinv;
        }
        let pc = Chol::new(&prec)?;
        let cov = pc.inverse();
        let mu = &cov * cf.b.transpose() * (&y - &cf.r0 - &cf.h * &m) / s;
        let chol = Chol::new(&cov)?.l();
        Ok(Some(VariationalState {
            mu,
            chol,
            ..state.clone()
        }))
    }

    /// Closed-form offset factors maximizing the ELBO for fixed q(u), one at a time.
    fn optimal_offsets(&self, state: &VariationalState) -> Option<VariationalState> {
        let cf = self.closed.as_ref()?;
        let s = self.obs.dispersion();
        let y = DVector::from_column_slice(&self.design.y);
        let mut out = state.clone();
        for i in 0..self.layout.n_offsets {
            let hi = cf.h.column(i);
            let mut m = DVector::from_column_slice(&out.offset_mean);
            m[i] = 0.0;
            let resid = &y - &cf.r0 - &cf.b * &out.mu - &cf.h * &m;
            let prec = 1.0 / self.graph.offset_variance + hi.norm_squared() / s;
            out.offset_mean[i] = hi.dot(&resid) / s / prec;
            out.offset_log_sd[i] = -0.5 * prec.ln();
        }
        Some(out)
    }
}
