#![allow(dead_code)]

use gum::dsl::{parse, validate};
use gum::kernels::KernelSpec;
use gum::model::{Dataset, FunctionDecl, ModelGraph};
use gum::obs::{sigmoid, ObservationModel};
use gum::vi::{VariationalGrad, VariationalState};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn graph(formula: &str, decls: &[FunctionDecl]) -> ModelGraph {
    validate(&parse(formula).unwrap(), decls).unwrap()
}

pub fn se(name: &str, variance: f64, lengthscale: f64) -> FunctionDecl {
    FunctionDecl::gp(name, KernelSpec::squared_exp(variance, lengthscale))
}

/// Values drawn uniformly from a grid of `levels` points on [lo, hi].
pub fn grid_values(r: &mut ChaCha8Rng, n: usize, levels: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let i = r.random_range(0..levels);
            lo + (hi - lo) * i as f64 / (levels - 1) as f64
        })
        .collect()
}

pub fn dataset(cols: &[(&str, Vec<f64>)], y: Vec<f64>) -> Dataset {
    Dataset::new(
        cols.iter().map(|(n, _)| n.to_string()).collect(),
        cols.iter().map(|(_, c)| c.clone()).collect(),
        y,
    )
    .unwrap()
}

pub fn unique_sorted(xs: &[f64]) -> Vec<f64> {
    let mut g = xs.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// N × V one-hot matrix mapping rows to grid values.
pub fn one_hot(xs: &[f64], grid: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(xs.len(), grid.len());
    for (i, x) in xs.iter().enumerate() {
        let j = grid.iter().position(|g| g == x).unwrap();
        m[(i, j)] = 1.0;
    }
    m
}

/// Mean-zero basis: rows orthonormal and orthogonal to the ones vector.
pub fn mean_zero_basis(v: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(v - 1, v);
    for m in 1..v {
        let z = ((m * (m + 1)) as f64).sqrt();
        for n in 0..m {
            p[(m - 1, n)] = 1.0 / z;
        }
        p[(m - 1, m)] = -(m as f64) / z;
    }
    p
}

/// Exact posterior of y = X w + ε, w ~ N(0, Λ), ε ~ N(0, s I):
/// returns (mean, covariance, log marginal likelihood).
pub fn conjugate_posterior(x: &DMatrix<f64>, lambda: &DMatrix<f64>, s: f64, y: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, f64) {
    let n = x.nrows();
    let prec = x.transpose() * x / s + lambda.clone().try_inverse().unwrap();
    let cov = prec.try_inverse().unwrap();
    let mean = &cov * x.transpose() * y / s;
    let marg = x * lambda * x.transpose() + DMatrix::identity(n, n) * s;
    let c = marg.clone().cholesky().unwrap();
    let alpha = c.solve(y);
    let logdet: f64 = 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let ev = -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    (mean, cov, ev)
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

pub fn se_gram(xs: &[f64], var: f64, ell: f64) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), xs.len(), |i, j| var * (-(xs[i] - xs[j]).powi(2) / (2.0 * ell * ell)).exp())
}

/// Standard GP-classification Laplace (Newton on latent values with a design map).
pub fn gp_classification_oracle(k: &DMatrix<f64>, phi: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let v = k.nrows();
    let kinv = k.clone().try_inverse().unwrap();
    let mut f = DVector::zeros(v);
    for _ in 0..100 {
        let rho = phi * &f;
        let p = rho.map(sigmoid);
        let w = DMatrix::from_diagonal(&p.map(|q| q * (1.0 - q)));
        let grad = phi.transpose() * (y - &p) - &kinv * &f;
        let hess = phi.transpose() * w * phi + &kinv;
        let step = hess.clone().cholesky().unwrap().solve(&grad);
        f += &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    let rho = phi * &f;
    let p = rho.map(sigmoid);
    let w = DMatrix::from_diagonal(&p.map(|q| q * (1.0 - q)));
    let cov = (phi.transpose() * w * phi + kinv).try_inverse().unwrap();
    (f, cov)
}

pub fn random_gum_instance(seed: u64) -> (ModelGraph, Dataset, ObservationModel) {
    let mut r = rng(seed);
    let formulas = [
        "a(x1)*b(x2) + c(x3)",
        "a(x1)*b(x2)*c(x3) + d(x4)*e(x5)",
        "(a(x1)+b(x2))*c(x3) + d(x4)",
        "a(x1)*b(x2) + a(x3)*c(x4)",
    ];
    let formula = formulas[r.random_range(0..formulas.len())];
    let names = ["a", "b", "c", "d", "e"];
    let decls: Vec<FunctionDecl> = names
        .iter()
        .map(|n| se(n, r.random_range(0.3..2.0), r.random_range(0.2..0.8)))
        .collect();
    let g = graph(formula, &decls);
    let n = 60;
    let cols: Vec<(&str, Vec<f64>)> = ["x1", "x2", "x3", "x4", "x5"]
        .iter()
        .map(|c| (*c, grid_values(&mut r, n, 7, 0.0, 2.0)))
        .collect();
    let rho: Vec<f64> = (0..n)
        .map(|i| (cols[0].1[i]).sin() * (1.0 + 0.5 * cols[1].1[i]) - 0.3 * cols[2].1[i] + 0.2 * cols[3].1[i])
        .collect();
    let obs = match r.random_range(0..3) {
        0 => ObservationModel::Gaussian { dispersion: 0.3 },
        1 => ObservationModel::Bernoulli,
        _ => ObservationModel::Poisson,
    };
    let y = obs.sample(&rho, &mut r);
    (g, dataset(&cols, y), obs)
}

pub fn random_state(r: &mut impl Rng, n: usize, n_off: usize) -> VariationalState {
    let mut l = DMatrix::from_fn(n, n, |_, _| 0.1 * r.sample::<f64, _>(StandardNormal));
    for i in 0..n {
        for j in (i + 1)..n {
            l[(i, j)] = 0.0;
        }
        l[(i, i)] = 0.2 + r.random::<f64>() * 0.3;
    }
    VariationalState {
        mu: DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal)),
        chol: l,
        offset_mean: (0..n_off).map(|_| r.random_range(-1.0..1.0)).collect(),
        offset_log_sd: (0..n_off).map(|_| r.random_range(-2.0..-0.5)).collect(),
    }
}

/// Variational state entries in a fixed order, with the lower triangle of L.
pub fn flatten(s: &VariationalState) -> Vec<f64> {
    let n = s.mu.len();
    let mut v: Vec<f64> = s.mu.iter().copied().collect();
    for i in 0..n {
        for j in 0..=i {
            v.push(s.chol[(i, j)]);
        }
    }
    v.extend(&s.offset_mean);
    v.extend(&s.offset_log_sd);
    v
}

pub fn unflatten(v: &[f64], like: &VariationalState) -> VariationalState {
    let n = like.mu.len();
    let mut s = like.clone();
    let mut p = 0;
    for i in 0..n {
        s.mu[i] = v[p];
        p += 1;
    }
    for i in 0..n {
        for j in 0..=i {
            s.chol[(i, j)] = v[p];
            p += 1;
        }
    }
    let no = like.offset_mean.len();
    s.offset_mean = v[p..p + no].to_vec();
    s.offset_log_sd = v[p + no..p + 2 * no].to_vec();
    s
}

pub fn flatten_grad(g: &VariationalGrad) -> Vec<f64> {
    flatten(&VariationalState {
        mu: g.mu.clone(),
        chol: g.chol.clone(),
        offset_mean: g.offset_mean.clone(),
        offset_log_sd: g.offset_log_sd.clone(),
    })
}

pub fn fd_gradient(f: impl Fn(&VariationalState) -> f64, at: &VariationalState, h: f64) -> Vec<f64> {
    let x = flatten(at);
    (0..x.len())
        .map(|i| {
            let at_step = |k: f64| {
                let mut y = x.clone();
                y[i] += k * h;
                f(&unflatten(&y, at))
            };
            (at_step(-2.0) - at_step(2.0) + 8.0 * (at_step(1.0) - at_step(-1.0))) / (12.0 * h)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

pub fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    while b - a > tol {
        let x1 = b - phi * (b - a);
        let x2 = a + phi * (b - a);
        if f(x1) >= f(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    0.5 * (a + b)
}

/// Q for K̃ = λ² M computed from explicit inverses and determinants.
pub fn q_white(lambda2: f64, m: &DMatrix<f64>, u: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let k = m * lambda2;
    let kinv = k.clone().try_inverse().unwrap();
    -0.5 * ((&kinv * sigma).trace() + k.determinant().ln() + (u.transpose() * &kinv * u)[(0, 0)])
}
