mod common;

use common::*;
use gum::hyper::*;
use gum::kernels::KernelSpec;
use gum::laplace::{LaplaceOptions, Problem};
use gum::model::{ConstraintKind, Design, FunctionDecl, ModelGraph};
use gum::obs::ObservationModel;
use gum::vi::{init_inducing, InducingPolicy, VariationalModel, VariationalState, ViOptions};
use gum::GumError;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

fn poisson_gam(seed: u64, n: usize) -> (ModelGraph, Design) {
    let mut r = rng(seed);
    let x1 = grid_values(&mut r, n, 8, 0.0, 2.0);
    let x2 = grid_values(&mut r, n, 8, 0.0, 2.0);
    let rho: Vec<f64> = (0..n).map(|i| 0.5 * x1[i].sin() - 0.3 * x2[i] + 0.4).collect();
    let y = ObservationModel::Poisson.sample(&rho, &mut r);
    let g = graph("a(x1) + b(x2)", &[se("a", 0.8, 0.6), se("b", 0.5, 0.9)]);
    let d = Design::build(&g, &dataset(&[("x1", x1), ("x2", x2)], y)).unwrap();
    (g, d)
}

#[test]
fn hyper_state_round_trips() {
    let decls = [
        se("a", 0.8, 0.6),
        FunctionDecl::gp("b", KernelSpec::periodic(1.5, 0.7, 3.0)),
        FunctionDecl::linear("w", 2.5).with_arity(2),
        FunctionDecl::gp("c", KernelSpec::white(0.3)),
    ];
    let g = graph("a(x1)*b(x2) + w(x3,x4) + c(x5)", &decls);
    let h = HyperState::from_graph(&g);
    assert_eq!(h.len(), 6);
    let names: Vec<(&str, &str)> = h.slots.iter().map(|s| (s.function.as_str(), s.name.as_str())).collect();
    assert_eq!(
        names,
        [("a", "variance"), ("a", "lengthscale"), ("b", "variance"), ("b", "lengthscale"), ("w", "variance"), ("c", "variance")]
    );
    assert_eq!(HyperState::from_graph(&h.apply(&g)), h);
    let moved = h.with_log_values(&[0.1, -0.2, 0.3, -0.4, 0.5, -0.6]).apply(&g);
    match &moved.functions[1].decl.kind {
        gum::model::FunctionKind::Gp { kernel } => assert!((kernel.hyper()[2] - 3.0).abs() < 1e-15),
        other => panic!("{other:?}"),
    }
    assert!(h.values().iter().all(|v| *v > 0.0));
    assert_eq!(aic(3, -120.0) - aic(3, -125.0), -10.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn apply_then_read_is_identity(v in prop::collection::vec(-5.0f64..5.0, 5)) {
        let decls = [se("a", 1.0, 1.0), FunctionDecl::gp("b", KernelSpec::periodic(1.0, 1.0, 2.0)), FunctionDecl::linear("w", 1.0)];
        let g = graph("a(x1) + b(x2) + w(x3)", &decls);
        let h = HyperState::from_graph(&g).with_log_values(&v);
        let back = HyperState::from_graph(&h.apply(&g));
        for (a, b) in back.log_values.iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn folds_cover_test_values() {
    let (_, d) = poisson_gam(1, 120);
    let folds = make_folds(&d, 5, 3).unwrap();
    let mut all: Vec<usize> = folds.test.concat();
    all.sort_unstable();
    assert_eq!(all, (0..120).collect::<Vec<_>>());

    // A value seen once can never be tested; the fallback keeps it in training.
    let mut r = rng(2);
    let mut x = grid_values(&mut r, 60, 4, 0.0, 1.0);
    x[17] = 9.0;
    let g = graph("f(x)", &[se("f", 1.0, 0.5)]);
    let d = Design::build(&g, &dataset(&[("x", x.clone())], vec![1.0; 60])).unwrap();
    let folds = make_folds(&d, 5, 0).unwrap();
    for (i, t) in folds.test.iter().enumerate() {
        assert!(!t.contains(&17));
        let train = folds.train(i, 60);
        for &o in t {
            assert!(train.iter().any(|&j| x[j] == x[o]));
        }
    }
    assert!(matches!(make_folds(&d, 1, 0), Err(GumError::InvalidInput(_))));
}

#[test]
fn empty_test_fold_is_rejected() {
    let (g, d) = poisson_gam(1, 40);
    let folds = Folds {
        test: vec![(0..20).collect(), vec![]],
    };
    let h = HyperState::from_graph(&g);
    let err = cvll(&h, &g, &d, ObservationModel::Poisson, &folds, &CvOptions::default(), false).unwrap_err();
    assert!(matches!(err, GumError::InvalidInput(_)));
}

#[test]
fn cvll_gradient_matches_full_pipeline_differences() {
    let (g, d) = poisson_gam(4, 150);
    let opts = CvOptions::default();
    let folds = make_folds(&d, 5, 0).unwrap();
    let h = HyperState::from_graph(&g);
    let s = cvll(&h, &g, &d, ObservationModel::Poisson, &folds, &opts, true).unwrap();
    assert!(s.reliable);
    let grad = s.gradient.unwrap();
    let step = 1e-4;
    let fd: Vec<f64> = (0..h.len())
        .map(|i| {
            let at = |e: f64| {
                let mut v = h.log_values.clone();
                v[i] += e;
                cvll(&h.with_log_values(&v), &g, &d, ObservationModel::Poisson, &folds, &opts, false)
                    .unwrap()
                    .score
            };
            (at(step) - at(-step)) / (2.0 * step)
        })
        .collect();
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in grad.iter().zip(&fd) {
        assert!((a - b).abs() <= 1e-3 * scale, "{grad:?} vs {fd:?}");
    }
}

#[test]
fn variance_derivative_reduces_to_precision_times_map() {
    let (g, d) = poisson_gam(5, 100);
    let problem = Problem::new(&g, &d, ObservationModel::Poisson).unwrap();
    let fit = problem.fit(&LaplaceOptions::default()).unwrap();
    for k in 0..2 {
        // ∂K/∂log β² = K, so K̃⁻¹ ∂K̃ K̃⁻¹ U collapses to K̃⁻¹ U.
        let dk = problem.prior.full[k].clone();
        let general = map_derivative(&problem, &fit, k, &dk).unwrap();
        let (o, n) = (problem.layout.free_off[k], problem.layout.free_dim[k]);
        let mut e = DVector::zeros(fit.u.len());
        let kt_inv = problem.prior.blocks[k].clone().try_inverse().unwrap();
        e.rows_mut(o, n).copy_from(&(kt_inv * fit.u.rows(o, n)));
        let special = fit.hessian.clone().try_inverse().unwrap() * e;
        assert!((&general - &special).amax() <= 1e-8 * special.amax());
        let grads = prior_grads(&g, &d, k);
        assert!((&grads[0] - &dk).amax() < 1e-14);
    }
}

#[test]
fn cv_ascent_trace_is_nondecreasing() {
    let (g, d) = poisson_gam(6, 150);
    let fit = fit_hp_cv(&g, &d, ObservationModel::Poisson, &CvOptions::default()).unwrap();
    assert!(fit.trace.windows(2).all(|w| w[1] >= w[0]));
    assert!(fit.hyper.values().iter().all(|v| *v > 0.0));
    assert_eq!(fit.score, *fit.trace.last().unwrap());
}

#[test]
fn simplex_fallback_does_not_lose_score() {
    let (g, d) = poisson_gam(7, 120);
    let opts = CvOptions {
        cond_limit: 0.0,
        max_evals: 40,
        ..CvOptions::default()
    };
    let start = cvll(&HyperState::from_graph(&g), &g, &d, ObservationModel::Poisson, &make_folds(&d, 5, 0).unwrap(), &opts, false)
        .unwrap()
        .score;
    let fit = fit_hp_cv(&g, &d, ObservationModel::Poisson, &opts).unwrap();
    assert!(fit.used_simplex);
    assert!(fit.score >= start);
    assert!(fit.trace.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn cv_recovers_lengthscale_order_of_magnitude() {
    let truth = KernelSpec::squared_exp(1.0, 0.1);
    let grid: Vec<f64> = (0..101).map(|i| i as f64 * 0.02).collect();
    let l = truth.gram(&grid, 1e-9).cholesky().unwrap().l();
    for rep in 0..10 {
        let mut r = rng(100 + rep);
        let f = &l * DVector::from_fn(grid.len(), |_, _| r.sample::<f64, _>(StandardNormal));
        let n = 1000;
        let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..grid.len())).collect();
        let x: Vec<f64> = idx.iter().map(|&i| grid[i]).collect();
        let rho: Vec<f64> = idx.iter().map(|&i| f[i] + 1.0).collect();
        let y = ObservationModel::Poisson.sample(&rho, &mut r);
        let g = graph("f(x)", &[se("f", 1.0, 0.4)]);
        let d = Design::build(&g, &dataset(&[("x", x)], y)).unwrap();
        let fit = fit_hp_cv(&g, &d, ObservationModel::Poisson, &CvOptions::default()).unwrap();
        let ell = fit.hyper.values()[1];
        assert!((ell.ln() - 0.1f64.ln()).abs() <= 0.7, "rep {rep}: ℓ = {ell}");
    }
}

#[test]
fn white_closed_form_is_argmax_of_q() {
    let mut r = rng(8);
    for _ in 0..20 {
        let v = r.random_range(3..12);
        let p = if r.random::<bool>() {
            mean_zero_basis(v)
        } else {
            DMatrix::from_fn(v - 1, v, |_, _| r.sample::<f64, _>(StandardNormal))
        };
        let d = p.nrows();
        let u = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal) * 0.7);
        let a = DMatrix::from_fn(d, d, |_, _| r.sample::<f64, _>(StandardNormal) * 0.3);
        let sigma = &a * a.transpose();
        let m = &p * p.transpose();
        let cf = white_closed_form(&p, &u, &sigma).unwrap();
        let best = golden_max(|t| q_white(t.exp(), &m, &u, &sigma), -20.0, 10.0, 1e-12).exp();
        assert!((cf - best).abs() <= 1e-6 * best.max(1.0), "{cf} vs {best}");
        assert!((em_q(&(&m * cf), &u, &sigma).unwrap() - q_white(cf, &m, &u, &sigma)).abs() < 1e-9);
    }
    let p = mean_zero_basis(5);
    let zero = white_closed_form(&p, &DVector::zeros(4), &DMatrix::zeros(4, 4)).unwrap();
    assert_eq!(zero, 1e-8);
}

#[test]
fn q_gradient_matches_finite_differences() {
    let mut r = rng(9);
    let grid: Vec<f64> = (0..9).map(|i| i as f64 * 0.25).collect();
    let p = mean_zero_basis(9);
    let u = DVector::from_fn(8, |_, _| r.sample::<f64, _>(StandardNormal));
    let a = DMatrix::from_fn(8, 8, |_, _| r.sample::<f64, _>(StandardNormal) * 0.2);
    let sigma = &a * a.transpose();
    let base = KernelSpec::squared_exp(1.3, 0.3);
    let q = |logs: &[f64]| {
        let k = base.with_log_hyper(logs).prior_gram(&grid);
        em_q(&(&p * k * p.transpose()), &u, &sigma).unwrap()
    };
    let kt = &p * base.prior_gram(&grid) * p.transpose();
    let dkt: Vec<DMatrix<f64>> = base.prior_grad(&grid).iter().map(|dk| &p * dk * p.transpose()).collect();
    let g = em_q_grad(&kt, &dkt, &u, &sigma).unwrap();
    let h = 1e-4;
    for i in 0..2 {
        let at = |e: f64| {
            let mut v = base.log_hyper();
            v[i] += e;
            q(&v)
        };
        let fd = (at(-2.0 * h) - at(2.0 * h) + 8.0 * (at(h) - at(-h))) / (12.0 * h);
        assert!((g[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{} vs {fd}", g[i]);
    }
}

#[test]
fn em_runs_and_m_steps_ascend() {
    let mut r = rng(10);
    let n = 200;
    let x1 = grid_values(&mut r, n, 10, 0.0, 2.0);
    let z = grid_values(&mut r, n, 6, 0.0, 5.0);
    let rho: Vec<f64> = (0..n).map(|i| (1.5 * x1[i]).sin() + 0.3 * (z[i] - 2.5)).collect();
    let y = ObservationModel::Poisson.sample(&rho, &mut r);
    let g = graph("a(x1) + c(z)", &[se("a", 0.5, 1.0), FunctionDecl::gp("c", KernelSpec::white(0.2))]);
    let d = Design::build(&g, &dataset(&[("x1", x1), ("z", z)], y)).unwrap();
    let fit = em_fit(&g, &d, ObservationModel::Poisson, &EmOptions::default()).unwrap();
    assert!(fit.iterations <= 50);
    assert!(!fit.q_traces.is_empty());
    for t in &fit.q_traces {
        assert!(t.windows(2).all(|w| w[1] >= w[0]));
    }
    assert!(fit.hyper.values().iter().all(|v| v.is_finite() && *v > 0.0));
    assert_eq!(fit.evidence_trace.len(), fit.iterations + 1);
    assert!(fit.fit.state.max_constraint_residual(&d) <= 1e-10);
}

struct Conjugate {
    graph: ModelGraph,
    design: Design,
    x: Vec<f64>,
    y: DVector<f64>,
}

const S: f64 = 0.09;

fn conjugate(config_levels: usize) -> Conjugate {
    let mut r = rng(11);
    let n = 120;
    let x = grid_values(&mut r, n, config_levels, 0.0, 2.0);
    let noise = Normal::new(0.0, S.sqrt()).unwrap();
    let y: Vec<f64> = x.iter().map(|v| 1.2 * (2.0 * v).sin() + noise.sample(&mut r)).collect();
    let mut graph = graph("f(x)", &[se("f", 0.3, 0.8).with_constraint(ConstraintKind::None)]);
    graph.intercept = false;
    let design = Design::build(&graph, &dataset(&[("x", x.clone())], y.clone())).unwrap();
    Conjugate {
        graph,
        design,
        x,
        y: DVector::from_vec(y),
    }
}

fn exact_evidence(c: &Conjugate, var: f64, ell: f64) -> f64 {
    let grid = unique_sorted(&c.x);
    let k = KernelSpec::squared_exp(var, ell).gram(&grid, 0.0);
    conjugate_posterior(&one_hot(&c.x, &grid), &k, S, &c.y).2
}

#[test]
fn elbo_hyper_gradient_matches_finite_differences() {
    // Stochastic path: product model, partial inducing sets, mixed kernels.
    let mut r = rng(12);
    let n = 120;
    let x1 = grid_values(&mut r, n, 12, 0.0, 2.0);
    let x2 = grid_values(&mut r, n, 12, 0.0, 3.0);
    let x3 = grid_values(&mut r, n, 5, -1.0, 1.0);
    let rho: Vec<f64> = (0..n).map(|i| 0.5 * x1[i] * x2[i].cos() + 0.3 * x3[i]).collect();
    let y = ObservationModel::Poisson.sample(&rho, &mut r);
    let decls = [
        se("a", 0.9, 0.7),
        FunctionDecl::gp("b", KernelSpec::periodic(1.1, 0.8, 3.0)),
        FunctionDecl::linear("w", 0.7),
    ];
    let g = graph("a(x1)*b(x2) + w(x3)", &decls);
    let d = Design::build(&g, &dataset(&[("x1", x1), ("x2", x2), ("x3", x3)], y)).unwrap();
    let cfg = init_inducing(&g, &d, InducingPolicy::Quantile, 5);
    let h = HyperState::from_graph(&g);
    let m = VariationalModel::new(&g, &d, ObservationModel::Poisson, cfg.clone()).unwrap();
    let mut state = m.initial_state(1, 0.5, 0.2);
    state.offset_mean = vec![0.2; state.offset_mean.len()];
    check_hyper_fd(&g, &d, ObservationModel::Poisson, &cfg, &h, &state, 16);

    // Closed-form path with a partial inducing set.
    let c = conjugate(15);
    let cfg = init_inducing(&c.graph, &c.design, InducingPolicy::Quantile, 6);
    let obs = ObservationModel::Gaussian { dispersion: S };
    let m = VariationalModel::new(&c.graph, &c.design, obs, cfg.clone()).unwrap();
    assert!(m.is_closed_form());
    let state = m.initial_state(2, 0.5, 0.3);
    check_hyper_fd(&c.graph, &c.design, obs, &cfg, &HyperState::from_graph(&c.graph), &state, 1);
}

fn check_hyper_fd(
    g: &ModelGraph,
    d: &Design,
    obs: ObservationModel,
    cfg: &gum::vi::InducingConfig,
    h: &HyperState,
    state: &VariationalState,
    samples: usize,
) {
    let m = VariationalModel::new(g, d, obs, cfg.clone()).unwrap();
    let noise = m.noise(3, samples);
    let grad = elbo_hyper_gradient(&m, h, state, &noise);
    let step = 1e-4;
    let fd: Vec<f64> = (0..h.len())
        .map(|i| {
            let at = |e: f64| {
                let mut v = h.log_values.clone();
                v[i] += e;
                let gg = h.with_log_values(&v).apply(g);
                let mm = VariationalModel::new(&gg, d, obs, cfg.clone()).unwrap();
                mm.elbo(state, &mm.noise(3, samples)).value
            };
            (at(-2.0 * step) - at(2.0 * step) + 8.0 * (at(step) - at(-step))) / (12.0 * step)
        })
        .collect();
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = grad.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
    assert!(err <= 1e-4, "{grad:?} vs {fd:?}");
}

#[test]
fn vi_hyperlearning_finds_evidence_maximum() {
    let c = conjugate(15);
    let cfg = init_inducing(&c.graph, &c.design, InducingPolicy::FullGrid, usize::MAX);
    let obs = ObservationModel::Gaussian { dispersion: S };
    let fit = fit_hp_vi(&c.graph, &c.design, obs, &cfg, &HpViOptions::default()).unwrap();
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..=120 {
        let lv = -3.0 + 6.0 * i as f64 / 120.0;
        for j in 0..=80 {
            let ll = -3.0 + 4.0 * j as f64 / 80.0;
            let e = exact_evidence(&c, lv.exp(), ll.exp());
            if e > best.0 {
                best = (e, lv.exp(), ll.exp());
            }
        }
    }
    let learned = fit.hyper.values();
    assert!((learned[0] / best.1 - 1.0).abs() <= 0.2, "{learned:?} vs {best:?}");
    let mut running = f64::NEG_INFINITY;
    for v in &fit.trace {
        assert!(v.is_finite());
        running = running.max(*v);
    }
    assert_eq!(running, fit.fit.elbo.value);
    let _ = ViOptions::default();
}
