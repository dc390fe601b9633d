mod common;

use common::*;
use gum::model::design::{TermData, Support};
use gum::model::predictor::{chosen_set, collapse, predictor, set_free};
use gum::model::{Design, FixedFn, FunctionDecl, Layout, Offset, ParameterState};
use gum::GumError;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_u(r: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal))
}

fn choices(dims: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &d in dims {
        out = out
            .into_iter()
            .flat_map(|c| (0..d).map(move |i| [c.clone(), vec![i]].concat()))
            .collect();
    }
    out
}

#[test]
fn collapsed_form_is_affine_and_matches_predictor() {
    let formulas = [
        "a(x1)*b(x2) + c(x3)",
        "(a(x1)+b(x2))*c(x3)*d(x4) + e(x5)*a(x1)",
        "a(x1)*b(x2) + a(x3)*c(x4) + d(x5)",
        "l(x1,x2)*a(x3) + b(x4)",
    ];
    let mut r = rng(1);
    for f in formulas {
        let mut decls: Vec<FunctionDecl> = ["a", "b", "c", "d", "e"].iter().map(|n| se(n, 1.0, 0.4)).collect();
        decls.push(FunctionDecl::linear("l", 1.0).with_arity(2));
        let g = graph(f, &decls);
        let n = 40;
        let cols: Vec<(&str, Vec<f64>)> = ["x1", "x2", "x3", "x4", "x5"]
            .iter()
            .map(|c| (*c, grid_values(&mut r, n, 6, -1.0, 1.0)))
            .collect();
        let design = Design::build(&g, &dataset(&cols, vec![0.0; n])).unwrap();
        let layout = Layout::new(&design);
        let dims: Vec<usize> = g.blocks.iter().map(|b| b.dim()).collect();
        for _ in 0..5 {
            let state = ParameterState::from_free(&random_u(&mut r, layout.n_free()), &design, &layout);
            for choice in choices(&dims) {
                let set = chosen_set(&g, &design, &choice);
                let col = collapse(&state, &design, &layout, &set);
                let rho = predictor(&state, &design);
                assert!((&col.phi * &col.u + &col.c - &rho).amax() <= 1e-12);
                let u2 = random_u(&mut r, col.u.len());
                let moved = set_free(&state, &design, &layout, &set, &u2);
                let rho2 = predictor(&moved, &design);
                let dev = (&col.phi * &u2 + &col.c - &rho2).amax();
                assert!(dev <= 1e-12 * (1.0 + rho2.amax()), "{f} {choice:?}: {dev}");
            }
        }
    }
}

#[test]
fn paper_truth_matches_scalar_evaluation() {
    let decls = [
        FunctionDecl::fixed("f1", FixedFn::ExpHalfMinusOne),
        FunctionDecl::fixed("f2", FixedFn::OnePlusCosDoublePhase),
        FunctionDecl::fixed("f3", FixedFn::NegSin),
    ];
    let mut g = graph("f1(x1)*f2(x2) + f3(x3)", &decls);
    g.intercept = false;
    let mut r = rng(4);
    let n = 20;
    let x1: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
    let x2: Vec<f64> = (0..n).map(|_| r.random_range(0.0..std::f64::consts::PI)).collect();
    let x3: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
    let design = Design::build(&g, &dataset(&[("x1", x1.clone()), ("x2", x2.clone()), ("x3", x3.clone())], vec![0.0; n])).unwrap();
    let rho = predictor(&ParameterState::zeros(&design), &design);
    for i in 0..n {
        let f1 = (x1[i] / 2.0).exp() - 1.0;
        let f2 = 1.0 + (2.0 * x2[i] + std::f64::consts::PI / 3.0).cos();
        let f3 = -x3[i].sin();
        assert!((rho[i] - (f1 * f2 + f3)).abs() < 1e-14);
    }
    assert!((FixedFn::ExpHalfMinusOne.eval(2.0) - (1f64.exp() - 1.0)).abs() < 1e-15);
}

#[test]
fn gp_predictor_matches_scalar_evaluation() {
    let g = graph("a(x1)*b(x2) + c(x3)", &[se("a", 1.0, 0.5), se("b", 1.0, 0.5), se("c", 1.0, 0.5)]);
    assert_eq!(g.blocks[0].factors[0].offset, Offset::Free);
    assert_eq!(g.blocks[0].factors[1].offset, Offset::FixedOne);
    let mut r = rng(9);
    let n = 20;
    let cols: Vec<(&str, Vec<f64>)> = ["x1", "x2", "x3"].iter().map(|c| (*c, grid_values(&mut r, n, 5, 0.0, 1.0))).collect();
    let design = Design::build(&g, &dataset(&cols, vec![0.0; n])).unwrap();
    let layout = Layout::new(&design);
    let state = ParameterState::from_free(&random_u(&mut r, layout.n_free()), &design, &layout);
    let rho = predictor(&state, &design);
    let at = |k: usize, x: f64| {
        let grid = design.functions[k].grid().unwrap();
        state.f[k][grid.iter().position(|&g| g == x).unwrap()]
    };
    let c11 = state.offsets[0];
    let c0 = state.offsets[design.intercept_slot().unwrap()];
    for i in 0..n {
        let hand = (at(0, cols[0].1[i]) + c11) * (at(1, cols[1].1[i]) + 1.0) + at(2, cols[2].1[i]) + c0;
        assert!((rho[i] - hand).abs() < 1e-13);
    }
}

#[test]
fn zero_state_and_glm_reduction() {
    let g = graph("a(x1)*b(x2) + c(x3)", &[se("a", 1.0, 0.5), se("b", 1.0, 0.5), se("c", 1.0, 0.5)]);
    let mut r = rng(2);
    let n = 15;
    let cols: Vec<(&str, Vec<f64>)> = ["x1", "x2", "x3"].iter().map(|c| (*c, grid_values(&mut r, n, 5, 0.0, 1.0))).collect();
    let design = Design::build(&g, &dataset(&cols, vec![0.0; n])).unwrap();
    let layout = Layout::new(&design);
    let zero = ParameterState::from_free(&DVector::zeros(layout.n_free()), &design, &layout);
    assert!(predictor(&zero, &design).amax() == 0.0);

    let lin = graph("w(x1,x2)", &[FunctionDecl::linear("w", 1.0).with_arity(2)]);
    let design = Design::build(&lin, &dataset(&cols[..2], vec![0.0; n])).unwrap();
    let state = ParameterState {
        f: vec![DVector::from_vec(vec![2.0, -3.0])],
        offsets: vec![0.5],
    };
    let rho = predictor(&state, &design);
    for i in 0..n {
        assert!((rho[i] - (2.0 * cols[0].1[i] - 3.0 * cols[1].1[i] + 0.5)).abs() < 1e-14);
    }
}

#[test]
fn design_examples() {
    let g = graph("f(x)", &[se("f", 1.0, 0.5)]);
    let d = Design::build(&g, &dataset(&[("x", vec![0.3, 0.1, 0.3])], vec![0.0; 3])).unwrap();
    assert_eq!(d.functions[0].support, Support::Grid(vec![0.1, 0.3]));
    match &d.blocks[0][0].terms[0].data {
        TermData::Index(ix) => assert_eq!(ix, &vec![1, 0, 1]),
        other => panic!("{other:?}"),
    }

    let g = graph("lin(x)", &[FunctionDecl::linear("lin", 1.0)]);
    let d = Design::build(&g, &dataset(&[("x", vec![0.3, 0.1, 0.3])], vec![0.0; 3])).unwrap();
    match &d.blocks[0][0].terms[0].data {
        TermData::Values(v) => assert_eq!(v, &vec![0.3, 0.1, 0.3]),
        other => panic!("{other:?}"),
    }

    let g = graph("a(z)*c(x)", &[se("a", 1.0, 0.5), FunctionDecl::fixed("c", FixedFn::Cos)]);
    let d = Design::build(&g, &dataset(&[("z", vec![1.0]), ("x", vec![0.0])], vec![0.0])).unwrap();
    assert_eq!(d.blocks[0][1].constant, vec![1.0]);

    let err = Design::build(&g, &dataset(&[("z", vec![1.0])], vec![0.0])).unwrap_err();
    assert!(matches!(err, GumError::MissingVariable { .. }));
    let err = Design::build(&g, &dataset(&[("z", vec![1.0]), ("x", vec![f64::NAN])], vec![0.0])).unwrap_err();
    assert!(matches!(err, GumError::NonFiniteValue { .. }));
}

#[test]
fn constrained_parameters_are_identifiable() {
    // Distinct free vectors must give distinct predictors on a generic dataset.
    let mut r = rng(17);
    let g = graph("a(x1)*b(x2) + c(x3)", &[se("a", 1.0, 0.5), se("b", 1.0, 0.5), se("c", 1.0, 0.5)]);
    let n = 200;
    let cols: Vec<(&str, Vec<f64>)> = ["x1", "x2", "x3"].iter().map(|c| (*c, grid_values(&mut r, n, 5, 0.0, 1.0))).collect();
    let design = Design::build(&g, &dataset(&cols, vec![0.0; n])).unwrap();
    let layout = Layout::new(&design);
    for _ in 0..1000 {
        let u1 = random_u(&mut r, layout.n_free());
        let u2 = random_u(&mut r, layout.n_free());
        let s1 = ParameterState::from_free(&u1, &design, &layout);
        let s2 = ParameterState::from_free(&u2, &design, &layout);
        assert!((predictor(&s1, &design) - predictor(&s2, &design)).amax() > 1e-8);
    }
    // The scale gauge: a·λ with b rescaled by 1/λ is not representable.
    let u = random_u(&mut r, layout.n_free());
    let s = ParameterState::from_free(&u, &design, &layout);
    let mut moved = s.clone();
    moved.f[0] *= 2.0;
    moved.offsets[0] *= 2.0;
    moved.f[1] = (moved.f[1].add_scalar(1.0) / 2.0).add_scalar(-1.0);
    assert!(moved.max_constraint_residual(&design) > 1e-3);
}

proptest! {
    #[test]
    fn reconstruction_satisfies_every_constraint(seed in 0u64..1000) {
        let mut r = rng(seed);
        let decls = [
            se("a", 1.0, 0.5),
            se("b", 1.0, 0.5).with_constraint(gum::model::ConstraintKind::MeanOne),
            se("c", 1.0, 0.5),
            se("d", 1.0, 0.5).with_constraint(gum::model::ConstraintKind::SumOne),
            se("e", 1.0, 0.5),
        ];
        let g = graph("a(x1)*b(x2) + c(x3) + d(x4)*e(x5)", &decls);
        let n = 30;
        let cols: Vec<(&str, Vec<f64>)> = ["x1", "x2", "x3", "x4", "x5"]
            .iter()
            .map(|c| (*c, grid_values(&mut r, n, 7, 0.0, 3.0)))
            .collect();
        let design = Design::build(&g, &dataset(&cols, vec![0.0; n])).unwrap();
        let layout = Layout::new(&design);
        let u = random_u(&mut r, layout.n_free()) * 100.0;
        let s = ParameterState::from_free(&u, &design, &layout);
        prop_assert!(s.max_constraint_residual(&design) <= 1e-10);
        prop_assert!((s.to_free(&design, &layout) - u).amax() <= 1e-10);
    }
}
