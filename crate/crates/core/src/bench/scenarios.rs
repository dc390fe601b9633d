use std::f64::consts::PI;

use super::{InputDist, InputSpec, Scenario, TruthSpec};
use crate::dsl::{parse, validate};
use crate::error::{GumError, Result};
use crate::kernels::KernelSpec;
use crate::model::{ConstraintKind, Dataset, FixedFn, FunctionDecl, ModelGraph};
use crate::obs::ObservationModel;

/// Grid bins of every function in the synthetic Poisson scenario.
pub const POISSON_BINS: usize = 51;
/// Grid bins of the grating-angle mapping.
pub const GRATING_BINS: usize = 36;

/// f1(x1)·f2(x2) + f3(x3) with Poisson observations, fitted with the
/// generating kernel hyperparameters.
pub fn poisson_scenario(seed: u64) -> Scenario {
    let truth = TruthSpec {
        formula: "f1(x1)*f2(x2) + f3(x3)".into(),
        truths: vec![
            ("f1".into(), FixedFn::ExpHalfMinusOne),
            ("f2".into(), FixedFn::OnePlusCosDoublePhase),
            ("f3".into(), FixedFn::NegSin),
        ],
        inputs: vec![
            InputSpec {
                name: "x1".into(),
                dist: InputDist::Uniform { lo: 0.0, hi: 2.0 },
            },
            InputSpec {
                name: "x2".into(),
                dist: InputDist::Uniform { lo: 0.0, hi: PI },
            },
            InputSpec {
                name: "x3".into(),
                dist: InputDist::Uniform { lo: 0.0, hi: 2.0 },
            },
        ],
        rows_per_obs: 1,
        family: ObservationModel::Poisson,
        seed,
    };
    let binned = |d: FunctionDecl| FunctionDecl {
        bins: Some(POISSON_BINS),
        ..d
    };
    Scenario {
        name: "synthetic-poisson".into(),
        formula: truth.formula.clone(),
        truth,
        priors: vec![
            binned(FunctionDecl::gp("f1", KernelSpec::squared_exp(1.0, 0.1))),
            binned(FunctionDecl::gp("f2", KernelSpec::periodic(1.0, PI / 20.0, PI))),
            binned(FunctionDecl::gp("f3", KernelSpec::squared_exp(1.0, 0.1))),
        ],
    }
}

fn grating_truth(n_gratings: usize, seed: u64) -> TruthSpec {
    TruthSpec {
        formula: "w(k)*f(x)".into(),
        truths: vec![("w".into(), FixedFn::Primacy), ("f".into(), FixedFn::Cos)],
        inputs: vec![
            InputSpec {
                name: "k".into(),
                dist: InputDist::Position,
            },
            // Orientation relative to the reference, doubled so the 180° orientation
            // period becomes 2π; the two categories sit at 0 and π.
            InputSpec {
                name: "x".into(),
                dist: InputDist::VonMises {
                    kappa: 0.3,
                    centers: vec![0.0, PI],
                },
            },
        ],
        rows_per_obs: n_gratings,
        family: ObservationModel::Bernoulli,
        seed,
    }
}

/// Sequences of `n_gratings` oriented gratings per trial, Bernoulli choices
/// driven by Σ_k w_k cos(x_tk) with primacy-weighted positions.
pub fn grating_scenario(n_trials: usize, n_gratings: usize, seed: u64) -> Result<(TruthSpec, Dataset)> {
    if n_trials == 0 {
        return Err(GumError::InvalidInput("at least one trial is required".into()));
    }
    if !(5..=10).contains(&n_gratings) {
        return Err(GumError::InvalidInput(format!("{n_gratings} gratings per trial; expected 5 to 10")));
    }
    let spec = grating_truth(n_gratings, seed);
    let data = super::simulate(&spec, n_trials)?;
    Ok((spec, data))
}

fn weight_decl() -> FunctionDecl {
    FunctionDecl::gp("w", KernelSpec::white(1.0)).with_constraint(ConstraintKind::MeanOne)
}

/// GUM with position weights and a periodic GP mapping of the grating angle.
pub fn grating_gum_graph() -> Result<ModelGraph> {
    let f = FunctionDecl {
        bins: Some(GRATING_BINS),
        ..FunctionDecl::gp("f", KernelSpec::periodic(1.0, 1.0, 2.0 * PI))
    };
    validate(&parse("w(k)*f(x)")?, &[weight_decl(), f]).map_err(GumError::Validation)
}

/// GLM with position weights and the fixed normative cosine mapping.
pub fn grating_glm_graph() -> Result<ModelGraph> {
    validate(&parse("w(k)*g(x)")?, &[weight_decl(), FunctionDecl::fixed("g", FixedFn::Cos)]).map_err(GumError::Validation)
}

/// The grating truth paired with the GUM prior, for recovery experiments.
pub fn grating_recovery_scenario(n_gratings: usize, seed: u64) -> Scenario {
    let f = FunctionDecl {
        bins: Some(GRATING_BINS),
        ..FunctionDecl::gp("f", KernelSpec::periodic(1.0, 1.0, 2.0 * PI))
    };
    Scenario {
        name: "grating".into(),
        truth: grating_truth(n_gratings, seed),
        formula: "w(k)*f(x)".into(),
        priors: vec![weight_decl(), f],
    }
}
