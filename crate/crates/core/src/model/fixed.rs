use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Registered analytic functions usable as `Fixed` terms and as simulation truths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedFn {
    Zero,
    One,
    Identity,
    Square,
    Cos,
    Sin,
    NegSin,
    Exp,
    /// exp(x/2) − 1
    ExpHalfMinusOne,
    /// 1 + cos(2x + π/3)
    OnePlusCosDoublePhase,
    /// 1.5 − x: a weight profile falling over positions in [0, 1], mean one.
    Primacy,
}

impl FixedFn {
    pub const ALL: [FixedFn; 11] = [
        FixedFn::Zero,
        FixedFn::One,
        FixedFn::Identity,
        FixedFn::Square,
        FixedFn::Cos,
        FixedFn::Sin,
        FixedFn::NegSin,
        FixedFn::Exp,
        FixedFn::ExpHalfMinusOne,
        FixedFn::OnePlusCosDoublePhase,
        FixedFn::Primacy,
    ];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            FixedFn::Zero => 0.0,
            FixedFn::One => 1.0,
            FixedFn::Identity => x,
            FixedFn::Square => x * x,
            FixedFn::Cos => x.cos(),
            FixedFn::Sin => x.sin(),
            FixedFn::NegSin => -x.sin(),
            FixedFn::Exp => x.exp(),
            FixedFn::ExpHalfMinusOne => (x / 2.0).exp() - 1.0,
            FixedFn::OnePlusCosDoublePhase => 1.0 + (2.0 * x + PI / 3.0).cos(),
            FixedFn::Primacy => 1.5 - x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FixedFn::Zero => "zero",
            FixedFn::One => "one",
            FixedFn::Identity => "identity",
            FixedFn::Square => "square",
            FixedFn::Cos => "cos",
            FixedFn::Sin => "sin",
            FixedFn::NegSin => "neg_sin",
            FixedFn::Exp => "exp",
            FixedFn::ExpHalfMinusOne => "exp_half_minus_one",
            FixedFn::OnePlusCosDoublePhase => "one_plus_cos_double_phase",
            FixedFn::Primacy => "primacy",
        }
    }
}

impl fmt::Display for FixedFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FixedFn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FixedFn::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = FixedFn::ALL.iter().map(|f| f.name()).collect();
                format!("unknown fixed function `{s}` (known: {})", names.join(", "))
            })
    }
}
