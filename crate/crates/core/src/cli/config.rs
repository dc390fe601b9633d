//! TOML configuration of fits and simulation truths.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{InputDist, InputSpec, TruthSpec};
use crate::dsl::{parse, validate};
use crate::error::{GumError, Result};
use crate::hyper::{CvOptions, EmOptions, HpViOptions, HyperMethod};
use crate::kernels::KernelSpec;
use crate::laplace::LaplaceOptions;
use crate::model::{ConstraintKind, FixedFn, FunctionDecl, FunctionKind, ModelGraph};
use crate::obs::ObservationModel;
use crate::vi::{InducingPolicy, ViOptions};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Laplace,
    Vi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Poisson,
    Bernoulli,
}

/// Prior of one function. `type` selects the variant; unused keys must be absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionConfig {
    /// squared_exp, periodic, white, linear or fixed.
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengthscale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<f64>,
    /// Registered function name for `fixed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<String>,
    /// Input value pinned to zero by `first_zero`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
}

impl FunctionConfig {
    pub fn to_decl(&self, name: &str) -> Result<FunctionDecl> {
        let bad = |msg: String| GumError::Config(format!("function `{name}`: {msg}"));
        let variance = self.variance.unwrap_or(1.0);
        let mut decl = match self.kind.as_str() {
            "squared_exp" => FunctionDecl::gp(name, KernelSpec::squared_exp(variance, self.lengthscale.unwrap_or(1.0))),
            "periodic" => {
                let period = self.period.ok_or_else(|| bad("periodic kernels need `period`".into()))?;
                FunctionDecl::gp(name, KernelSpec::periodic(variance, self.lengthscale.unwrap_or(1.0), period))
            }
            "white" => FunctionDecl::gp(name, KernelSpec::white(variance)),
            "linear" => FunctionDecl::linear(name, variance),
            "fixed" => {
                let f = self.function.as_deref().ok_or_else(|| bad("fixed functions need `function`".into()))?;
                FunctionDecl::fixed(name, f.parse::<FixedFn>().map_err(bad)?)
            }
            other => return Err(bad(format!("unknown type `{other}` (expected squared_exp, periodic, white, linear or fixed)"))),
        };
        if let FunctionKind::Gp { kernel } = &decl.kind {
            kernel.validate().map_err(|e| bad(e.to_string()))?;
        }
        if let Some(a) = self.arity {
            decl = decl.with_arity(a);
        }
        if let Some(c) = &self.constraint {
            let mut kind = ConstraintKind::from_name(c).ok_or_else(|| bad(format!("unknown constraint `{c}`")))?;
            if let ConstraintKind::FirstZero { anchor } = &mut kind {
                *anchor = self.anchor;
            }
            decl = decl.with_constraint(kind);
        }
        decl.bins = self.bins;
        Ok(decl)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InducingSection {
    pub points: usize,
    pub policy: InducingPolicy,
}

impl Default for InducingSection {
    fn default() -> Self {
        InducingSection {
            points: 32,
            policy: InducingPolicy::Quantile,
        }
    }
}

fn default_response() -> String {
    "y".into()
}

fn default_hyper() -> HyperMethod {
    HyperMethod::Fixed
}

fn yes() -> bool {
    true
}

/// Everything needed to reproduce a fit besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub formula: String,
    #[serde(default = "default_response")]
    pub response: String,
    /// Column whose values group rows into observations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub family: Family,
    /// Gaussian noise variance (initial value when it is estimated).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispersion: Option<f64>,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_hyper")]
    pub hyper: HyperMethod,
    /// Seeds every random component (initialization, folds, Monte Carlo).
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub intercept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_variance: Option<f64>,
    #[serde(default)]
    pub functions: BTreeMap<String, FunctionConfig>,
    #[serde(default)]
    pub inducing: InducingSection,
    #[serde(default)]
    pub laplace: LaplaceOptions,
    #[serde(default)]
    pub vi: ViOptions,
    #[serde(default)]
    pub cv: CvOptions,
    #[serde(default)]
    pub em: EmOptions,
    #[serde(default)]
    pub elbo: HpViOptions,
}

/// Parses `key=value` overrides; values are TOML literals, or plain strings otherwise.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| GumError::Config(format!("override `{o}` is not of the form key=value")))?;
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let path: Vec<&str> = key.trim().split('.').collect();
        let mut cur = &mut *table;
        for part in &path[..path.len() - 1] {
            cur = cur
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| GumError::Config(format!("override `{key}`: `{part}` is not a section")))?;
        }
        cur.insert(path[path.len() - 1].to_string(), value);
    }
    Ok(())
}

pub fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path)?;
    text.parse::<toml::Table>()
        .map_err(|e| GumError::Config(format!("{}: {e}", path.display())))
}

impl FitConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let mut cfg: FitConfig = table.try_into().map_err(|e: toml::de::Error| GumError::Config(e.to_string()))?;
        cfg.resolve();
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut table = read_table(path)?;
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table)
    }

    /// Propagates the top-level seed into every component, and the main
    /// inference options into the hyperparameter searches.
    fn resolve(&mut self) {
        self.laplace.seed = self.seed;
        self.vi.seed = self.seed;
        self.cv.seed = self.seed;
        self.em.laplace = self.laplace.clone();
        self.elbo.vi = self.vi.clone();
    }

    pub fn observation_model(&self) -> Result<ObservationModel> {
        Ok(match self.family {
            Family::Gaussian => ObservationModel::gaussian(self.dispersion.unwrap_or(1.0))?,
            Family::Poisson => ObservationModel::Poisson,
            Family::Bernoulli => ObservationModel::Bernoulli,
        })
    }

    pub fn decls(&self) -> Result<Vec<FunctionDecl>> {
        self.functions.iter().map(|(n, f)| f.to_decl(n)).collect()
    }

    pub fn graph(&self) -> Result<ModelGraph> {
        let ast = parse(&self.formula)?;
        let mut g = validate(&ast, &self.decls()?).map_err(GumError::Validation)?;
        g.intercept = self.intercept;
        if let Some(v) = self.offset_variance {
            g.offset_variance = v;
        }
        Ok(g)
    }
}

/// Sampling distribution of one input in a truth file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputConfig {
    Uniform { lo: f64, hi: f64 },
    VonMises { kappa: f64, centers: Vec<f64> },
    Position,
}

/// Generating model for `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub formula: String,
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispersion: Option<f64>,
    #[serde(default = "one")]
    pub rows_per_obs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Registered function name of every function in the formula.
    pub truths: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, InputConfig>,
}

fn one() -> usize {
    1
}

impl TruthConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut table = read_table(path)?;
        apply_overrides(&mut table, overrides)?;
        table.try_into().map_err(|e: toml::de::Error| GumError::Config(e.to_string()))
    }

    pub fn to_spec(&self) -> Result<TruthSpec> {
        let family = match self.family {
            Family::Gaussian => ObservationModel::gaussian(self.dispersion.unwrap_or(1.0))?,
            Family::Poisson => ObservationModel::Poisson,
            Family::Bernoulli => ObservationModel::Bernoulli,
        };
        let truths = self
            .truths
            .iter()
            .map(|(n, f)| Ok((n.clone(), f.parse::<FixedFn>().map_err(GumError::Config)?)))
            .collect::<Result<Vec<_>>>()?;
        let inputs = self
            .inputs
            .iter()
            .map(|(name, dist)| {
                let dist = match dist {
                    InputConfig::Uniform { lo, hi } if lo < hi => InputDist::Uniform { lo: *lo, hi: *hi },
                    InputConfig::Uniform { .. } => return Err(GumError::Config(format!("input `{name}`: empty uniform range"))),
                    InputConfig::VonMises { kappa, centers } if *kappa >= 0.0 && !centers.is_empty() => InputDist::VonMises {
                        kappa: *kappa,
                        centers: centers.clone(),
                    },
                    InputConfig::VonMises { .. } => {
                        return Err(GumError::Config(format!("input `{name}`: von Mises needs kappa ≥ 0 and at least one center")))
                    }
                    InputConfig::Position => InputDist::Position,
                };
                Ok(InputSpec { name: name.clone(), dist })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = TruthSpec {
            formula: self.formula.clone(),
            truths,
            inputs,
            rows_per_obs: self.rows_per_obs.max(1),
            family,
            seed: self.seed,
        };
        let g = spec.graph()?;
        for v in g.variables() {
            if !spec.inputs.iter().any(|i| i.name == v) {
                return Err(GumError::Config(format!("variable `{v}` has no input distribution")));
            }
        }
        Ok(spec)
    }
}
