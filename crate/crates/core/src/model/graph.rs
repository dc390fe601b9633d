//! Validated model structure: blocks of factors of function terms, with the
//! offset and constraint assignment that makes the predictor identifiable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::constraint::ConstraintKind;
use super::fixed::FixedFn;
use crate::dsl::{ModelAst, ValidationError, ValidationWarning};
use crate::kernels::KernelSpec;

/// Default prior variance of every free offset.
pub const OFFSET_PRIOR_VARIANCE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionKind {
    Gp { kernel: KernelSpec },
    /// f(x) = wᵀx with w ~ N(0, variance·I).
    Linear { variance: f64 },
    Fixed { func: FixedFn },
}

/// User-facing declaration of a function appearing in a formula.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionDecl {
    pub name: String,
    pub kind: FunctionKind,
    #[serde(default = "one")]
    pub arity: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<ConstraintKind>,
    /// Snap inputs to this many equal-width bins before building the grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
}

fn one() -> usize {
    1
}

impl FunctionDecl {
    pub fn gp(name: &str, kernel: KernelSpec) -> Self {
        FunctionDecl {
            name: name.to_string(),
            kind: FunctionKind::Gp { kernel },
            arity: 1,
            constraint: None,
            bins: None,
        }
    }

    pub fn linear(name: &str, variance: f64) -> Self {
        FunctionDecl {
            name: name.to_string(),
            kind: FunctionKind::Linear { variance },
            arity: 1,
            constraint: None,
            bins: None,
        }
    }

    pub fn fixed(name: &str, func: FixedFn) -> Self {
        FunctionDecl {
            name: name.to_string(),
            kind: FunctionKind::Fixed { func },
            arity: 1,
            constraint: None,
            bins: None,
        }
    }

    pub fn with_constraint(mut self, c: ConstraintKind) -> Self {
        self.constraint = Some(c);
        self
    }

    pub fn with_arity(mut self, arity: usize) -> Self {
        self.arity = arity;
        self
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self.kind, FunctionKind::Fixed { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Offset {
    Free,
    FixedZero,
    FixedOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub decl: FunctionDecl,
    /// Effective constraint after defaults and overrides.
    pub constraint: ConstraintKind,
}

impl FunctionSpec {
    pub fn name(&self) -> &str {
        &self.decl.name
    }

    pub fn kind(&self) -> &FunctionKind {
        &self.decl.kind
    }

    pub fn is_fixed(&self) -> bool {
        self.decl.is_fixed()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub func: usize,
    pub vars: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub terms: Vec<Term>,
    pub offset: Offset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub factors: Vec<Factor>,
}

impl Block {
    pub fn dim(&self) -> usize {
        self.factors.len()
    }

    pub fn is_additive(&self) -> bool {
        self.factors.len() == 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub ast: ModelAst,
    pub functions: Vec<FunctionSpec>,
    pub blocks: Vec<Block>,
    /// Whether the global offset c₀ is present.
    pub intercept: bool,
    pub offset_variance: f64,
    pub warnings: Vec<ValidationWarning>,
}

impl ModelGraph {
    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name() == name)
    }

    pub fn max_dim(&self) -> usize {
        self.blocks.iter().map(Block::dim).max().unwrap_or(1)
    }

    /// (block, factor) positions of every free offset, in layout order.
    pub fn free_offsets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (c, b) in self.blocks.iter().enumerate() {
            for (d, f) in b.factors.iter().enumerate() {
                if f.offset == Offset::Free {
                    out.push((c, d));
                }
            }
        }
        out
    }

    /// Positions (block, factor) where function `k` appears, deduplicated.
    pub fn occurrences(&self, k: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (c, b) in self.blocks.iter().enumerate() {
            for (d, f) in b.factors.iter().enumerate() {
                if f.terms.iter().any(|t| t.func == k) && !out.contains(&(c, d)) {
                    out.push((c, d));
                }
            }
        }
        out
    }

    pub fn variables(&self) -> Vec<String> {
        self.ast.variables()
    }

    pub fn all_additive(&self) -> bool {
        self.blocks.iter().all(Block::is_additive)
    }

    /// Factors whose scale is not pinned by an offset or a fixed/scale-fixing term.
    pub fn scale_free_factors(&self, c: usize) -> Vec<usize> {
        let block = &self.blocks[c];
        if block.is_additive() {
            return Vec::new();
        }
        (0..block.dim())
            .filter(|&d| {
                let f = &block.factors[d];
                match f.offset {
                    Offset::FixedOne => false,
                    Offset::Free => true,
                    Offset::FixedZero => f.terms.iter().all(|t| {
                        let spec = &self.functions[t.func];
                        !spec.is_fixed()
                            && matches!(spec.constraint, ConstraintKind::None | ConstraintKind::FirstZero { .. } | ConstraintKind::MeanZero)
                    }),
                }
            })
            .collect()
    }

    /// Functions that appear anywhere in a multiplicative block.
    fn in_multiplicative(&self) -> Vec<bool> {
        let mut out = vec![false; self.functions.len()];
        for b in self.blocks.iter().filter(|b| !b.is_additive()) {
            for f in &b.factors {
                for t in &f.terms {
                    out[t.func] = true;
                }
            }
        }
        out
    }
}

fn priority(c: &ConstraintKind) -> u8 {
    match c {
        ConstraintKind::FirstZero { .. } => 3,
        ConstraintKind::MeanZero => 2,
        ConstraintKind::None => 1,
        ConstraintKind::MeanOne | ConstraintKind::SumOne => 4,
    }
}

/// Assigns factor offsets and default constraints.
///
/// Multiplicative blocks: a factor holding a fixed function gets a zero offset
/// and unconstrained functions; a factor holding a mean-one or sum-one function
/// gets a zero offset; a factor whose functions are all explicitly unconstrained
/// gets a zero offset. Among the remaining factors the first gets a free offset
/// (or a zero offset when another factor already pins the scale) and the rest a
/// unit offset, with their functions anchored at zero. Additive blocks get zero
/// offsets and mean-zero functions, except one function left unconstrained.
pub fn assign_constraints(graph: &mut ModelGraph) -> Result<(), Vec<ValidationError>> {
    let mut errors = Vec::new();
    let nf = graph.functions.len();
    let mut cand: Vec<Vec<ConstraintKind>> = vec![Vec::new(); nf];
    let overrides: Vec<Option<ConstraintKind>> =
        graph.functions.iter().map(|f| f.decl.constraint.clone()).collect();
    let is_fixed: Vec<bool> = graph.functions.iter().map(FunctionSpec::is_fixed).collect();
    let is_linear: Vec<bool> = graph
        .functions
        .iter()
        .map(|f| matches!(f.decl.kind, FunctionKind::Linear { .. }))
        .collect();
    let in_mult = graph.in_multiplicative();

    for (k, spec) in graph.functions.iter().enumerate() {
        if let Some(o) = &overrides[k] {
            if is_fixed[k] {
                errors.push(ValidationError::ConflictingOverride {
                    name: spec.name().to_string(),
                    reason: "fixed functions have no parameters to constrain".into(),
                });
            } else if is_linear[k] && *o != ConstraintKind::None {
                errors.push(ValidationError::Unsupported {
                    name: spec.name().to_string(),
                    reason: "linear functions only accept the `none` constraint".into(),
                });
            }
        }
    }

    let mut additive_none_taken = false;
    for c in 0..graph.blocks.len() {
        let dim = graph.blocks[c].dim();
        if dim == 1 {
            graph.blocks[c].factors[0].offset = Offset::FixedZero;
            continue;
        }
        let mut anchored = false;
        let mut defaults = Vec::new();
        for d in 0..dim {
            let funcs: Vec<usize> = graph.blocks[c].factors[d].terms.iter().map(|t| t.func).collect();
            let has_fixed = funcs.iter().any(|&k| is_fixed[k]);
            let params: Vec<usize> = funcs.iter().copied().filter(|&k| !is_fixed[k]).collect();
            let fixes_scale = params
                .iter()
                .any(|&k| overrides[k].as_ref().is_some_and(ConstraintKind::fixes_scale));
            let all_none = !params.is_empty()
                && params.iter().all(|&k| overrides[k] == Some(ConstraintKind::None));
            let factor = &mut graph.blocks[c].factors[d];
            if has_fixed {
                factor.offset = Offset::FixedZero;
                anchored = true;
                for &k in &params {
                    match &overrides[k] {
                        Some(o) if *o != ConstraintKind::None => {
                            errors.push(ValidationError::ConflictingOverride {
                                name: graph.functions[k].name().to_string(),
                                reason: format!(
                                    "shares a factor with a fixed function, so it must stay unconstrained (got `{}`)",
                                    o.name()
                                ),
                            });
                        }
                        _ => cand[k].push(ConstraintKind::None),
                    }
                }
            } else if fixes_scale {
                factor.offset = Offset::FixedZero;
                anchored = true;
                for &k in &params {
                    cand[k].push(ConstraintKind::None);
                }
            } else if all_none {
                factor.offset = Offset::FixedZero;
            } else {
                defaults.push(d);
            }
        }
        for (i, &d) in defaults.iter().enumerate() {
            let factor = &mut graph.blocks[c].factors[d];
            let default = if i == 0 && anchored {
                factor.offset = Offset::FixedZero;
                ConstraintKind::None
            } else {
                factor.offset = if i == 0 { Offset::Free } else { Offset::FixedOne };
                ConstraintKind::first_zero()
            };
            for t in &factor.terms {
                let k = t.func;
                if !is_fixed[k] {
                    cand[k].push(if is_linear[k] { ConstraintKind::None } else { default.clone() });
                }
            }
        }
    }

    for b in graph.blocks.iter().filter(|b| b.is_additive()) {
        for t in &b.factors[0].terms {
            let k = t.func;
            if is_fixed[k] || overrides[k].is_some() {
                continue;
            }
            if is_linear[k] {
                cand[k].push(ConstraintKind::None);
            } else if !additive_none_taken && !in_mult[k] {
                additive_none_taken = true;
                cand[k].push(ConstraintKind::None);
            } else if !cand[k].contains(&ConstraintKind::None) || in_mult[k] {
                cand[k].push(ConstraintKind::MeanZero);
            }
        }
    }

    for (k, spec) in graph.functions.iter_mut().enumerate() {
        spec.constraint = if is_fixed[k] {
            ConstraintKind::None
        } else if let Some(o) = &overrides[k] {
            o.clone()
        } else {
            cand[k]
                .iter()
                .max_by_key(|c| priority(c))
                .cloned()
                .unwrap_or(ConstraintKind::None)
        };
    }

    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

/// Name → effective constraint, for display.
pub fn constraint_table(graph: &ModelGraph) -> BTreeMap<String, String> {
    graph
        .functions
        .iter()
        .map(|f| (f.name().to_string(), f.constraint.name().to_string()))
        .collect()
}
