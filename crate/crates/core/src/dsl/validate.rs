use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ast::ModelAst;
use crate::model::fixed::FixedFn;
use crate::model::graph::{
    assign_constraints, Block, Factor, FunctionDecl, FunctionKind, FunctionSpec, ModelGraph,
    Offset, Term, OFFSET_PRIOR_VARIANCE,
};
use crate::model::constraint::ConstraintKind;

#[derive(Clone, Debug, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ValidationError {
    #[error("function `{name}` is not declared")]
    UndeclaredFunction { name: String },

    #[error("function `{name}` takes {expected} variable(s) but is called with {found}")]
    ArityMismatch {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("function `{name}` appears in two factors of block {block}; blockwise updates need each factor's parameters to be disjoint")]
    SameFunctionInSiblingFactors { name: String, block: usize },

    #[error("function `{name}` is unsupported: {reason}")]
    Unsupported { name: String, reason: String },

    #[error("constraint override on `{name}` conflicts with the offset rules: {reason}")]
    ConflictingOverride { name: String, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum ValidationWarning {
    /// A factor made only of fixed zero functions makes its whole block vanish.
    NullFactor { block: usize, factor: usize },
}

impl std::fmt::Display for ValidationWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ValidationWarning::NullFactor { block, factor } => {
                write!(f, "factor {factor} of block {block} is identically zero, so the whole block vanishes")
            }
        }
    }
}

/// Checks a parsed formula against its function declarations and builds the
/// model graph with offsets and constraints assigned. All problems found are
/// returned together.
pub fn validate(ast: &ModelAst, decls: &[FunctionDecl]) -> Result<ModelGraph, Vec<ValidationError>> {
    let mut errors = Vec::new();
    let names = ast.function_names();
    let mut functions = Vec::new();
    for name in &names {
        match decls.iter().find(|d| &d.name == name) {
            Some(d) => functions.push(FunctionSpec {
                decl: d.clone(),
                constraint: ConstraintKind::None,
            }),
            None => errors.push(ValidationError::UndeclaredFunction { name: name.clone() }),
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }

    for spec in &functions {
        let d = &spec.decl;
        let unsupported = |reason: &str| ValidationError::Unsupported {
            name: d.name.clone(),
            reason: reason.to_string(),
        };
        match &d.kind {
            FunctionKind::Gp { kernel } => {
                if d.arity != 1 {
                    errors.push(unsupported("Gaussian-process functions of more than one variable need a multi-dimensional kernel"));
                }
                if kernel.validate().is_err() {
                    errors.push(unsupported("kernel hyperparameters must be finite and positive"));
                }
                if d.bins == Some(0) {
                    errors.push(unsupported("bin count must be positive"));
                }
            }
            FunctionKind::Linear { variance } => {
                if !(variance.is_finite() && *variance > 0.0) || d.arity == 0 {
                    errors.push(unsupported("linear prior variance must be positive and arity at least one"));
                }
            }
            FunctionKind::Fixed { .. } => {
                if d.arity != 1 {
                    errors.push(unsupported("fixed functions take exactly one variable"));
                }
            }
        }
    }

    let index = |name: &str| names.iter().position(|n| n == name).unwrap();
    let mut blocks = Vec::new();
    for (c, b) in ast.blocks.iter().enumerate() {
        let mut factors = Vec::new();
        let mut owner: Vec<(usize, usize)> = Vec::new();
        for (d, f) in b.factors.iter().enumerate() {
            let mut terms = Vec::new();
            for t in &f.terms {
                let k = index(&t.func);
                let decl = &functions[k].decl;
                if t.vars.len() != decl.arity {
                    errors.push(ValidationError::ArityMismatch {
                        name: t.func.clone(),
                        expected: decl.arity,
                        found: t.vars.len(),
                    });
                }
                match owner.iter().find(|(kk, _)| *kk == k) {
                    Some(&(_, dd)) if dd != d => {
                        let e = ValidationError::SameFunctionInSiblingFactors {
                            name: t.func.clone(),
                            block: c,
                        };
                        if !errors.contains(&e) {
                            errors.push(e);
                        }
                    }
                    Some(_) => {}
                    None => owner.push((k, d)),
                }
                terms.push(Term {
                    func: k,
                    vars: t.vars.clone(),
                });
            }
            factors.push(Factor {
                terms,
                offset: Offset::FixedZero,
            });
        }
        blocks.push(Block { factors });
    }

    let mut warnings = Vec::new();
    for (c, b) in blocks.iter().enumerate() {
        for (d, f) in b.factors.iter().enumerate() {
            let null = f.terms.iter().all(|t| {
                matches!(
                    functions[t.func].decl.kind,
                    FunctionKind::Fixed {
                        func: FixedFn::Zero
                    }
                )
            });
            if null {
                log::warn!("factor {d} of block {c} is identically zero");
                warnings.push(ValidationWarning::NullFactor { block: c, factor: d });
            }
        }
    }

    let mut graph = ModelGraph {
        ast: ast.clone(),
        functions,
        blocks,
        intercept: true,
        offset_variance: OFFSET_PRIOR_VARIANCE,
        warnings,
    };
    if let Err(mut e) = assign_constraints(&mut graph) {
        errors.append(&mut e);
    }
    if errors.is_empty() {
        Ok(graph)
    } else {
        Err(errors)
    }
}
