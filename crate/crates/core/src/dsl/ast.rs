use serde::{Deserialize, Serialize};

/// Parsed predictor formula: a sum of blocks, each a product of factors,
/// each a sum of function terms.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelAst {
    pub blocks: Vec<BlockNode>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockNode {
    pub factors: Vec<FactorNode>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorNode {
    pub terms: Vec<TermNode>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermNode {
    pub func: String,
    pub vars: Vec<String>,
}

impl TermNode {
    pub fn new(func: impl Into<String>, vars: &[&str]) -> Self {
        TermNode {
            func: func.into(),
            vars: vars.iter().map(|v| v.to_string()).collect(),
        }
    }
}

impl ModelAst {
    /// Every term in formula order, with its (block, factor) position.
    pub fn terms(&self) -> impl Iterator<Item = (usize, usize, &TermNode)> {
        self.blocks.iter().enumerate().flat_map(|(c, b)| {
            b.factors
                .iter()
                .enumerate()
                .flat_map(move |(d, f)| f.terms.iter().map(move |t| (c, d, t)))
        })
    }

    /// Distinct variable names in order of first appearance.
    pub fn variables(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (_, _, t) in self.terms() {
            for v in &t.vars {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
        }
        out
    }

    /// Distinct function names in order of first appearance.
    pub fn function_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (_, _, t) in self.terms() {
            if !out.contains(&t.func) {
                out.push(t.func.clone());
            }
        }
        out
    }
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}
