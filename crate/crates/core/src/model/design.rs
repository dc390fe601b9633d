//! Design construction: unique-value grids, per-term row maps and fixed contributions.

use serde::{Deserialize, Serialize};

use super::constraint::{ConstraintKind, Projection};
use super::data::Dataset;
use super::graph::{FunctionKind, ModelGraph, Offset};
use crate::error::{GumError, Result};

/// Where a function's parameters live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Support {
    /// Values of the function at a sorted grid of unique inputs.
    Grid(Vec<f64>),
    /// Weights of a linear map of this many inputs.
    Weights(usize),
    /// No parameters.
    Fixed,
}

#[derive(Clone, Debug)]
pub struct FunctionDesign {
    pub support: Support,
    pub projection: Option<Projection>,
}

impl FunctionDesign {
    pub fn dim(&self) -> usize {
        match &self.support {
            Support::Grid(x) => x.len(),
            Support::Weights(a) => *a,
            Support::Fixed => 0,
        }
    }

    pub fn free_dim(&self) -> usize {
        self.projection.as_ref().map_or(0, Projection::free_dim)
    }

    pub fn grid(&self) -> Option<&[f64]> {
        match &self.support {
            Support::Grid(x) => Some(x),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum TermData {
    /// Grid index per row (one-hot design).
    Index(Vec<usize>),
    /// Raw regressor values per row (linear design), row-major `n_rows × arity`.
    Values(Vec<f64>),
    /// Already-evaluated fixed function values per row.
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct TermDesign {
    pub func: usize,
    pub data: TermData,
}

#[derive(Clone, Debug)]
pub struct FactorDesign {
    pub terms: Vec<TermDesign>,
    /// Sum of fixed terms and a unit offset when the offset is fixed at one.
    pub constant: Vec<f64>,
    /// Slot of the free offset in the offset vector, if any.
    pub free_offset: Option<usize>,
}

/// All per-row information the predictor needs, for one dataset.
#[derive(Clone, Debug)]
pub struct Design {
    pub n_obs: usize,
    pub n_rows: usize,
    pub row_obs: Vec<usize>,
    pub y: Vec<f64>,
    pub functions: Vec<FunctionDesign>,
    pub blocks: Vec<Vec<FactorDesign>>,
    /// Number of free offsets (factor offsets followed by c₀ when present).
    pub n_offsets: usize,
    pub intercept: bool,
}

fn snap_to_bins(values: &[f64], bins: usize) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) || bins < 2 {
        return values.to_vec();
    }
    let w = (hi - lo) / bins as f64;
    values
        .iter()
        .map(|&v| {
            let b = (((v - lo) / w) as usize).min(bins - 1);
            lo + (b as f64 + 0.5) * w
        })
        .collect()
}

fn grid_index(grid: &[f64], v: f64) -> usize {
    grid.binary_search_by(|g| g.total_cmp(&v))
        .expect("value present in its own grid")
}

/// Index of the grid point nearest to `x`.
pub fn nearest_index(grid: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (i, g) in grid.iter().enumerate() {
        if (g - x).abs() < (grid[best] - x).abs() {
            best = i;
        }
    }
    best
}

impl Design {
    /// Builds grids, row maps and constraint projections for `graph` on `data`.
    pub fn build(graph: &ModelGraph, data: &Dataset) -> Result<Design> {
        let n_rows = data.n_rows();
        // Inputs of every function, possibly binned.
        let mut inputs: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut functions = Vec::new();
        for (k, spec) in graph.functions.iter().enumerate() {
            let mut per_term = Vec::new();
            for b in &graph.blocks {
                for f in &b.factors {
                    for t in f.terms.iter().filter(|t| t.func == k) {
                        let mut cols = Vec::new();
                        for v in &t.vars {
                            cols.push(data.finite_column(v)?.to_vec());
                        }
                        per_term.push(cols);
                    }
                }
            }
            let support = match &spec.decl.kind {
                FunctionKind::Gp { .. } => {
                    let mut all: Vec<f64> = per_term.iter().flat_map(|c| c[0].iter().copied()).collect();
                    if let Some(bins) = spec.decl.bins {
                        let snapped = snap_to_bins(&all, bins);
                        let lo_hi = (
                            all.iter().copied().fold(f64::INFINITY, f64::min),
                            all.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        );
                        for cols in per_term.iter_mut() {
                            let mut joined = cols[0].clone();
                            joined.push(lo_hi.0);
                            joined.push(lo_hi.1);
                            let s = snap_to_bins(&joined, bins);
                            cols[0] = s[..s.len() - 2].to_vec();
                        }
                        all = snapped;
                    }
                    all.sort_by(f64::total_cmp);
                    all.dedup();
                    if all.is_empty() {
                        return Err(GumError::InvalidInput(format!(
                            "function `{}` has no observed inputs",
                            spec.name()
                        )));
                    }
                    Support::Grid(all)
                }
                FunctionKind::Linear { .. } => Support::Weights(spec.decl.arity),
                FunctionKind::Fixed { .. } => Support::Fixed,
            };
            let projection = match &support {
                Support::Grid(g) => {
                    let anchor = match &spec.constraint {
                        ConstraintKind::FirstZero { anchor: Some(a) } => nearest_index(g, *a),
                        _ => 0,
                    };
                    Some(Projection::new(&spec.constraint, g.len(), anchor))
                }
                Support::Weights(a) => Some(Projection::new(&ConstraintKind::None, *a, 0)),
                Support::Fixed => None,
            };
            functions.push(FunctionDesign { support, projection });
            inputs.push(per_term.into_iter().flatten().collect());
        }

        let mut seen = vec![0usize; graph.functions.len()];
        let mut blocks = Vec::new();
        let mut slot = 0;
        for b in &graph.blocks {
            let mut factors = Vec::new();
            for f in &b.factors {
                let mut constant = vec![if f.offset == Offset::FixedOne { 1.0 } else { 0.0 }; n_rows];
                let mut terms = Vec::new();
                for t in &f.terms {
                    let k = t.func;
                    let arity = t.vars.len();
                    let cols = &inputs[k][seen[k]..seen[k] + arity];
                    seen[k] += arity;
                    let data = match (&graph.functions[k].decl.kind, &functions[k].support) {
                        (FunctionKind::Gp { .. }, Support::Grid(g)) => {
                            TermData::Index(cols[0].iter().map(|&v| grid_index(g, v)).collect())
                        }
                        (FunctionKind::Linear { .. }, _) => {
                            let mut vals = Vec::with_capacity(n_rows * arity);
                            for r in 0..n_rows {
                                for c in cols {
                                    vals.push(c[r]);
                                }
                            }
                            TermData::Values(vals)
                        }
                        (FunctionKind::Fixed { func }, _) => {
                            let vals: Vec<f64> = cols[0].iter().map(|&x| func.eval(x)).collect();
                            for (c, v) in constant.iter_mut().zip(&vals) {
                                *c += v;
                            }
                            TermData::Fixed(vals)
                        }
                        _ => unreachable!("support matches kind"),
                    };
                    terms.push(TermDesign { func: k, data });
                }
                let free_offset = if f.offset == Offset::Free {
                    slot += 1;
                    Some(slot - 1)
                } else {
                    None
                };
                factors.push(FactorDesign {
                    terms,
                    constant,
                    free_offset,
                });
            }
            blocks.push(factors);
        }
        let n_offsets = slot + usize::from(graph.intercept);
        Ok(Design {
            n_obs: data.n_obs(),
            n_rows,
            row_obs: data.row_obs(),
            y: data.response.clone(),
            functions,
            blocks,
            n_offsets,
            intercept: graph.intercept,
        })
    }

    /// Restriction to the listed observations, keeping grids and projections.
    pub fn subset(&self, obs: &[usize]) -> Design {
        let mut new_index = vec![usize::MAX; self.n_obs];
        for (i, &o) in obs.iter().enumerate() {
            new_index[o] = i;
        }
        let mut rows: Vec<usize> = (0..self.n_rows)
            .filter(|&r| new_index[self.row_obs[r]] != usize::MAX)
            .collect();
        rows.sort_by_key(|&r| (new_index[self.row_obs[r]], r));
        let pick = |v: &[f64]| rows.iter().map(|&r| v[r]).collect::<Vec<f64>>();
        let blocks = self
            .blocks
            .iter()
            .map(|factors| {
                factors
                    .iter()
                    .map(|f| FactorDesign {
                        constant: pick(&f.constant),
                        free_offset: f.free_offset,
                        terms: f
                            .terms
                            .iter()
                            .map(|t| TermDesign {
                                func: t.func,
                                data: match &t.data {
                                    TermData::Index(ix) => TermData::Index(rows.iter().map(|&r| ix[r]).collect()),
                                    TermData::Fixed(v) => TermData::Fixed(pick(v)),
                                    TermData::Values(v) => {
                                        let a = v.len() / self.n_rows.max(1);
                                        TermData::Values(
                                            rows.iter().flat_map(|&r| v[r * a..(r + 1) * a].iter().copied()).collect(),
                                        )
                                    }
                                },
                            })
                            .collect(),
                    })
                    .collect()
            })
            .collect();
        Design {
            n_obs: obs.len(),
            n_rows: rows.len(),
            row_obs: rows.iter().map(|&r| new_index[self.row_obs[r]]).collect(),
            y: obs.iter().map(|&o| self.y[o]).collect(),
            functions: self.functions.clone(),
            blocks,
            n_offsets: self.n_offsets,
            intercept: self.intercept,
        }
    }

    pub fn intercept_slot(&self) -> Option<usize> {
        self.intercept.then(|| self.n_offsets - 1)
    }

    /// Observations of every row, grouped: `obs_rows()[o]` lists the rows of observation `o`.
    pub fn obs_rows(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_obs];
        for (r, &o) in self.row_obs.iter().enumerate() {
            out[o].push(r);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{parse, validate};
    use crate::kernels::KernelSpec;
    use crate::model::fixed::FixedFn;
    use crate::model::graph::FunctionDecl;

    #[test]
    fn one_hot_grid() {
        let g = validate(&parse("f(x)").unwrap(), &[FunctionDecl::gp("f", KernelSpec::squared_exp(1.0, 1.0))]).unwrap();
        let data = Dataset::new(vec!["x".into()], vec![vec![0.3, 0.1, 0.3]], vec![0.0; 3]).unwrap();
        let d = Design::build(&g, &data).unwrap();
        assert_eq!(d.functions[0].support, Support::Grid(vec![0.1, 0.3]));
        match &d.blocks[0][0].terms[0].data {
            TermData::Index(ix) => assert_eq!(ix, &vec![1, 0, 1]),
            _ => panic!(),
        }
    }

    #[test]
    fn linear_and_fixed_terms() {
        let g = validate(
            &parse("lin(x) + h(z)*f(x)").unwrap(),
            &[
                FunctionDecl::linear("lin", 1.0),
                FunctionDecl::fixed("h", FixedFn::Cos),
                FunctionDecl::gp("f", KernelSpec::squared_exp(1.0, 1.0)),
            ],
        )
        .unwrap();
        let data = Dataset::new(
            vec!["x".into(), "z".into()],
            vec![vec![0.5, -1.0], vec![0.0, 0.0]],
            vec![0.0; 2],
        )
        .unwrap();
        let d = Design::build(&g, &data).unwrap();
        match &d.blocks[0][0].terms[0].data {
            TermData::Values(v) => assert_eq!(v, &vec![0.5, -1.0]),
            _ => panic!(),
        }
        assert_eq!(d.blocks[1][0].constant, vec![1.0, 1.0]);
    }

    #[test]
    fn missing_variable() {
        let g = validate(&parse("f(q)").unwrap(), &[FunctionDecl::gp("f", KernelSpec::squared_exp(1.0, 1.0))]).unwrap();
        let data = Dataset::new(vec!["x".into()], vec![vec![0.3]], vec![0.0]).unwrap();
        assert!(matches!(Design::build(&g, &data), Err(GumError::MissingVariable(_))));
    }

    #[test]
    fn bins_snap_inputs() {
        let mut decl = FunctionDecl::gp("f", KernelSpec::squared_exp(1.0, 1.0));
        decl.bins = Some(4);
        let g = validate(&parse("f(x)").unwrap(), &[decl]).unwrap();
        let xs: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        let data = Dataset::new(vec!["x".into()], vec![xs], vec![0.0; 101]).unwrap();
        let d = Design::build(&g, &data).unwrap();
        assert_eq!(d.functions[0].dim(), 4);
    }
}
