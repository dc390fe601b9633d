//! Predictor evaluation ρ = Σ_c Π_d (Σ_l f(x) + c_cd) + c₀ and its derivatives.

use nalgebra::{DMatrix, DVector};

use super::design::{Design, TermData};
use super::graph::ModelGraph;
use super::params::{Layout, ParameterState};

/// A set of parameter groups updated together: whole functions and offset slots.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamSet {
    pub funcs: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl ParamSet {
    /// Every function and offset.
    pub fn all(design: &Design) -> Self {
        ParamSet {
            funcs: (0..design.functions.len())
                .filter(|&k| design.functions[k].projection.is_some())
                .collect(),
            offsets: (0..design.n_offsets).collect(),
        }
    }

    pub fn free_dim(&self, layout: &Layout) -> usize {
        self.funcs.iter().map(|&k| layout.free_dim[k]).sum::<usize>() + self.offsets.len()
    }

    /// Indices of this set's columns inside the full free vector U.
    pub fn free_indices(&self, layout: &Layout) -> Vec<usize> {
        let mut out = Vec::new();
        for &k in &self.funcs {
            out.extend(layout.free_off[k]..layout.free_off[k] + layout.free_dim[k]);
        }
        out.extend(self.offsets.iter().map(|&i| layout.free_offsets_at + i));
        out
    }
}

/// Value of one term at one row.
#[inline]
pub fn term_value(state: &ParameterState, data: &TermData, func: usize, row: usize) -> f64 {
    match data {
        TermData::Index(ix) => state.f[func][ix[row]],
        TermData::Values(v) => {
            let w = &state.f[func];
            let a = w.len();
            (0..a).map(|j| w[j] * v[row * a + j]).sum()
        }
        TermData::Fixed(_) => 0.0,
    }
}

/// Factor values F_cd at every row, indexed `[c][d][row]`.
pub fn factor_values(state: &ParameterState, design: &Design) -> Vec<Vec<Vec<f64>>> {
    design
        .blocks
        .iter()
        .map(|factors| {
            factors
                .iter()
                .map(|f| {
                    let off = f.free_offset.map_or(0.0, |s| state.offsets[s]);
                    (0..design.n_rows)
                        .map(|r| {
                            f.constant[r]
                                + off
                                + f.terms
                                    .iter()
                                    .map(|t| term_value(state, &t.data, t.func, r))
                                    .sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn product_except(fv: &[Vec<f64>], skip: &[usize], row: usize) -> f64 {
    fv.iter()
        .enumerate()
        .filter(|(d, _)| !skip.contains(d))
        .map(|(_, v)| v[row])
        .product()
}

/// Predictor per observation.
pub fn predictor(state: &ParameterState, design: &Design) -> DVector<f64> {
    predictor_from_factors(&factor_values(state, design), state, design)
}

pub fn predictor_from_factors(fv: &[Vec<Vec<f64>>], state: &ParameterState, design: &Design) -> DVector<f64> {
    let c0 = design.intercept_slot().map_or(0.0, |s| state.offsets[s]);
    let mut rho = DVector::from_element(design.n_obs, c0);
    for r in 0..design.n_rows {
        let mut v = 0.0;
        for block in fv {
            v += block.iter().map(|f| f[r]).product::<f64>();
        }
        rho[design.row_obs[r]] += v;
    }
    rho
}

/// Accumulates `scale · ∂F_cd(row)/∂θ` into `out` (θ-space vector).
fn add_factor_grad(design: &Design, layout: &Layout, state: &ParameterState, c: usize, d: usize, row: usize, scale: f64, out: &mut [f64]) {
    let f = &design.blocks[c][d];
    for t in &f.terms {
        let base = layout.theta_off[t.func];
        match &t.data {
            TermData::Index(ix) => out[base + ix[row]] += scale,
            TermData::Values(v) => {
                let a = state.f[t.func].len();
                for j in 0..a {
                    out[base + j] += scale * v[row * a + j];
                }
            }
            TermData::Fixed(_) => {}
        }
    }
    if let Some(s) = f.free_offset {
        out[layout.theta_offsets_at + s] += scale;
    }
}

/// Σ_o w_o ∂ρ_o/∂θ over all θ coordinates.
pub fn backprop(state: &ParameterState, design: &Design, layout: &Layout, fv: &[Vec<Vec<f64>>], w: &[f64]) -> DVector<f64> {
    let mut g = vec![0.0; layout.n_theta()];
    for r in 0..design.n_rows {
        let wo = w[design.row_obs[r]];
        if wo == 0.0 {
            continue;
        }
        for (c, block) in fv.iter().enumerate() {
            for d in 0..block.len() {
                let p = product_except(block, &[d], r);
                if p != 0.0 {
                    add_factor_grad(design, layout, state, c, d, r, wo * p, &mut g);
                }
            }
        }
    }
    if let Some(s) = design.intercept_slot() {
        g[layout.theta_offsets_at + s] = w.iter().sum();
    }
    DVector::from_vec(g)
}

/// Dense ∂ρ/∂θ (n_obs × n_theta).
pub fn jacobian_theta(state: &ParameterState, design: &Design, layout: &Layout, fv: &[Vec<Vec<f64>>]) -> DMatrix<f64> {
    let n = layout.n_theta();
    let mut j = DMatrix::zeros(design.n_obs, n);
    let mut buf = vec![0.0; n];
    for r in 0..design.n_rows {
        buf.iter_mut().for_each(|b| *b = 0.0);
        for (c, block) in fv.iter().enumerate() {
            for d in 0..block.len() {
                let p = product_except(block, &[d], r);
                if p != 0.0 {
                    add_factor_grad(design, layout, state, c, d, r, p, &mut buf);
                }
            }
        }
        let o = design.row_obs[r];
        for (i, b) in buf.iter().enumerate() {
            if *b != 0.0 {
                j[(o, i)] += b;
            }
        }
    }
    if let Some(s) = design.intercept_slot() {
        j.column_mut(layout.theta_offsets_at + s).fill(1.0);
    }
    j
}

/// Converts θ-space Jacobian columns of `set` into free coordinates (n_obs × set dim).
pub fn to_free_columns(j_theta: &DMatrix<f64>, design: &Design, layout: &Layout, set: &ParamSet) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(j_theta.nrows(), set.free_dim(layout));
    let mut col = 0;
    for &k in &set.funcs {
        let pr = design.functions[k].projection.as_ref().expect("parameterised function");
        let jk = j_theta.columns(layout.theta_off[k], layout.theta_dim[k]);
        let dk = layout.free_dim[k];
        if dk > 0 {
            if pr.is_none() {
                out.columns_mut(col, dk).copy_from(&jk);
            } else {
                out.columns_mut(col, dk).copy_from(&(jk * pr.p_mat.transpose()));
            }
        }
        col += dk;
    }
    for &s in &set.offsets {
        out.column_mut(col).copy_from(&j_theta.column(layout.theta_offsets_at + s));
        col += 1;
    }
    out
}

/// Σ_o w_o ∂²ρ_o/∂θ∂θᵀ: couplings between parameters in different factors of a block.
pub fn second_derivative_theta(state: &ParameterState, design: &Design, layout: &Layout, fv: &[Vec<Vec<f64>>], w: &[f64]) -> DMatrix<f64> {
    let n = layout.n_theta();
    let mut t = DMatrix::zeros(n, n);
    let mut ga = vec![0.0; n];
    let mut gb = vec![0.0; n];
    for r in 0..design.n_rows {
        let wo = w[design.row_obs[r]];
        if wo == 0.0 {
            continue;
        }
        for (c, block) in fv.iter().enumerate() {
            let dim = block.len();
            for d in 0..dim {
                for e in (d + 1)..dim {
                    let p = product_except(block, &[d, e], r);
                    if p == 0.0 {
                        continue;
                    }
                    ga.iter_mut().for_each(|x| *x = 0.0);
                    gb.iter_mut().for_each(|x| *x = 0.0);
                    add_factor_grad(design, layout, state, c, d, r, 1.0, &mut ga);
                    add_factor_grad(design, layout, state, c, e, r, 1.0, &mut gb);
                    let s = wo * p;
                    let nz_a: Vec<usize> = (0..n).filter(|&i| ga[i] != 0.0).collect();
                    let nz_b: Vec<usize> = (0..n).filter(|&i| gb[i] != 0.0).collect();
                    for &i in &nz_a {
                        for &j in &nz_b {
                            let v = s * ga[i] * gb[j];
                            t[(i, j)] += v;
                            t[(j, i)] += v;
                        }
                    }
                }
            }
        }
    }
    t
}

/// Functions and offsets updated together when factor `choice[c]` of every block
/// is chosen. Functions that also appear in a non-chosen factor are left out.
pub fn chosen_set(graph: &ModelGraph, design: &Design, choice: &[usize]) -> ParamSet {
    let mut funcs = Vec::new();
    let mut offsets = Vec::new();
    for (c, b) in graph.blocks.iter().enumerate() {
        let d = choice[c];
        for t in &b.factors[d].terms {
            if design.functions[t.func].projection.is_some() && !funcs.contains(&t.func) {
                funcs.push(t.func);
            }
        }
        if let Some(s) = design.blocks[c][d].free_offset {
            offsets.push(s);
        }
    }
    funcs.retain(|&k| {
        graph.occurrences(k).iter().all(|&(c, d)| choice[c] == d)
    });
    funcs.sort_unstable();
    if let Some(s) = design.intercept_slot() {
        offsets.push(s);
    }
    ParamSet { funcs, offsets }
}

/// Affine form ρ = Φ̃ U_S + C in the free coordinates of `set`, others held fixed.
pub struct Collapsed {
    pub phi: DMatrix<f64>,
    pub c: DVector<f64>,
    pub u: DVector<f64>,
}

pub fn collapse(state: &ParameterState, design: &Design, layout: &Layout, set: &ParamSet) -> Collapsed {
    let fv = factor_values(state, design);
    let jt = jacobian_theta(state, design, layout, &fv);
    let phi = to_free_columns(&jt, design, layout, set);
    let u_all = state.to_free(design, layout);
    let idx = set.free_indices(layout);
    let u = DVector::from_iterator(idx.len(), idx.iter().map(|&i| u_all[i]));
    let rho = predictor_from_factors(&fv, state, design);
    let c = &rho - &phi * &u;
    Collapsed { phi, c, u }
}

/// Writes free coordinates of `set` back into a state.
pub fn set_free(state: &ParameterState, design: &Design, layout: &Layout, set: &ParamSet, u_set: &DVector<f64>) -> ParameterState {
    let mut u_all = state.to_free(design, layout);
    for (i, &j) in set.free_indices(layout).iter().enumerate() {
        u_all[j] = u_set[i];
    }
    ParameterState::from_free(&u_all, design, layout)
}
