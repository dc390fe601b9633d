//! Parameter vectors: constrained function values θ and free coordinates U.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::design::{Design, Support};
use super::graph::{FunctionKind, ModelGraph};
use crate::error::Result;
use crate::linalg::{block_diag, Chol};

/// Function values on their supports plus free offsets (factor offsets, then c₀).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub f: Vec<DVector<f64>>,
    pub offsets: Vec<f64>,
}

/// Positions of every function and offset in the stacked θ and U vectors.
#[derive(Clone, Debug)]
pub struct Layout {
    pub theta_off: Vec<usize>,
    pub theta_dim: Vec<usize>,
    pub free_off: Vec<usize>,
    pub free_dim: Vec<usize>,
    pub n_offsets: usize,
    pub theta_offsets_at: usize,
    pub free_offsets_at: usize,
}

impl Layout {
    pub fn new(design: &Design) -> Self {
        let mut theta_off = Vec::new();
        let mut theta_dim = Vec::new();
        let mut free_off = Vec::new();
        let mut free_dim = Vec::new();
        let (mut t, mut u) = (0, 0);
        for f in &design.functions {
            theta_off.push(t);
            free_off.push(u);
            theta_dim.push(f.dim());
            free_dim.push(f.free_dim());
            t += f.dim();
            u += f.free_dim();
        }
        Layout {
            theta_off,
            theta_dim,
            free_off,
            free_dim,
            n_offsets: design.n_offsets,
            theta_offsets_at: t,
            free_offsets_at: u,
        }
    }

    pub fn n_theta(&self) -> usize {
        self.theta_offsets_at + self.n_offsets
    }

    pub fn n_free(&self) -> usize {
        self.free_offsets_at + self.n_offsets
    }

    pub fn n_functions(&self) -> usize {
        self.theta_dim.len()
    }
}

impl ParameterState {
    pub fn zeros(design: &Design) -> Self {
        ParameterState {
            f: design
                .functions
                .iter()
                .map(|fd| match &fd.projection {
                    Some(p) => p.base(),
                    None => DVector::zeros(0),
                })
                .collect(),
            offsets: vec![0.0; design.n_offsets],
        }
    }

    /// Free coordinates U = (P₁f₁, …, P_Kf_K, offsets).
    pub fn to_free(&self, design: &Design, layout: &Layout) -> DVector<f64> {
        let mut u = DVector::zeros(layout.n_free());
        for (k, fd) in design.functions.iter().enumerate() {
            if let Some(p) = &fd.projection {
                let uk = p.project(&self.f[k]);
                u.rows_mut(layout.free_off[k], uk.len()).copy_from(&uk);
            }
        }
        for (i, c) in self.offsets.iter().enumerate() {
            u[layout.free_offsets_at + i] = *c;
        }
        u
    }

    pub fn from_free(u: &DVector<f64>, design: &Design, layout: &Layout) -> Self {
        let f = design
            .functions
            .iter()
            .enumerate()
            .map(|(k, fd)| match &fd.projection {
                Some(p) => p.reconstruct(&u.rows(layout.free_off[k], layout.free_dim[k]).into_owned()),
                None => DVector::zeros(0),
            })
            .collect();
        let offsets = (0..layout.n_offsets)
            .map(|i| u[layout.free_offsets_at + i])
            .collect();
        ParameterState { f, offsets }
    }

    /// Stacked θ vector (functions then offsets).
    pub fn to_theta(&self, layout: &Layout) -> DVector<f64> {
        let mut t = DVector::zeros(layout.n_theta());
        for (k, f) in self.f.iter().enumerate() {
            t.rows_mut(layout.theta_off[k], f.len()).copy_from(f);
        }
        for (i, c) in self.offsets.iter().enumerate() {
            t[layout.theta_offsets_at + i] = *c;
        }
        t
    }

    pub fn from_theta(t: &DVector<f64>, layout: &Layout) -> Self {
        ParameterState {
            f: (0..layout.n_functions())
                .map(|k| t.rows(layout.theta_off[k], layout.theta_dim[k]).into_owned())
                .collect(),
            offsets: (0..layout.n_offsets).map(|i| t[layout.theta_offsets_at + i]).collect(),
        }
    }

    /// Largest |pᵀf − l| over constrained functions.
    pub fn max_constraint_residual(&self, design: &Design) -> f64 {
        design
            .functions
            .iter()
            .zip(&self.f)
            .filter_map(|(fd, f)| fd.projection.as_ref().map(|p| p.residual(f)))
            .fold(0.0, f64::max)
    }
}

/// Full P (n_free × n_theta): block-diagonal projections and identity on offsets.
pub fn projection_matrix(design: &Design, layout: &Layout) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(layout.n_free(), layout.n_theta());
    for (k, fd) in design.functions.iter().enumerate() {
        if let Some(pr) = &fd.projection {
            p.view_mut((layout.free_off[k], layout.theta_off[k]), pr.p_mat.shape())
                .copy_from(&pr.p_mat);
        }
    }
    for i in 0..layout.n_offsets {
        p[(layout.free_offsets_at + i, layout.theta_offsets_at + i)] = 1.0;
    }
    p
}

/// Gaussian prior over free coordinates: independent blocks per function and per offset.
#[derive(Clone, Debug)]
pub struct Prior {
    /// Prior covariance P K Pᵀ of every function's free coordinates.
    pub blocks: Vec<DMatrix<f64>>,
    pub chols: Vec<Chol>,
    /// Full prior covariance K of every function on its support (before projection).
    pub full: Vec<DMatrix<f64>>,
    pub offset_variance: f64,
}

impl Prior {
    pub fn new(graph: &ModelGraph, design: &Design) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut chols = Vec::new();
        let mut full = Vec::new();
        for (spec, fd) in graph.functions.iter().zip(&design.functions) {
            let k = match (&spec.decl.kind, &fd.support) {
                (FunctionKind::Gp { kernel }, Support::Grid(x)) => kernel.prior_gram(x),
                (FunctionKind::Linear { variance }, Support::Weights(a)) => DMatrix::identity(*a, *a) * *variance,
                _ => DMatrix::zeros(0, 0),
            };
            let kt = match &fd.projection {
                Some(p) => &p.p_mat * &k * p.p_mat.transpose(),
                None => DMatrix::zeros(0, 0),
            };
            chols.push(Chol::new(&kt)?);
            blocks.push(kt);
            full.push(k);
        }
        Ok(Prior {
            blocks,
            chols,
            full,
            offset_variance: graph.offset_variance,
        })
    }

    /// Dense block-diagonal prior covariance over all free coordinates.
    pub fn covariance(&self, layout: &Layout) -> DMatrix<f64> {
        let mut parts = self.blocks.clone();
        parts.push(DMatrix::identity(layout.n_offsets, layout.n_offsets) * self.offset_variance);
        block_diag(&parts)
    }

    pub fn precision(&self, layout: &Layout) -> DMatrix<f64> {
        let mut parts: Vec<DMatrix<f64>> = self.chols.iter().map(Chol::inverse).collect();
        parts.push(DMatrix::identity(layout.n_offsets, layout.n_offsets) / self.offset_variance);
        block_diag(&parts)
    }

    /// K̃⁻¹ U
    pub fn precision_times(&self, u: &DVector<f64>, layout: &Layout) -> DVector<f64> {
        let mut out = DVector::zeros(u.len());
        for (k, c) in self.chols.iter().enumerate() {
            let (o, d) = (layout.free_off[k], layout.free_dim[k]);
            if d > 0 {
                out.rows_mut(o, d).copy_from(&c.solve(&u.rows(o, d).into_owned()));
            }
        }
        for i in 0..layout.n_offsets {
            let j = layout.free_offsets_at + i;
            out[j] = u[j] / self.offset_variance;
        }
        out
    }

    /// UᵀK̃⁻¹U
    pub fn quad(&self, u: &DVector<f64>, layout: &Layout) -> f64 {
        let mut q = 0.0;
        for (k, c) in self.chols.iter().enumerate() {
            let (o, d) = (layout.free_off[k], layout.free_dim[k]);
            if d > 0 {
                q += c.quad_form(&u.rows(o, d).into_owned());
            }
        }
        for i in 0..layout.n_offsets {
            q += u[layout.free_offsets_at + i].powi(2) / self.offset_variance;
        }
        q
    }

    pub fn log_det(&self, layout: &Layout) -> f64 {
        self.chols.iter().map(Chol::log_det).sum::<f64>()
            + layout.n_offsets as f64 * self.offset_variance.ln()
    }

    /// log N(U; 0, K̃)
    pub fn log_density(&self, u: &DVector<f64>, layout: &Layout) -> f64 {
        let n = layout.n_free() as f64;
        -0.5 * (self.quad(u, layout) + self.log_det(layout) + n * (2.0 * std::f64::consts::PI).ln())
    }

    /// Draw of the free coordinates of function `k`, scaled by `scale`.
    pub fn sample_function<R: Rng>(&self, k: usize, scale: f64, rng: &mut R) -> DVector<f64> {
        let c = &self.chols[k];
        let z = DVector::from_fn(c.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        c.l() * z * scale
    }
}
