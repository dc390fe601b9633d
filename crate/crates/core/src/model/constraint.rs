//! Linear identifiability constraints pᵀf = l and their orthonormal projections.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintKind {
    /// f(x₀) = 0. Without an explicit anchor the smallest grid value is used.
    FirstZero {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        anchor: Option<f64>,
    },
    MeanZero,
    MeanOne,
    SumOne,
    None,
}

impl ConstraintKind {
    pub fn first_zero() -> Self {
        ConstraintKind::FirstZero { anchor: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConstraintKind::FirstZero { .. } => "first_zero",
            ConstraintKind::MeanZero => "mean_zero",
            ConstraintKind::MeanOne => "mean_one",
            ConstraintKind::SumOne => "sum_one",
            ConstraintKind::None => "none",
        }
    }

    /// Parses the textual names used in configuration files.
    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "first_zero" => ConstraintKind::first_zero(),
            "mean_zero" => ConstraintKind::MeanZero,
            "mean_one" => ConstraintKind::MeanOne,
            "sum_one" => ConstraintKind::SumOne,
            "none" => ConstraintKind::None,
            _ => return None,
        })
    }

    /// Whether the constraint pins the overall scale of the function.
    pub fn fixes_scale(&self) -> bool {
        matches!(self, ConstraintKind::MeanOne | ConstraintKind::SumOne)
    }
}

/// Constraint vector p, target l and projection P for one parameter vector.
///
/// Rows of `p_mat` are orthonormal and orthogonal to `p`, so any f with pᵀf = l
/// is recovered as `p l / |p|² + Pᵀ u` from its free coordinates `u = P f`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub kind: ConstraintKind,
    pub p: DVector<f64>,
    pub l: f64,
    pub p_mat: DMatrix<f64>,
}

/// Helmert-style basis of the subspace orthogonal to the all-ones vector.
fn helmert(v: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(v.saturating_sub(1), v);
    for m in 1..v {
        let norm = ((m * (m + 1)) as f64).sqrt();
        for n in 0..m {
            p[(m - 1, n)] = 1.0 / norm;
        }
        p[(m - 1, m)] = -(m as f64) / norm;
    }
    p
}

impl Projection {
    /// Builds the projection for a grid of `v` points. `anchor` is the grid index
    /// used by `FirstZero`.
    pub fn new(kind: &ConstraintKind, v: usize, anchor: usize) -> Self {
        assert!(v >= 1, "projection needs at least one point");
        let ones = DVector::from_element(v, 1.0);
        let (p, l, p_mat) = match kind {
            ConstraintKind::None => (DVector::zeros(v), 0.0, DMatrix::identity(v, v)),
            ConstraintKind::FirstZero { .. } => {
                assert!(anchor < v, "anchor index outside the grid");
                let mut p = DVector::zeros(v);
                p[anchor] = 1.0;
                let mut m = DMatrix::zeros(v - 1, v);
                let mut r = 0;
                for i in (0..v).filter(|&i| i != anchor) {
                    m[(r, i)] = 1.0;
                    r += 1;
                }
                (p, 0.0, m)
            }
            ConstraintKind::MeanZero => (ones, 0.0, helmert(v)),
            ConstraintKind::MeanOne => (ones / v as f64, 1.0, helmert(v)),
            ConstraintKind::SumOne => (ones, v as f64, helmert(v)),
        };
        Projection {
            kind: kind.clone(),
            p,
            l,
            p_mat,
        }
    }

    pub fn full_dim(&self) -> usize {
        self.p_mat.ncols()
    }

    pub fn free_dim(&self) -> usize {
        self.p_mat.nrows()
    }

    pub fn is_none(&self) -> bool {
        matches!(self.kind, ConstraintKind::None)
    }

    /// The constant part p l / |p|² of every reconstruction.
    pub fn base(&self) -> DVector<f64> {
        let n2 = self.p.norm_squared();
        if n2 == 0.0 {
            DVector::zeros(self.full_dim())
        } else {
            &self.p * (self.l / n2)
        }
    }

    pub fn reconstruct(&self, u: &DVector<f64>) -> DVector<f64> {
        self.base() + self.p_mat.transpose() * u
    }

    pub fn project(&self, f: &DVector<f64>) -> DVector<f64> {
        &self.p_mat * f
    }

    /// |pᵀf − l|
    pub fn residual(&self, f: &DVector<f64>) -> f64 {
        if self.is_none() {
            0.0
        } else {
            (self.p.dot(f) - self.l).abs()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_zero_two_points() {
        let p = Projection::new(&ConstraintKind::MeanZero, 2, 0);
        let s = 1.0 / 2f64.sqrt();
        assert!((p.p_mat[(0, 0)] - s).abs() < 1e-15);
        assert!((p.p_mat[(0, 1)] + s).abs() < 1e-15);
    }

    #[test]
    fn first_zero_removes_anchor_row() {
        let p = Projection::new(&ConstraintKind::first_zero(), 3, 0);
        let expect = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(p.p_mat, expect);
        assert_eq!(p.l, 0.0);
    }

    #[test]
    fn none_is_identity() {
        let p = Projection::new(&ConstraintKind::None, 4, 0);
        assert_eq!(p.p_mat, DMatrix::identity(4, 4));
        assert_eq!(p.l, 0.0);
    }

    #[test]
    fn targets() {
        assert_eq!(Projection::new(&ConstraintKind::MeanOne, 5, 0).l, 1.0);
        assert_eq!(Projection::new(&ConstraintKind::SumOne, 5, 0).l, 5.0);
        let single = Projection::new(&ConstraintKind::MeanOne, 1, 0);
        assert_eq!(single.free_dim(), 0);
        assert_eq!(single.reconstruct(&DVector::zeros(0))[0], 1.0);
    }

    fn kinds() -> impl Strategy<Value = ConstraintKind> {
        prop_oneof![
            Just(ConstraintKind::first_zero()),
            Just(ConstraintKind::MeanZero),
            Just(ConstraintKind::MeanOne),
            Just(ConstraintKind::SumOne),
            Just(ConstraintKind::None),
        ]
    }

    proptest! {
        #[test]
        fn projection_is_orthonormal_and_reconstruction_satisfies_constraint(
            kind in kinds(),
            v in 1usize..40,
            seed in prop::collection::vec(-5.0f64..5.0, 40),
            anchor_frac in 0.0f64..1.0,
        ) {
            let anchor = ((v as f64 * anchor_frac) as usize).min(v - 1);
            let pr = Projection::new(&kind, v, anchor);
            let gram = &pr.p_mat * pr.p_mat.transpose();
            let eye = DMatrix::<f64>::identity(pr.free_dim(), pr.free_dim());
            prop_assert!((gram - eye).amax() < 1e-12);
            if !pr.is_none() {
                prop_assert!((&pr.p_mat * &pr.p).amax() < 1e-12);
            }
            let u = DVector::from_iterator(pr.free_dim(), seed.iter().copied().take(pr.free_dim()));
            let f = pr.reconstruct(&u);
            prop_assert!(pr.residual(&f) <= 1e-10 * (1.0 + v as f64));
            prop_assert!((pr.project(&f) - &u).amax() < 1e-10);
        }
    }
}
