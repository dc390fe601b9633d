//! Dense linear-algebra helpers shared by the inference backends.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GumError, Result};

/// Relative jitter levels tried, in order, before a factorization is declared failed.
pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Cholesky factor of a symmetric matrix, remembering the jitter that was needed.
#[derive(Clone, Debug)]
pub struct Chol {
    inner: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Chol {
    /// Factorizes `m`, escalating diagonal jitter along [`JITTER_LADDER`]
    /// (scaled by the mean diagonal magnitude).
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n == 0 {
            return Ok(Chol {
                inner: Cholesky::new(DMatrix::zeros(0, 0)).expect("empty factorization"),
                jitter: 0.0,
            });
        }
        let scale = (m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64).max(1e-300);
        let mut last = 0.0;
        for &level in JITTER_LADDER.iter() {
            let jitter = level * scale;
            last = jitter;
            let mut a = m.clone();
            if jitter > 0.0 {
                for i in 0..n {
                    a[(i, i)] += jitter;
                }
            }
            if let Some(inner) = Cholesky::new(a) {
                if inner.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                    return Ok(Chol { inner, jitter });
                }
            }
        }
        Err(GumError::NotPositiveDefinite { jitter: last })
    }

    pub fn dim(&self) -> usize {
        self.inner.l_dirty().nrows()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.inner.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.inner.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.inner.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.inner.inverse()
    }

    /// log |A| of the (jittered) factorized matrix.
    pub fn log_det(&self) -> f64 {
        2.0 * self.inner.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// xᵀ A⁻¹ x
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let mut z = x.clone();
        self.inner.l_dirty().solve_lower_triangular_mut(&mut z);
        z.norm_squared()
    }
}

/// Block-diagonal assembly of square blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut at = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((at, at), (k, k)).copy_from(b);
        at += k;
    }
    out
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().min()
}

/// Ratio of largest to smallest eigenvalue; infinite for singular or indefinite input.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    let ev = s.symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Lower-triangular part (including the diagonal) of a square matrix.
pub fn lower(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            out[(i, j)] = 0.0;
        }
    }
    out
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chol_escalates_jitter_on_singular_input() {
        let m = DMatrix::from_element(3, 3, 1.0);
        let c = Chol::new(&m).unwrap();
        assert!(c.jitter > 0.0);
        assert!(c.jitter <= 1e-6);
    }

    #[test]
    fn chol_fails_on_indefinite_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            Chol::new(&m),
            Err(GumError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn quad_form_and_logdet() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let c = Chol::new(&m).unwrap();
        assert_eq!(c.jitter, 0.0);
        assert!((c.log_det() - 11f64.ln()).abs() < 1e-12);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let direct = (x.transpose() * m.try_inverse().unwrap() * &x)[0];
        assert!((c.quad_form(&x) - direct).abs() < 1e-12);
    }
}
