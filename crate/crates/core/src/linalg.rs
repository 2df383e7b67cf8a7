//! Dense factorizations used by conditioning and sampling.

use nalgebra::{DMatrix, DMatrixViewMut, DVector};
use rayon::prelude::*;

const BLOCK: usize = 96;

/// Lower-triangular Cholesky factor with its strict upper triangle zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub l: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L y = b` in place.
    pub fn forward_mut(&self, b: &mut DMatrix<f64>) {
        if self.dim() > 0 {
            assert!(self.l.solve_lower_triangular_mut(b), "zero on factor diagonal");
        }
    }

    /// Solves `L Lᵀ x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        if self.dim() == 0 {
            return x;
        }
        assert!(self.l.solve_lower_triangular_mut(&mut x), "zero on factor diagonal");
        assert!(self.l.tr_solve_lower_triangular_mut(&mut x), "zero on factor diagonal");
        x
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

/// Blocked right-looking Cholesky reading only the lower triangle of `a`.
///
/// Fails when a pivot drops to `pivot_rel · a_jj` or below, i.e. when the
/// matrix is not numerically positive definite.
pub fn cholesky(mut a: DMatrix<f64>, pivot_rel: f64) -> Option<CholeskyFactor> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
    let orig_diag: Vec<f64> = a.diagonal().iter().copied().collect();

    let mut k0 = 0;
    while k0 < n {
        let kb = BLOCK.min(n - k0);
        // diagonal block
        for j in k0..k0 + kb {
            let mut d = a[(j, j)];
            for p in k0..j {
                d -= a[(j, p)] * a[(j, p)];
            }
            if !(d > pivot_rel * orig_diag[j]) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            a[(j, j)] = d;
            for i in j + 1..k0 + kb {
                let mut s = a[(i, j)];
                for p in k0..j {
                    s -= a[(i, p)] * a[(j, p)];
                }
                a[(i, j)] = s / d;
            }
        }
        let c0 = k0 + kb;
        if c0 == n {
            break;
        }
        // panel: L21 = A21 L11⁻ᵀ, solved as L11 L21ᵀ = A21ᵀ
        let mut l11 = a.view((k0, k0), (kb, kb)).into_owned();
        l11.fill_upper_triangle(0.0, 1);
        let mut panel_t = a.view((c0, k0), (n - c0, kb)).transpose();
        if !l11.solve_lower_triangular_mut(&mut panel_t) {
            return None;
        }
        let panel = panel_t.transpose();
        a.view_mut((c0, k0), (n - c0, kb)).copy_from(&panel);

        // trailing update A22 -= L21 L21ᵀ, by column blocks in parallel
        let data = &mut a.as_mut_slice()[c0 * n..];
        data.par_chunks_mut(BLOCK * n).enumerate().for_each(|(q, chunk)| {
            let c = c0 + q * BLOCK;
            let w = chunk.len() / n;
            let rows = n - c;
            let mut view = DMatrixViewMut::from_slice_with_strides_mut(&mut chunk[c..], rows, w, 1, n);
            let lhs = panel.rows(c - c0, rows);
            let rhs = panel.rows(c - c0, w);
            view.gemm(-1.0, &lhs, &rhs.transpose(), 1.0);
        });
        k0 = c0;
    }
    a.fill_upper_triangle(0.0, 1);
    Some(CholeskyFactor { l: a })
}

/// Cholesky of a positive semi-definite matrix: columns whose pivot falls
/// below `tol · max diag` are set to zero. Returns `None` if a pivot is
/// negative beyond that tolerance.
pub fn psd_cholesky(a: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let scale = a.diagonal().iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let floor = tol * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        if d < -floor || !d.is_finite() {
            return None;
        }
        if d <= floor {
            // residual column must vanish as well
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for p in 0..j {
                    s -= l[(i, p)] * l[(j, p)];
                }
                if s.abs() > floor.sqrt() * scale.sqrt().max(f64::MIN_POSITIVE) {
                    return None;
                }
            }
            continue;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// `‖x - y‖_F / ‖y‖_F`, with `‖y‖_F` floored at `floor`.
pub fn rel_err(x: &DMatrix<f64>, y: &DMatrix<f64>, floor: f64) -> f64 {
    (x - y).norm() / y.norm().max(floor)
}
