//! Interval kernels for piecewise-constant linear dynamics.
//!
//! For a drift matrix `A = M diag(λ) M⁻¹` held constant over an interval of
//! length `dt`, the propagator, drift integral and noise integral all reduce
//! to elementwise functions of the eigenvalues:
//!
//! ```text
//! h = M diag(exp(λ dt)) M⁻¹
//! k = M diag(φ(λ, dt)) M⁻¹ b
//! g = w² M_a B M_bᵀ,   B_pq = φ(λa_p + λb_q, dt) (M_a⁻¹ CCᵀ M_b⁻ᵀ)_pq
//! ```
//!
//! with `φ(s, dt) = (exp(s dt) - 1) / s`. Eigenpairs may be complex; the
//! assembled products are real and the imaginary residue is discarded.

use nalgebra::{Complex, DMatrix, DVector, Schur};

use crate::error::{EmuError, Result};

pub type C64 = Complex<f64>;

/// `|s dt|` below which [`phi1`] switches to its Taylor series.
pub const SERIES_SWITCH: f64 = 1e-4;
/// Default bound on the condition number of the eigenvector matrix.
pub const DEFAULT_COND_THRESHOLD: f64 = 1e12;
/// Relative bound on the imaginary part discarded when returning to reals.
pub const IMAG_TOL: f64 = 1e-9;

const SCHUR_MAX_ITER: usize = 10_000;

/// Eigendecomposition `A = M diag(lambda) M⁻¹` over the complex numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomp {
    pub m: DMatrix<C64>,
    pub minv: DMatrix<C64>,
    pub lambda: DVector<C64>,
    /// 1-norm condition number of `m`.
    pub cond_estimate: f64,
}

impl EigenDecomp {
    /// Builds a decomposition from known eigenvectors (columns of `m`) and
    /// eigenvalues. The inverse is computed here.
    pub fn from_parts(m: DMatrix<C64>, lambda: DVector<C64>, cond_threshold: f64) -> Result<Self> {
        let dim = m.nrows();
        if m.ncols() != dim || lambda.len() != dim {
            return Err(EmuError::DimensionMismatch(format!(
                "eigenvector matrix {}x{} with {} eigenvalues",
                m.nrows(),
                m.ncols(),
                lambda.len()
            )));
        }
        let minv = m.clone().try_inverse().ok_or(EmuError::NonDiagonalizable {
            interval: None,
            cond: f64::INFINITY,
        })?;
        let cond = (norm1(&m) * norm1(&minv)).max(1.0);
        if !cond.is_finite() || cond > cond_threshold {
            return Err(EmuError::NonDiagonalizable {
                interval: None,
                cond,
            });
        }
        Ok(EigenDecomp {
            m,
            minv,
            lambda,
            cond_estimate: cond,
        })
    }

    /// Known eigenvectors, inverse and eigenvalues; only the condition
    /// estimate is computed.
    pub fn from_parts_with_inverse(
        m: DMatrix<C64>,
        minv: DMatrix<C64>,
        lambda: DVector<C64>,
        cond_threshold: f64,
    ) -> Result<Self> {
        let dim = m.nrows();
        if m.ncols() != dim || minv.shape() != (dim, dim) || lambda.len() != dim {
            return Err(EmuError::DimensionMismatch(format!(
                "eigenvector matrix {}x{}, inverse {}x{}, {} eigenvalues",
                m.nrows(),
                m.ncols(),
                minv.nrows(),
                minv.ncols(),
                lambda.len()
            )));
        }
        let cond = (norm1(&m) * norm1(&minv)).max(1.0);
        if !cond.is_finite() || cond > cond_threshold {
            return Err(EmuError::NonDiagonalizable { interval: None, cond });
        }
        Ok(EigenDecomp {
            m,
            minv,
            lambda,
            cond_estimate: cond,
        })
    }

    /// Real-valued eigenvectors and eigenvalues, as produced by closed forms.
    pub fn from_real(m: &DMatrix<f64>, lambda: &DVector<f64>, cond_threshold: f64) -> Result<Self> {
        Self::from_parts(
            m.map(|x| C64::new(x, 0.0)),
            lambda.map(|x| C64::new(x, 0.0)),
            cond_threshold,
        )
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    /// `M diag(d) M⁻¹`, real part.
    fn similarity(&self, d: &DVector<C64>) -> DMatrix<f64> {
        let mut md = self.m.clone();
        for (j, dj) in d.iter().enumerate() {
            md.column_mut(j).scale_mut_c(*dj);
        }
        (md * &self.minv).map(|z| z.re)
    }

    /// `M diag(λ) M⁻¹`, real part.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.similarity(&self.lambda)
    }
}

trait ScaleComplex {
    fn scale_mut_c(&mut self, s: C64);
}

impl<S> ScaleComplex for nalgebra::Matrix<C64, nalgebra::Dyn, nalgebra::U1, S>
where
    S: nalgebra::StorageMut<C64, nalgebra::Dyn, nalgebra::U1>,
{
    fn scale_mut_c(&mut self, s: C64) {
        for z in self.iter_mut() {
            *z *= s;
        }
    }
}

fn norm1(m: &DMatrix<C64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Eigendecomposition of a real square matrix via the complex Schur form.
///
/// Eigenpairs are sorted by descending real part, ties broken by ascending
/// imaginary part. Each eigenvector has unit 2-norm and its largest entry
/// is rotated onto the positive real axis, so real eigenvalues come with
/// real eigenvectors.
pub fn eigendecompose(a: &DMatrix<f64>, cond_threshold: f64) -> Result<EigenDecomp> {
    let dim = a.nrows();
    if dim == 0 || a.ncols() != dim {
        return Err(EmuError::DimensionMismatch(format!(
            "eigendecompose needs a nonempty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if !(cond_threshold > 1.0) {
        return Err(EmuError::InvalidInput(format!(
            "cond_threshold must exceed 1, got {cond_threshold}"
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(EmuError::InvalidInput("matrix has non-finite entries".into()));
    }
    let ac = a.map(|x| C64::new(x, 0.0));
    let schur = Schur::try_new(ac, f64::EPSILON, SCHUR_MAX_ITER).ok_or(
        EmuError::NonDiagonalizable {
            interval: None,
            cond: f64::INFINITY,
        },
    )?;
    let (q, t) = schur.unpack();

    let tnorm = t.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let small = f64::EPSILON * tnorm.max(f64::MIN_POSITIVE);

    let mut pairs: Vec<(C64, DVector<C64>)> = Vec::with_capacity(dim);
    for k in 0..dim {
        let lam = t[(k, k)];
        // back substitution on the upper-triangular Schur factor
        let mut x = DVector::<C64>::zeros(dim);
        x[k] = C64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut num = C64::new(0.0, 0.0);
            for j in (i + 1)..=k {
                num += t[(i, j)] * x[j];
            }
            let mut den = t[(i, i)] - lam;
            if den.norm() < small {
                if num.norm() <= small {
                    x[i] = C64::new(0.0, 0.0);
                    continue;
                }
                den = C64::new(small, 0.0);
            }
            x[i] = -num / den;
        }
        let mut v = &q * x;
        let nrm = v.norm();
        v /= C64::new(nrm, 0.0);
        let (imax, _) = v
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, z)| if z.norm() > acc.1 { (i, z.norm()) } else { acc });
        let phase = v[imax].conj() / v[imax].norm();
        v *= phase;
        pairs.push((lam, v));
    }
    pairs.sort_by(|(a, _), (b, _)| b.re.total_cmp(&a.re).then(a.im.total_cmp(&b.im)));

    let lambda = DVector::from_iterator(dim, pairs.iter().map(|(l, _)| *l));
    let mut m = DMatrix::<C64>::zeros(dim, dim);
    for (j, (_, v)) in pairs.iter().enumerate() {
        m.set_column(j, v);
    }
    EigenDecomp::from_parts(m, lambda, cond_threshold)
}

/// `exp(z) - 1` without cancellation for small `|z|`.
fn expm1_c(z: C64) -> C64 {
    let (x, y) = (z.re, z.im);
    let half = (0.5 * y).sin();
    C64::new(x.exp_m1() * y.cos() - 2.0 * half * half, x.exp() * y.sin())
}

/// `(exp(s dt) - 1) / s`, continuous through `s = 0` where it equals `dt`.
pub fn phi1(s: C64, dt: f64) -> C64 {
    let z = s * dt;
    if z.norm() < SERIES_SWITCH {
        phi1_series(z, dt)
    } else {
        expm1_c(z) / s
    }
}

// dt · Σ_k z^k / (k+1)!
fn phi1_series(z: C64, dt: f64) -> C64 {
    {
        let mut term = C64::new(dt, 0.0);
        let mut sum = term;
        let mut k = 1.0;
        loop {
            term *= z / (k + 1.0);
            sum += term;
            if term.norm() <= 1e-17 * sum.norm() || term.norm() == 0.0 {
                break;
            }
            k += 1.0;
        }
        sum
    }
}

/// Interval propagator `exp(dt A)`.
pub fn propagator_h(ed: &EigenDecomp, dt: f64) -> DMatrix<f64> {
    let d = ed.lambda.map(|l| (l * dt).exp());
    ed.similarity(&d)
}

/// Drift integral `∫₀^dt exp(s A) b ds`.
/// `h x + k` without forming `h`: `M (e^{λ dt} ∘ M⁻¹x + φ₁(λ, dt) ∘ M⁻¹b)`,
/// left in the eigenbasis so further terms can be added before mapping back.
pub fn step_eigen(ed: &EigenDecomp, x: &DVector<f64>, b: &DVector<f64>, dt: f64) -> DVector<C64> {
    let mut y = DVector::zeros(ed.dim());
    for (r, row) in ed.minv.row_iter().enumerate() {
        let (mut px, mut pb) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
        for (c, z) in row.iter().enumerate() {
            px += z * x[c];
            pb += z * b[c];
        }
        let l = ed.lambda[r];
        y[r] = px * (l * dt).exp() + pb * phi1(l, dt);
    }
    y
}

/// Real part of `M y`.
pub fn from_eigen(ed: &EigenDecomp, y: &DVector<C64>) -> DVector<f64> {
    (&ed.m * y).map(|z| z.re)
}

pub fn drift_k(ed: &EigenDecomp, b: &DVector<f64>, dt: f64) -> DVector<f64> {
    let bc = b.map(|x| C64::new(x, 0.0));
    let mut y = &ed.minv * bc;
    for (yi, l) in y.iter_mut().zip(ed.lambda.iter()) {
        *yi *= phi1(*l, dt);
    }
    (&ed.m * y).map(|z| z.re)
}

/// Integrated cross-covariance of the noise between two replicas over one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBlock {
    pub g: DMatrix<f64>,
    pub coupling_weight: f64,
}

/// `M_a⁻¹ · CCᵀ`, the left factor of the noise block shared by all partners of replica `a`.
pub fn minv_cct(ed: &EigenDecomp, cct: &DMatrix<f64>) -> DMatrix<C64> {
    &ed.minv * cct.map(|x| C64::new(x, 0.0))
}

/// The eigenbasis core `B` of the noise block, without the `w²` prefactor.
fn noise_core(
    ed_a: &EigenDecomp,
    left: &DMatrix<C64>,
    ed_b: &EigenDecomp,
    dt: f64,
) -> DMatrix<C64> {
    // Y = M_a⁻¹ CCᵀ M_b⁻ᵀ (plain transpose)
    let mut y = left * ed_b.minv.transpose();
    for q in 0..y.ncols() {
        for p in 0..y.nrows() {
            y[(p, q)] *= phi1(ed_a.lambda[p] + ed_b.lambda[q], dt);
        }
    }
    y
}

/// Noise block `g = w² ∫₀^dt exp(s A_a) CCᵀ exp(s A_bᵀ) ds`.
pub fn noise_block_g(
    ed_a: &EigenDecomp,
    ed_b: &EigenDecomp,
    cct: &DMatrix<f64>,
    dt: f64,
    w: f64,
) -> NoiseBlock {
    let left = minv_cct(ed_a, cct);
    NoiseBlock {
        g: noise_block_from_left(ed_a, &left, ed_b, dt, w),
        coupling_weight: w,
    }
}

/// As [`noise_block_g`] with a precomputed `M_a⁻¹ CCᵀ`.
pub fn noise_block_from_left(
    ed_a: &EigenDecomp,
    left: &DMatrix<C64>,
    ed_b: &EigenDecomp,
    dt: f64,
    w: f64,
) -> DMatrix<f64> {
    let core = noise_core(ed_a, left, ed_b, dt);
    let g = &ed_a.m * core * ed_b.m.transpose();
    g.map(|z| w * w * z.re)
}

/// `g · v` without forming `g`: `w² Re(M_a (B (M_bᵀ v)))`.
pub fn noise_block_apply(
    ed_a: &EigenDecomp,
    left: &DMatrix<C64>,
    ed_b: &EigenDecomp,
    dt: f64,
    w: f64,
    v: &DVector<f64>,
) -> DVector<f64> {
    let core = noise_core(ed_a, left, ed_b, dt);
    let vc = v.map(|x| C64::new(x, 0.0));
    let u = ed_b.m.tr_mul(&vc);
    let r = &ed_a.m * (core * u);
    r.map(|z| w * w * z.re)
}

/// Two-time covariance of two replicas with time-independent dynamics,
/// started from zero at `t0`, for `t_i ≥ t_j`.
pub fn sigma_const(
    ed_a: &EigenDecomp,
    ed_b: &EigenDecomp,
    cct: &DMatrix<f64>,
    t_i: f64,
    t_j: f64,
    t0: f64,
    w: f64,
) -> DMatrix<f64> {
    let left = minv_cct(ed_a, cct);
    let mut y = left * ed_b.minv.transpose();
    let lag = t_i - t_j;
    let span = t_j - t0;
    for q in 0..y.ncols() {
        for p in 0..y.nrows() {
            let la = ed_a.lambda[p];
            let lb = ed_b.lambda[q];
            // exp(lag λa) (exp(span (λa+λb)) - 1) / (λa+λb)
            y[(p, q)] *= (la * lag).exp() * phi1(la + lb, span);
        }
    }
    let s = &ed_a.m * y * ed_b.m.transpose();
    s.map(|z| w * w * z.re)
}

/// Frobenius norm of the imaginary part relative to the real part.
pub fn imag_residue(z: &DMatrix<C64>) -> f64 {
    let re = z.map(|c| c.re).norm();
    let im = z.map(|c| c.im).norm();
    im / re.max(f64::MIN_POSITIVE)
}

/// Complex propagator before the real part is taken; exposed for residue checks.
pub fn propagator_h_complex(ed: &EigenDecomp, dt: f64) -> DMatrix<C64> {
    let mut md = ed.m.clone();
    for j in 0..ed.dim() {
        let d = (ed.lambda[j] * dt).exp();
        md.column_mut(j).scale_mut_c(d);
    }
    md * &ed.minv
}

/// Complex noise block before the real part is taken; exposed for residue checks.
pub fn noise_block_complex(
    ed_a: &EigenDecomp,
    ed_b: &EigenDecomp,
    cct: &DMatrix<f64>,
    dt: f64,
) -> DMatrix<C64> {
    let left = minv_cct(ed_a, cct);
    &ed_a.m * noise_core(ed_a, &left, ed_b, dt) * ed_b.m.transpose()
}
