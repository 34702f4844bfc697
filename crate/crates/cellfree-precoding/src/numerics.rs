//! Shared numerical kernels with explicit contracts.
//!
//! Everything here is pure and reentrant: Hermitian eigendecomposition,
//! positive-semidefinite matrix square root, Moore-Penrose pseudo-inverse and
//! bisection on monotone decreasing scalar maps. The factorizations are
//! backed by dense decompositions from `nalgebra`; this module pins down
//! ordering, round-off clamping and rank cutoffs so callers get one
//! behaviour.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::{CMat, Cpx};

/// Relative symmetry residual above which a matrix is rejected as
/// non-Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-8;

/// Relative singular-value cutoff used by [`pinv`].
pub const PINV_RTOL: f64 = 1e-10;

/// Eigendecomposition of a Hermitian PSD matrix.
///
/// Eigenvalues are sorted descending and clamped at zero; the columns of
/// `vectors` are the matching orthonormal eigenvectors.
#[derive(Clone, Debug)]
pub struct EigenPair {
    pub values: Vec<f64>,
    pub vectors: CMat,
}

impl EigenPair {
    /// Rebuilds the matrix from its factors.
    pub fn reconstruct(&self) -> CMat {
        let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.values.len(),
            self.values.iter().map(|&v| Cpx::new(v, 0.0)),
        ));
        &self.vectors * diag * self.vectors.adjoint()
    }

    /// Number of eigenvalues above `rel_cutoff` times the largest one.
    pub fn numerical_rank(&self, rel_cutoff: f64) -> usize {
        let max = self.values.first().copied().unwrap_or(0.0);
        if max <= 0.0 {
            return 0;
        }
        self.values.iter().filter(|&&v| v > rel_cutoff * max).count()
    }
}

fn hermitian_residual(a: &CMat) -> f64 {
    (a - a.adjoint()).norm()
}

/// Hermitian (re-)symmetrization `(A + A^H) / 2`.
pub fn hermitianize(a: &CMat) -> CMat {
    (a + a.adjoint()).scale(0.5)
}

/// Eigendecomposition of a Hermitian PSD matrix.
///
/// The input must be square with a symmetry residual below
/// [`HERMITIAN_TOL`] relative to its norm. Negative round-off eigenvalues
/// are clamped to zero so that [`psd_sqrt`] stays well defined.
pub fn hermitian_eig(a: &CMat) -> Result<EigenPair> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "hermitian_eig needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.norm();
    let residual = hermitian_residual(a);
    if residual > HERMITIAN_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotHermitian {
            residual,
            bound: HERMITIAN_TOL * scale,
        });
    }

    let eig = hermitianize(a).symmetric_eigen();
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());

    let values: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0))
        .collect();
    let mut vectors = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(EigenPair { values, vectors })
}

/// Hermitian PSD square root `S` with `S S^H = A`.
pub fn psd_sqrt(a: &CMat) -> Result<CMat> {
    let eig = hermitian_eig(a)?;
    let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        eig.values.len(),
        eig.values.iter().map(|&v| Cpx::new(v.sqrt(), 0.0)),
    ));
    Ok(hermitianize(&(&eig.vectors * diag * eig.vectors.adjoint())))
}

/// Moore-Penrose pseudo-inverse.
///
/// Singular values below [`PINV_RTOL`] relative to the largest are treated
/// as zero. The zero matrix maps to the zero matrix.
pub fn pinv(a: &CMat) -> CMat {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = PINV_RTOL * max_sv;
    let inv_diag = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        svd.singular_values.len(),
        svd.singular_values.iter().map(|&s| {
            if s > cutoff && s > 0.0 {
                Cpx::new(1.0 / s, 0.0)
            } else {
                Cpx::new(0.0, 0.0)
            }
        }),
    ));
    v_t.adjoint() * inv_diag * u.adjoint()
}

/// Result of a bisection search.
#[derive(Clone, Copy, Debug)]
pub struct Bisection {
    /// Returned root: the upper end of the final bracket, so `f(root)` is on
    /// the `<= target` side. Within `tol` of the exact crossing.
    pub root: f64,
    /// Final bracket width, strictly below the requested tolerance.
    pub bracket_width: f64,
    /// Number of halvings performed.
    pub iterations: usize,
    /// `f` at the final lower end (`>= target`).
    pub value_at_lower: f64,
    /// `f` at the final upper end (`<= target`).
    pub value_at_upper: f64,
}

/// Bisection for `f(x) = target` where `f` is monotone decreasing.
///
/// The caller must establish the bracket `f(lb) >= target >= f(ub)`; a
/// violated bracket is reported, not clamped. The bracket is halved until
/// its width drops below `tol`, so the search needs at most
/// `ceil(log2((ub - lb) / tol))` evaluations past the endpoint checks.
pub fn bisect_decreasing(
    f: impl Fn(f64) -> f64,
    target: f64,
    lb: f64,
    ub: f64,
    tol: f64,
) -> Result<Bisection> {
    if !(tol > 0.0) || !lb.is_finite() || !ub.is_finite() || lb >= ub {
        return Err(Error::BracketViolation(format!(
            "bad bracket or tolerance: lb={lb}, ub={ub}, tol={tol}"
        )));
    }
    let mut lo = lb;
    let mut hi = ub;
    let mut f_lo = f(lo);
    let mut f_hi = f(hi);
    if f_lo < target {
        return Err(Error::BracketViolation(format!(
            "f(lb)={f_lo} is below the target {target}"
        )));
    }
    if f_hi > target {
        return Err(Error::BracketViolation(format!(
            "f(ub)={f_hi} is above the target {target}"
        )));
    }

    let mut iterations = 0;
    while hi - lo >= tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // bracket width has reached floating-point resolution
            break;
        }
        let f_mid = f(mid);
        if f_mid >= target {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
            f_hi = f_mid;
        }
        iterations += 1;
    }

    Ok(Bisection {
        root: hi,
        bracket_width: hi - lo,
        iterations,
        value_at_lower: f_lo,
        value_at_upper: f_hi,
    })
}

/// Deterministic complex test matrices shared by this module's tests and the
/// cross-check suites of dependent modules.
#[cfg(test)]
pub(crate) fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> CMat {
    let mut state = seed.wrapping_add(0x9e3779b97f4a7c15);
    let mut next = move || {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    CMat::from_fn(rows, cols, |_, _| Cpx::new(next(), next()))
}
