//! Dense real-matrix kernel.
//!
//! Thin layer over `nalgebra` that exposes exactly the decompositions the rest
//! of the crate needs: symmetric eigenvalues, spectral radius of a general
//! matrix, orthonormal image/kernel bases, least squares and the vectorized
//! generalized Lyapunov solve used for mean-square stability certificates.

use nalgebra::{DMatrix, DVector, FullPivLU, Schur, SymmetricEigen, SVD};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative rank tolerance on singular values.
pub const TOL_RANK: f64 = 1e-9;
/// Default symmetry tolerance, relative to `1 + max|m_ij|`.
pub const TOL_SYM: f64 = 1e-9;
/// Default tolerance on equation residuals and inequality slacks.
pub const TOL_EQ: f64 = 1e-7;
/// Orthonormality tolerance of subspace bases.
pub const TOL_ORTH: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("dimension mismatch in {context}: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        context: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("vectorized Lyapunov operator is singular")]
    SingularOperator,
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Orthonormal basis of a subspace of `R^ambient_dim`, stored as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    pub ambient_dim: usize,
    pub basis: Matrix,
}

impl SubspaceBasis {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.ncols() == 0
    }

    /// Orthogonal projector onto the subspace.
    pub fn projector(&self) -> Matrix {
        &self.basis * self.basis.transpose()
    }
}

pub fn ensure_square(m: &Matrix) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NonSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

pub fn ensure_shape(context: &'static str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(LinalgError::DimensionMismatch {
            context,
            expected: (rows, cols),
            got: (m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest entrywise deviation of `m` from its transpose.
pub fn asymmetry(m: &Matrix) -> f64 {
    max_abs(&(m - m.transpose()))
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

fn checked_symmetric(m: &Matrix) -> Result<Matrix> {
    ensure_square(m)?;
    let asym = asymmetry(m);
    if asym > TOL_SYM * (1.0 + max_abs(m)) {
        return Err(LinalgError::NotSymmetric { asymmetry: asym });
    }
    Ok(symmetrize(m))
}

/// Ascending eigenvalues of the symmetric part of `m`.
pub fn sym_eigs(m: &Matrix) -> Result<Vec<f64>> {
    let s = checked_symmetric(m)?;
    if s.nrows() == 0 {
        return Ok(Vec::new());
    }
    let mut vals: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    Ok(vals)
}

/// Eigen-decomposition `m = V diag(values) V^T` with ascending values.
pub fn sym_eig_decomp(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let s = checked_symmetric(m)?;
    let n = s.nrows();
    if n == 0 {
        return Ok((Vec::new(), Matrix::zeros(0, 0)));
    }
    let eig = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

pub fn lambda_min(m: &Matrix) -> Result<f64> {
    Ok(sym_eigs(m)?.first().copied().unwrap_or(f64::INFINITY))
}

pub fn lambda_max(m: &Matrix) -> Result<f64> {
    Ok(sym_eigs(m)?.last().copied().unwrap_or(f64::NEG_INFINITY))
}

/// Largest eigenvalue of `X^T M X`, i.e. the squared operator norm of `X`
/// from the Euclidean norm into the `M`-weighted norm. Zero for empty `X`.
pub fn weighted_norm_sq(x: &Matrix, m: &Matrix) -> Result<f64> {
    ensure_shape("weighted_norm_sq", m, x.nrows(), x.nrows())?;
    if x.ncols() == 0 {
        return Ok(0.0);
    }
    let g = x.transpose() * m * x;
    Ok(lambda_max(&symmetrize(&g))?.max(0.0))
}

/// Spectral radius of a general real square matrix.
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    let n = ensure_square(m)?;
    if n == 0 || max_abs(m) == 0.0 {
        return Ok(0.0);
    }
    match Schur::try_new(m.clone(), f64::EPSILON, 10_000) {
        Some(schur) => Ok(schur
            .complex_eigenvalues()
            .iter()
            .fold(0.0_f64, |acc, z| acc.max(z.norm()))),
        None => Ok(gelfand_radius(m)),
    }
}

/// Spectral radius by repeated squaring, `rho = lim ||m^k||^(1/k)`.
fn gelfand_radius(m: &Matrix) -> f64 {
    let mut p = m.clone();
    let mut log_scale = 0.0_f64;
    let mut k = 1.0_f64;
    let mut estimate = p.norm();
    for _ in 0..40 {
        let norm = p.norm();
        if norm == 0.0 {
            return 0.0;
        }
        p /= norm;
        log_scale += norm.ln();
        // p * exp(log_scale) == m^k
        estimate = ((log_scale + p.norm().ln()) / k).exp();
        p = &p * &p;
        log_scale *= 2.0;
        k *= 2.0;
    }
    estimate
}

/// Column space of `m`; rank decided by `sigma >= tol_rank * sigma_max`.
pub fn image_basis(m: &Matrix, tol_rank: f64) -> SubspaceBasis {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 || max_abs(m) == 0.0 {
        return SubspaceBasis {
            ambient_dim: rows,
            basis: Matrix::zeros(rows, 0),
        };
    }
    let svd = SVD::new(m.clone(), true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sigma_max = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] >= tol_rank * sigma_max)
        .collect();
    let basis = Matrix::from_fn(rows, keep.len(), |r, c| u[(r, keep[c])]);
    SubspaceBasis {
        ambient_dim: rows,
        basis,
    }
}

/// Null space of `m`; rank decided as in [`image_basis`].
pub fn kernel_basis(m: &Matrix, tol_rank: f64) -> SubspaceBasis {
    let (rows, cols) = m.shape();
    if cols == 0 {
        return SubspaceBasis {
            ambient_dim: 0,
            basis: Matrix::zeros(0, 0),
        };
    }
    if rows == 0 || max_abs(m) == 0.0 {
        return SubspaceBasis {
            ambient_dim: cols,
            basis: Matrix::identity(cols, cols),
        };
    }
    // Pad with zero rows so the thin SVD yields a full set of right vectors.
    let padded_rows = rows.max(cols);
    let mut padded = Matrix::zeros(padded_rows, cols);
    padded.view_mut((0, 0), (rows, cols)).copy_from(m);
    let svd = SVD::new(padded, false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let sigma_max = svd.singular_values.max();
    let null: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] < tol_rank * sigma_max)
        .collect();
    let basis = Matrix::from_fn(cols, null.len(), |r, c| v_t[(null[c], r)]);
    SubspaceBasis {
        ambient_dim: cols,
        basis,
    }
}

/// Whether every column of `target` lies within distance `tol` of the span
/// of `generators`. Returns the decision and the largest column residual.
pub fn subspace_contains(target: &Matrix, generators: &Matrix, tol: f64) -> Result<(bool, f64)> {
    if target.nrows() != generators.nrows() {
        return Err(LinalgError::DimensionMismatch {
            context: "subspace_contains",
            expected: (generators.nrows(), target.ncols()),
            got: target.shape(),
        });
    }
    if target.ncols() == 0 {
        return Ok((true, 0.0));
    }
    let span = image_basis(generators, TOL_RANK);
    let residual = target - span.projector() * target;
    let worst = residual
        .column_iter()
        .fold(0.0_f64, |acc, c| acc.max(c.norm()));
    Ok((worst <= tol, worst))
}

/// Minimum-norm least squares solution of `a x = b` with its Frobenius residual.
pub fn lstsq_solve(a: &Matrix, b: &Matrix) -> Result<(Matrix, f64)> {
    if a.nrows() != b.nrows() {
        return Err(LinalgError::DimensionMismatch {
            context: "lstsq_solve",
            expected: (a.nrows(), b.ncols()),
            got: b.shape(),
        });
    }
    let x = if a.ncols() == 0 || a.nrows() == 0 || b.ncols() == 0 || max_abs(a) == 0.0 {
        Matrix::zeros(a.ncols(), b.ncols())
    } else {
        let svd = SVD::new(a.clone(), true, true);
        let eps = TOL_RANK * svd.singular_values.max();
        svd.solve(b, eps).expect("both singular bases computed")
    };
    let residual = (a * &x - b).norm();
    Ok((x, residual))
}

/// Solves `Abar^T M + M Abar + E^T M E + sum_i lambda_i R_i^T M R_i + kappa M = -W`
/// for symmetric `M` through the `n^2` vectorization of the operator.
pub fn kron_lyap_solve(
    abar: &Matrix,
    e: &Matrix,
    jumps: &[(f64, Matrix)],
    kappa_hat: f64,
    w: &Matrix,
) -> Result<Matrix> {
    let n = ensure_square(abar)?;
    ensure_shape("kron_lyap_solve: E", e, n, n)?;
    ensure_shape("kron_lyap_solve: W", w, n, n)?;
    for (_, r) in jumps {
        ensure_shape("kron_lyap_solve: R", r, n, n)?;
    }
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let op = lyapunov_operator(abar, e, jumps, kappa_hat);
    let rhs = -Vector::from_column_slice(w.as_slice());
    let lu = FullPivLU::new(op.clone());
    let u = lu.u();
    let pivots: Vec<f64> = (0..u.nrows()).map(|i| u[(i, i)].abs()).collect();
    let max_pivot = pivots.iter().copied().fold(0.0, f64::max);
    let min_pivot = pivots.iter().copied().fold(f64::INFINITY, f64::min);
    if max_pivot == 0.0 || min_pivot <= 1e-13 * max_pivot {
        return Err(LinalgError::SingularOperator);
    }
    let sol = lu.solve(&rhs).ok_or(LinalgError::SingularOperator)?;
    let m = symmetrize(&Matrix::from_column_slice(n, n, sol.as_slice()));
    let residual = lyapunov_residual(abar, e, jumps, kappa_hat, &m, w);
    if residual > 1e-8 * w.norm().max(f64::MIN_POSITIVE) {
        return Err(LinalgError::SingularOperator);
    }
    Ok(m)
}

/// Column-major vectorization of `M -> Abar^T M + M Abar + E^T M E + sum lambda R^T M R + kappa M`.
pub fn lyapunov_operator(abar: &Matrix, e: &Matrix, jumps: &[(f64, Matrix)], kappa_hat: f64) -> Matrix {
    let n = abar.nrows();
    let eye = Matrix::identity(n, n);
    let at = abar.transpose();
    let et = e.transpose();
    let mut op = eye.kronecker(&at) + at.kronecker(&eye) + et.kronecker(&et);
    for (rate, r) in jumps {
        let rt = r.transpose();
        op += rt.kronecker(&rt) * *rate;
    }
    op + Matrix::identity(n * n, n * n) * kappa_hat
}

/// Frobenius norm of the Lyapunov equation residual at `m`.
pub fn lyapunov_residual(
    abar: &Matrix,
    e: &Matrix,
    jumps: &[(f64, Matrix)],
    kappa_hat: f64,
    m: &Matrix,
    w: &Matrix,
) -> f64 {
    (lyapunov_form(abar, e, jumps, kappa_hat, m) + w).norm()
}

/// `Abar^T M + M Abar + E^T M E + sum lambda R^T M R + kappa M`.
pub fn lyapunov_form(abar: &Matrix, e: &Matrix, jumps: &[(f64, Matrix)], kappa_hat: f64, m: &Matrix) -> Matrix {
    let mut out = abar.transpose() * m + m * abar + e.transpose() * m * e + m * kappa_hat;
    for (rate, r) in jumps {
        out += r.transpose() * m * r * *rate;
    }
    out
}

/// Largest generalized eigenvalue of the pencil `(S, M)` for symmetric `S`
/// and positive definite `M`.
pub fn generalized_lambda_max(s: &Matrix, m: &Matrix) -> Result<f64> {
    let n = ensure_square(m)?;
    ensure_shape("generalized_lambda_max", s, n, n)?;
    if n == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let chol = nalgebra::Cholesky::new(symmetrize(m)).ok_or(LinalgError::NotPositiveDefinite)?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or(LinalgError::NotPositiveDefinite)?;
    let reduced = &l_inv * symmetrize(s) * l_inv.transpose();
    lambda_max(&symmetrize(&reduced))
}

/// Block-diagonal stacking of square or rectangular blocks.
pub fn block_diag(blocks: &[&Matrix]) -> Matrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r0, c0), b.shape()).copy_from(*b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}

/// Horizontal concatenation `[a | b]`.
pub fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.nrows(), b.nrows(), "hcat row mismatch");
    let mut out = Matrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

/// Vertical concatenation `[a; b]`.
pub fn vcat(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.ncols(), b.ncols(), "vcat column mismatch");
    let mut out = Matrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn sym_eigs_small_cases() {
        assert_eq!(sym_eigs(&Matrix::identity(2, 2)).unwrap(), vec![1.0, 1.0]);
        let d = sym_eigs(&m(2, 2, &[-1.0, 0.0, 0.0, 3.0])).unwrap();
        assert!((d[0] + 1.0).abs() < 1e-14 && (d[1] - 3.0).abs() < 1e-14);

        // 2x2 closed form: (tr -+ sqrt(tr^2 - 4 det)) / 2
        let x = m(2, 2, &[1.68, 0.4, 0.4, 0.23]);
        let (tr, det) = (1.91_f64, 1.68 * 0.23 - 0.16);
        let disc = (tr * tr - 4.0 * det).sqrt();
        let got = sym_eigs(&x).unwrap();
        assert!((got[0] - (tr - disc) / 2.0).abs() < 1e-13);
        assert!((got[1] - (tr + disc) / 2.0).abs() < 1e-13);
        assert!(got[0] > 0.0);
    }

    #[test]
    fn sym_eigs_rejects_bad_input() {
        assert!(matches!(
            sym_eigs(&Matrix::zeros(2, 3)),
            Err(LinalgError::NonSquare { .. })
        ));
        assert!(matches!(
            sym_eigs(&m(2, 2, &[1.0, 2.0, 0.0, 1.0])),
            Err(LinalgError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn spectral_radius_cases() {
        let rot = m(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!((spectral_radius(&rot).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(spectral_radius(&Matrix::zeros(3, 3)).unwrap(), 0.0);

        let mut delta = Matrix::zeros(4, 4);
        delta[(0, 2)] = 0.325;
        delta[(1, 3)] = 0.325;
        delta[(2, 1)] = 1.975;
        delta[(3, 0)] = 1.975;
        let scaled = delta * 0.5;
        let expected = (0.325_f64 * 1.975).sqrt() / 2.0;
        assert!((spectral_radius(&scaled).unwrap() - expected).abs() < 1e-12);
        assert!((gelfand_radius(&scaled) - expected).abs() < 1e-9);
    }

    #[test]
    fn image_and_kernel() {
        let p = m(2, 1, &[1.0, -2.0]);
        let img = image_basis(&p, TOL_RANK);
        assert_eq!(img.dim(), 1);
        let v = img.basis.column(0);
        let expect = [1.0 / 5f64.sqrt(), -2.0 / 5f64.sqrt()];
        let sign = v[0].signum();
        assert!((sign * v[0] - expect[0]).abs() < 1e-14);
        assert!((sign * v[1] - expect[1]).abs() < 1e-14);

        let ker = kernel_basis(&m(1, 2, &[1.0, 0.0]), TOL_RANK);
        assert_eq!(ker.dim(), 1);
        assert!(ker.basis[(0, 0)].abs() < 1e-14);
        assert!((ker.basis[(1, 0)].abs() - 1.0).abs() < 1e-14);

        assert!(image_basis(&Matrix::zeros(3, 2), TOL_RANK).is_empty());
        assert_eq!(kernel_basis(&Matrix::zeros(2, 3), TOL_RANK).dim(), 3);
    }

    #[test]
    fn subspace_contains_cases() {
        let ap = m(2, 1, &[-2.0, 2.0]);
        let gens = m(2, 2, &[1.0, 0.0, -2.0, 1.0]);
        let (ok, res) = subspace_contains(&ap, &gens, 1e-9).unwrap();
        assert!(ok && res < 1e-14);

        let (ok, res) = subspace_contains(&m(2, 1, &[1.0, 0.0]), &m(2, 1, &[0.0, 1.0]), 1e-9).unwrap();
        assert!(!ok && (res - 1.0).abs() < 1e-14);

        let (ok, res) = subspace_contains(&Matrix::zeros(2, 0), &gens, 1e-9).unwrap();
        assert!(ok && res == 0.0);

        assert!(subspace_contains(&Matrix::zeros(3, 1), &gens, 1e-9).is_err());
    }

    #[test]
    fn lstsq_cases() {
        let b = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let (x, r) = lstsq_solve(&Matrix::identity(2, 2), &b).unwrap();
        assert!((x - &b).norm() < 1e-14 && r < 1e-14);

        // [P | -B] [Ahat; Q] = A P for the double integrator with P = [1; -2]
        let a = m(2, 2, &[1.0, -0.0, -2.0, -1.0]);
        let (x, r) = lstsq_solve(&a, &m(2, 1, &[-2.0, 2.0])).unwrap();
        assert!((x[(0, 0)] + 2.0).abs() < 1e-14 && (x[(1, 0)] - 2.0).abs() < 1e-14);
        assert!(r < 1e-14);

        let (_, r) = lstsq_solve(&m(2, 1, &[1.0, 1.0]), &m(2, 1, &[1.0, -1.0])).unwrap();
        assert!(r > 1.0);
    }

    #[test]
    fn kron_lyap_scalar_cases() {
        let one = Matrix::identity(1, 1);
        let mm = kron_lyap_solve(&(-&one), &Matrix::zeros(1, 1), &[], 1.0, &one).unwrap();
        assert!((mm[(0, 0)] - 1.0).abs() < 1e-14);

        let jumps = vec![(4.2, &one * 0.1)];
        let mm = kron_lyap_solve(&(&one * -2.0), &(&one * 0.4), &jumps, 1.0, &one).unwrap();
        assert!((mm[(0, 0)] - 1.0 / 2.798).abs() < 1e-13);

        // operator -2M + 2M = 0 is singular
        let err = kron_lyap_solve(&(-&one), &Matrix::zeros(1, 1), &[], 2.0, &one);
        assert_eq!(err, Err(LinalgError::SingularOperator));
    }

    #[test]
    fn generalized_eigen_scaling() {
        let c = m(1, 2, &[2.0, 0.0]);
        let ctc = c.transpose() * &c;
        let g = generalized_lambda_max(&ctc, &Matrix::identity(2, 2)).unwrap();
        assert!((g - 4.0).abs() < 1e-14);
    }
}
