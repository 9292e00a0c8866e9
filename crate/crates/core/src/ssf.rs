//! Quadratic stochastic simulation functions `V(x, x̂) = (x - P x̂)^T M (x - P x̂)`.
//!
//! Synthesis of `(M, K)`, the interface `u = K(x - P x̂) + Q x̂ + R̃ û + S ŵ`,
//! the exact generator of `V` along a concrete/abstract pair, and the linear
//! gain slopes of the resulting certificate.

use nalgebra::Cholesky;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, Vector, TOL_EQ};
use crate::matrix_serde;
use crate::model::JlssSystem;
use crate::rng::{self, Role};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SsfError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no certificate found (best con11 margin {margin:e})")]
    Infeasible { margin: f64 },
    #[error("B^T M B is singular")]
    SingularGram,
    #[error("matrix is not positive definite")]
    NotPd,
    #[error("certificate invalid: {0}")]
    CertificateInvalid(String),
}

pub type Result<T> = std::result::Result<T, SsfError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverPath {
    /// Barrier method on the lifted linear matrix inequalities.
    Lmi,
    /// Fixed gain followed by a generalized Lyapunov solve.
    Lyapunov,
    /// Supplied by the caller.
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSsf {
    #[serde(rename = "M", with = "matrix_serde")]
    pub m: Matrix,
    #[serde(rename = "K", with = "matrix_serde")]
    pub k: Matrix,
    #[serde(rename = "P", with = "matrix_serde")]
    pub p: Matrix,
    #[serde(rename = "Q", with = "matrix_serde")]
    pub q: Matrix,
    #[serde(rename = "S", with = "matrix_serde")]
    pub s: Matrix,
    #[serde(rename = "R_tilde", with = "matrix_serde")]
    pub r_tilde: Matrix,
    pub kappa_hat: f64,
    pub pi: f64,
    pub solver_path: SolverPath,
}

impl QuadraticSsf {
    pub fn value(&self, x: &Vector, xh: &Vector) -> f64 {
        let e = x - &self.p * xh;
        e.dot(&(&self.m * &e))
    }

    /// Restores the shapes of empty matrices after deserialization.
    pub fn fit_shapes(mut self, sys: &JlssSystem, abs_sys: &JlssSystem) -> Self {
        let (n, m, p) = (sys.n(), sys.m(), sys.p());
        let (nh, mh) = (abs_sys.n(), abs_sys.m());
        self.k = matrix_serde::fit_empty(self.k, m, n);
        self.q = matrix_serde::fit_empty(self.q, m, nh);
        self.s = matrix_serde::fit_empty(self.s, m, p);
        self.r_tilde = matrix_serde::fit_empty(self.r_tilde, m, mh);
        self
    }
}

/// Linear gain slopes `alpha(s) = a s`, `eta(s) = h s`, `rho_ext(s) = r_e s`,
/// `rho_int(s) = r_i s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGains {
    pub a: f64,
    pub h: f64,
    pub r_e: f64,
    pub r_i: f64,
    /// How matrix norms in `r_e` and `r_i` were evaluated.
    pub norm_convention: String,
}

pub const NORM_CONVENTION: &str = "lambda_max(X^T M X)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignMargins {
    /// `lambda_min(M - C^T C)`.
    pub con1: f64,
    /// `-lambda_max` of the mean-square dissipation form plus `kappa_hat M`.
    pub con11: f64,
}

impl DesignMargins {
    pub fn satisfied(&self, tol: f64) -> bool {
        self.con1 >= -tol && self.con11 >= -tol
    }
}

fn dim_err(msg: impl Into<String>) -> SsfError {
    SsfError::Dimension(msg.into())
}

/// Margins of `C^T C <= M` and of the closed-loop mean-square decay inequality.
pub fn check_design_inequalities(
    sys: &JlssSystem,
    m: &Matrix,
    k: &Matrix,
    kappa_hat: f64,
) -> Result<DesignMargins> {
    let n = sys.n();
    if m.shape() != (n, n) {
        return Err(dim_err(format!("M is {:?}, expected {n}x{n}", m.shape())));
    }
    if k.shape() != (sys.m(), n) {
        return Err(dim_err(format!("K is {:?}, expected {}x{n}", k.shape(), sys.m())));
    }
    let ms = linalg::symmetrize(m);
    let ctc = sys.c.transpose() * &sys.c;
    let con1 = linalg::lambda_min(&(&ms - ctc))?;
    let abar = sys.closed_loop_mean_drift(k);
    let form = linalg::lyapunov_form(&abar, &sys.e, &sys.jump_pairs(), kappa_hat, &ms);
    let con11 = -linalg::lambda_max(&linalg::symmetrize(&form))?;
    Ok(DesignMargins { con1, con11 })
}

/// `c M` with `c = lambda_max(C^T C, M) (1 + 1e-9)` when that exceeds one,
/// so that `c M >= C^T C` survives rounding.
pub fn scale_for_con1(m: &Matrix, c: &Matrix) -> Result<Matrix> {
    if c.nrows() == 0 {
        return Ok(m.clone());
    }
    let ctc = c.transpose() * c;
    let g = linalg::generalized_lambda_max(&ctc, m).map_err(|e| match e {
        LinalgError::NotPositiveDefinite => SsfError::NotPd,
        other => other.into(),
    })?;
    Ok(if g >= 1.0 { m * (g * (1.0 + 1e-9)) } else { m.clone() })
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    /// Newton iteration budget of the barrier method.
    pub max_iters: usize,
    /// Gain used by the Lyapunov path instead of pole placement.
    pub user_k: Option<Matrix>,
    /// Skip the barrier method and go straight to the Lyapunov path.
    pub lyapunov_only: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            user_k: None,
            lyapunov_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub m: Matrix,
    pub k: Matrix,
    pub path: SolverPath,
    pub margins: DesignMargins,
}

/// Finds `(M, K)` satisfying both design inequalities. The barrier method
/// runs first; the Lyapunov path is the fallback. Either result is accepted
/// only after [`check_design_inequalities`] reports nonnegative margins.
pub fn synthesize_mk(sys: &JlssSystem, kappa_hat: f64, opts: &SynthOptions) -> Result<Synthesis> {
    let mut best_margin = f64::NEG_INFINITY;
    if !opts.lyapunov_only {
        if let Some((m, k)) = lmi::solve(sys, kappa_hat, opts.max_iters) {
            if let Ok(margins) = check_design_inequalities(sys, &m, &k, kappa_hat) {
                if margins.con1 >= 0.0 && margins.con11 >= 0.0 {
                    return Ok(Synthesis {
                        m,
                        k,
                        path: SolverPath::Lmi,
                        margins,
                    });
                }
                best_margin = best_margin.max(margins.con11.min(margins.con1));
            }
        }
    }
    match lyapunov_path(sys, kappa_hat, opts.user_k.as_ref()) {
        Ok(s) if s.margins.con1 >= 0.0 && s.margins.con11 >= 0.0 => Ok(s),
        Ok(s) => Err(SsfError::Infeasible {
            margin: best_margin.max(s.margins.con11.min(s.margins.con1)),
        }),
        Err(_) => Err(SsfError::Infeasible { margin: best_margin }),
    }
}

fn lyapunov_path(sys: &JlssSystem, kappa_hat: f64, user_k: Option<&Matrix>) -> Result<Synthesis> {
    let n = sys.n();
    let k = match user_k {
        Some(k) => k.clone(),
        None => pole_placement_gain(sys, kappa_hat).unwrap_or_else(|| Matrix::zeros(sys.m(), n)),
    };
    let abar = sys.closed_loop_mean_drift(&k);
    let eps = 1e-3 * sys.a.norm().max(1.0);
    let w = Matrix::identity(n, n) * eps;
    let m = linalg::kron_lyap_solve(&abar, &sys.e, &sys.jump_pairs(), kappa_hat, &w)?;
    if linalg::lambda_min(&m)? <= 0.0 {
        let margins = check_design_inequalities(sys, &m, &k, kappa_hat)?;
        return Err(SsfError::Infeasible {
            margin: margins.con11.min(linalg::lambda_min(&m)?),
        });
    }
    let m = scale_for_con1(&m, &sys.c)?;
    let margins = check_design_inequalities(sys, &m, &k, kappa_hat)?;
    let path = if user_k.is_some() {
        SolverPath::User
    } else {
        SolverPath::Lyapunov
    };
    Ok(Synthesis { m, k, path, margins })
}

/// Ackermann gain for single-input controllable systems, placing the
/// closed-loop poles far enough left to absorb the noise and jump terms.
fn pole_placement_gain(sys: &JlssSystem, kappa_hat: f64) -> Option<Matrix> {
    let n = sys.n();
    if sys.m() != 1 || n == 0 {
        return None;
    }
    let norm2 = |m: &Matrix| m.singular_values().max();
    let mut shift = (norm2(&sys.e).powi(2) + kappa_hat) / 2.0;
    for j in &sys.jumps {
        let r = norm2(&j.r);
        shift += j.rate * (r + r * r / 2.0);
    }
    let b = sys.b.column(0).into_owned();
    let mut ctrb = Matrix::zeros(n, n);
    let mut col = b;
    for i in 0..n {
        ctrb.set_column(i, &col);
        col = &sys.a * col;
    }
    let sv = ctrb.singular_values();
    if sv.min() <= 1e-9 * sv.max() {
        return None;
    }
    let ctrb_inv = ctrb.try_inverse()?;
    // phi(A) = prod (A - p_j I) with p_j = -(shift + 1 + j)
    let mut phi = Matrix::identity(n, n);
    for j in 0..n {
        let pole = -(shift + 1.0 + j as f64);
        phi = phi * (&sys.a - Matrix::identity(n, n) * pole);
    }
    let last = Matrix::from_row_slice(1, n, ctrb_inv.row(n - 1).transpose().as_slice());
    Some(-(last * phi))
}

mod lmi {
    //! Log-det barrier path following for the lifted design inequalities in
    //! `Mbar = M^{-1}`, `Kbar = K M^{-1}`, maximizing a common margin `t`.

    use super::*;

    /// The inequalities are homogeneous in `(Mbar, Kbar)` apart from the
    /// identity block of the output condition, so `Mbar <= I` loses nothing.
    const BOUND_M: f64 = 1.0;
    /// Gain bounds tried in turn, relative to `max(1, ||A||_F)`.
    const GAIN_SCALES: [f64; 4] = [10.0, 1e2, 1e3, 1e4];

    struct Layout {
        n: usize,
        m: usize,
        n_sym: usize,
    }

    impl Layout {
        fn vars(&self) -> usize {
            self.n_sym + self.m * self.n + 1
        }

        fn unpack(&self, z: &[f64]) -> (Matrix, Matrix, f64) {
            let n = self.n;
            let mut mbar = Matrix::zeros(n, n);
            let mut idx = 0;
            for i in 0..n {
                for j in i..n {
                    mbar[(i, j)] = z[idx];
                    mbar[(j, i)] = z[idx];
                    idx += 1;
                }
            }
            let kbar = Matrix::from_fn(self.m, n, |r, c| z[self.n_sym + r * n + c]);
            (mbar, kbar, z[self.vars() - 1])
        }
    }

    fn blocks(sys: &JlssSystem, kappa_hat: f64, bound_k: f64, layout: &Layout, z: &[f64]) -> Vec<Matrix> {
        let (n, m, q) = (sys.n(), sys.m(), sys.q());
        let (mbar, kbar, t) = layout.unpack(z);

        let mut con1 = Matrix::zeros(n + q, n + q);
        con1.view_mut((0, 0), (n, n)).copy_from(&mbar);
        let cm = &sys.c * &mbar;
        con1.view_mut((n, 0), (q, n)).copy_from(&cm);
        con1.view_mut((0, n), (n, q)).copy_from(&cm.transpose());
        con1.view_mut((n, n), (q, q)).copy_from(&Matrix::identity(q, q));
        con1 -= Matrix::identity(n + q, n + q) * t;

        let mut side: Vec<Matrix> = Vec::new();
        if linalg::max_abs(&sys.e) > 0.0 {
            side.push(&sys.e * &mbar);
        }
        let mut a_jump = sys.a.clone();
        for j in &sys.jumps {
            a_jump += &j.r * j.rate;
            if j.rate > 0.0 && linalg::max_abs(&j.r) > 0.0 {
                side.push(&j.r * &mbar * j.rate.sqrt());
            }
        }
        let bk = &sys.b * &kbar;
        let qbar = -(&mbar * kappa_hat)
            - &mbar * a_jump.transpose()
            - &a_jump * &mbar
            - bk.transpose()
            - bk;
        let size = n * (side.len() + 1);
        let mut con11 = Matrix::zeros(size, size);
        let last = n * side.len();
        for (i, s) in side.iter().enumerate() {
            con11.view_mut((i * n, i * n), (n, n)).copy_from(&mbar);
            con11.view_mut((i * n, last), (n, n)).copy_from(s);
            con11.view_mut((last, i * n), (n, n)).copy_from(&s.transpose());
        }
        con11.view_mut((last, last), (n, n)).copy_from(&qbar);
        con11 -= Matrix::identity(size, size) * t;

        let mut out = vec![con1, con11, Matrix::identity(n, n) * BOUND_M - &mbar];
        if m > 0 {
            let mut kb = Matrix::zeros(m + n, m + n);
            kb.view_mut((0, 0), (m, m)).copy_from(&(Matrix::identity(m, m) * bound_k));
            kb.view_mut((m, m), (n, n)).copy_from(&(Matrix::identity(n, n) * bound_k));
            kb.view_mut((0, m), (m, n)).copy_from(&kbar);
            kb.view_mut((m, 0), (n, m)).copy_from(&kbar.transpose());
            out.push(kb);
        }
        out
    }

    /// `F_b(z) = F0_b + sum_i z_i Fi_b` for every block `b`.
    struct Affine {
        base: Vec<Matrix>,
        coeffs: Vec<Vec<Matrix>>,
    }

    impl Affine {
        fn eval(&self, z: &[f64]) -> Vec<Matrix> {
            self.base
                .iter()
                .enumerate()
                .map(|(b, f0)| {
                    let mut f = f0.clone();
                    for (i, zi) in z.iter().enumerate() {
                        if *zi != 0.0 {
                            f += &self.coeffs[b][i] * *zi;
                        }
                    }
                    f
                })
                .collect()
        }
    }

    fn neg_log_det(blocks: &[Matrix]) -> Option<f64> {
        let mut acc = 0.0;
        for b in blocks {
            let chol = Cholesky::new(linalg::symmetrize(b))?;
            let l = chol.l_dirty();
            for i in 0..b.nrows() {
                acc -= 2.0 * l[(i, i)].ln();
            }
        }
        Some(acc)
    }

    /// Tries increasing gain bounds and returns the first strictly feasible design.
    pub(super) fn solve(sys: &JlssSystem, kappa_hat: f64, max_iters: usize) -> Option<(Matrix, Matrix)> {
        let scale = sys.a.norm().max(1.0);
        let scales: &[f64] = if sys.m() == 0 { &GAIN_SCALES[..1] } else { &GAIN_SCALES };
        scales
            .iter()
            .find_map(|g| solve_bounded(sys, kappa_hat, g * scale, max_iters))
    }

    fn solve_bounded(sys: &JlssSystem, kappa_hat: f64, bound_k: f64, max_iters: usize) -> Option<(Matrix, Matrix)> {
        let n = sys.n();
        if n == 0 {
            return None;
        }
        let layout = Layout {
            n,
            m: sys.m(),
            n_sym: n * (n + 1) / 2,
        };
        let nv = layout.vars();
        let zero = vec![0.0; nv];
        let base = blocks(sys, kappa_hat, bound_k, &layout, &zero);
        let coeffs_by_var: Vec<Vec<Matrix>> = (0..nv)
            .map(|i| {
                let mut e = zero.clone();
                e[i] = 1.0;
                blocks(sys, kappa_hat, bound_k, &layout, &e)
                    .into_iter()
                    .zip(&base)
                    .map(|(f, f0)| f - f0)
                    .collect()
            })
            .collect();
        let nb = base.len();
        let coeffs: Vec<Vec<Matrix>> = (0..nb)
            .map(|b| (0..nv).map(|i| coeffs_by_var[i][b].clone()).collect())
            .collect();
        let affine = Affine { base, coeffs };
        let barrier_dim: f64 = affine.base.iter().map(|b| b.nrows() as f64).sum();

        // Start from Mbar = I / 2, Kbar = 0 and a margin low enough to be strictly feasible.
        let mut z = zero.clone();
        let mut idx = 0;
        for i in 0..n {
            for j in i..n {
                if i == j {
                    z[idx] = 0.5 * BOUND_M;
                }
                idx += 1;
            }
        }
        let at_t0 = affine.eval(&z);
        let lowest = at_t0[..2]
            .iter()
            .map(|b| linalg::lambda_min(&linalg::symmetrize(b)).unwrap_or(f64::NEG_INFINITY))
            .fold(f64::INFINITY, f64::min);
        z[nv - 1] = lowest - 1.0;

        let t_idx = nv - 1;
        let mut tau = 1.0;
        let mut iters = 0;
        while iters < max_iters {
            loop {
                iters += 1;
                let fz = affine.eval(&z);
                let mut grad = vec![0.0; nv];
                let mut hess = Matrix::zeros(nv, nv);
                grad[t_idx] -= tau;
                for (b, f) in fz.iter().enumerate() {
                    let chol = match Cholesky::new(linalg::symmetrize(f)) {
                        Some(c) => c,
                        None => return None,
                    };
                    let g: Vec<Matrix> = affine.coeffs[b].iter().map(|fi| chol.solve(fi)).collect();
                    for i in 0..nv {
                        grad[i] -= g[i].trace();
                        for j in i..nv {
                            let v = g[i].component_mul(&g[j].transpose()).sum();
                            hess[(i, j)] += v;
                            if i != j {
                                hess[(j, i)] += v;
                            }
                        }
                    }
                }
                let gvec = Vector::from_vec(grad.clone());
                let step = match Cholesky::new(hess.clone()) {
                    Some(c) => c.solve(&(-&gvec)),
                    None => hess.clone().lu().solve(&(-&gvec))?,
                };
                let decrement = -gvec.dot(&step);
                if !(decrement.is_finite()) {
                    return None;
                }
                if decrement / 2.0 < 1e-10 || iters >= max_iters {
                    break;
                }
                let f_cur = neg_log_det(&fz)? - tau * z[t_idx];
                let mut s = 1.0;
                let mut accepted = false;
                while s > 1e-12 {
                    let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, d)| a + s * d).collect();
                    if let Some(val) = neg_log_det(&affine.eval(&trial)) {
                        let f_new = val - tau * trial[t_idx];
                        if f_new <= f_cur - 0.25 * s * decrement {
                            z = trial;
                            accepted = true;
                            break;
                        }
                    }
                    s *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
            if barrier_dim / tau < 1e-9 {
                break;
            }
            tau *= 8.0;
        }

        let (mbar, kbar, t) = layout.unpack(&z);
        if t <= 0.0 {
            return None;
        }
        let m = linalg::symmetrize(&mbar.try_inverse()?);
        let k = kbar * &m;
        // Smallest multiple of M that still dominates C^T C.
        if sys.q() > 0 {
            let g = linalg::generalized_lambda_max(&(sys.c.transpose() * &sys.c), &m).ok()?;
            if g > 0.0 {
                return Some((m * (g * (1.0 + 1e-9)), k));
            }
        }
        Some((m, k))
    }
}

/// `R̃ = (B^T M B)^{-1} B^T M P B̂`, the minimizer of the external gain.
pub fn compute_r_tilde(m: &Matrix, b: &Matrix, p: &Matrix, bhat: &Matrix) -> Result<Matrix> {
    if b.ncols() == 0 {
        return Ok(Matrix::zeros(0, bhat.ncols()));
    }
    if p.ncols() != bhat.nrows() || m.nrows() != b.nrows() || p.nrows() != b.nrows() {
        return Err(dim_err("compute_r_tilde operands"));
    }
    let gram = linalg::symmetrize(&(b.transpose() * m * b));
    let scale = linalg::max_abs(&gram);
    if scale == 0.0 {
        return Err(SsfError::SingularGram);
    }
    let chol = Cholesky::new(gram.clone()).ok_or(SsfError::SingularGram)?;
    let diag_min = (0..gram.nrows())
        .map(|i| chol.l_dirty()[(i, i)].powi(2))
        .fold(f64::INFINITY, f64::min);
    if diag_min <= 1e-14 * scale {
        return Err(SsfError::SingularGram);
    }
    Ok(chol.solve(&(b.transpose() * m * p * bhat)))
}

/// `u = K (x - P x̂) + Q x̂ + R̃ û + S ŵ`.
pub fn interface_u(ssf: &QuadraticSsf, x: &Vector, xh: &Vector, uh: &Vector, wh: &Vector) -> Vector {
    &ssf.k * (x - &ssf.p * xh) + &ssf.q * xh + &ssf.r_tilde * uh + &ssf.s * wh
}

/// Exact generator of `V` along the pair driven by shared noise and jumps.
#[allow(clippy::too_many_arguments)]
pub fn generator_quadratic(
    ssf: &QuadraticSsf,
    sys: &JlssSystem,
    abs_sys: &JlssSystem,
    x: &Vector,
    xh: &Vector,
    u: &Vector,
    uh: &Vector,
    w: &Vector,
    wh: &Vector,
) -> Result<f64> {
    if sys.jumps.len() != abs_sys.jumps.len() {
        return Err(dim_err("concrete and abstract jump lists differ in length"));
    }
    if x.len() != sys.n()
        || xh.len() != abs_sys.n()
        || u.len() != sys.m()
        || uh.len() != abs_sys.m()
        || w.len() != sys.p()
        || wh.len() != abs_sys.p()
    {
        return Err(dim_err("generator arguments"));
    }
    let m = &ssf.m;
    let p = &ssf.p;
    let e = x - p * xh;
    let drift = sys.drift(x, u, w) - p * abs_sys.drift(xh, uh, wh);
    let mut l = 2.0 * e.dot(&(m * drift));
    let diff = &sys.e * x - p * (&abs_sys.e * xh);
    l += diff.dot(&(m * &diff));
    let v0 = e.dot(&(m * &e));
    for (jc, ja) in sys.jumps.iter().zip(&abs_sys.jumps) {
        let ej = &e + &jc.r * x - p * (&ja.r * xh);
        l += jc.rate * (ej.dot(&(m * &ej)) - v0);
    }
    Ok(l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Con2Residuals {
    /// `||A P - P Â + B Q||_F`
    pub drift: f64,
    /// `||D - P D̂ + B S||_F`
    pub internal_input: f64,
    /// `||C P - Ĉ||_F`
    pub output: f64,
    /// `||E P - P Ê||_F`
    pub diffusion: f64,
    /// `max_i ||R_i P - P R̂_i||_F`
    pub reset: f64,
}

impl Con2Residuals {
    pub fn max(&self) -> f64 {
        [self.drift, self.internal_input, self.output, self.diffusion, self.reset]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

pub fn con2_residuals(ssf: &QuadraticSsf, sys: &JlssSystem, abs_sys: &JlssSystem) -> Result<Con2Residuals> {
    let p = &ssf.p;
    if p.shape() != (sys.n(), abs_sys.n())
        || ssf.q.shape() != (sys.m(), abs_sys.n())
        || ssf.s.shape() != (sys.m(), sys.p())
        || abs_sys.p() != sys.p()
        || abs_sys.q() != sys.q()
        || abs_sys.jumps.len() != sys.jumps.len()
    {
        return Err(dim_err("certificate and system shapes disagree"));
    }
    let reset = sys
        .jumps
        .iter()
        .zip(&abs_sys.jumps)
        .map(|(jc, ja)| (&jc.r * p - p * &ja.r).norm())
        .fold(0.0, f64::max);
    Ok(Con2Residuals {
        drift: (&sys.a * p - p * &abs_sys.a + &sys.b * &ssf.q).norm(),
        internal_input: (&sys.d - p * &abs_sys.d + &sys.b * &ssf.s).norm(),
        output: (&sys.c * p - &abs_sys.c).norm(),
        diffusion: (&sys.e * p - p * &abs_sys.e).norm(),
        reset,
    })
}

/// Gain slopes of a valid certificate.
pub fn extract_gains(ssf: &QuadraticSsf, sys: &JlssSystem, abs_sys: &JlssSystem) -> Result<LinearGains> {
    if !(ssf.pi > 0.0 && ssf.pi < ssf.kappa_hat) {
        return Err(SsfError::CertificateInvalid(format!(
            "pi = {} must lie in (0, kappa_hat = {})",
            ssf.pi, ssf.kappa_hat
        )));
    }
    let margins = check_design_inequalities(sys, &ssf.m, &ssf.k, ssf.kappa_hat)?;
    let scale = 1.0 + linalg::max_abs(&ssf.m);
    if !margins.satisfied(TOL_EQ * scale) {
        return Err(SsfError::CertificateInvalid(format!(
            "design margins con1 = {:e}, con11 = {:e}",
            margins.con1, margins.con11
        )));
    }
    let res = con2_residuals(ssf, sys, abs_sys)?;
    if res.max() > TOL_EQ * (1.0 + linalg::max_abs(&sys.a) * linalg::max_abs(&ssf.p)) {
        return Err(SsfError::CertificateInvalid(format!(
            "abstraction equations residual {:e}",
            res.max()
        )));
    }
    let mismatch = &sys.b * &ssf.r_tilde - &ssf.p * &abs_sys.b;
    let r_e = 2.0 * linalg::weighted_norm_sq(&mismatch, &ssf.m)? / ssf.pi;
    let r_i = 2.0 * linalg::weighted_norm_sq(&sys.d, &ssf.m)? / ssf.pi;
    Ok(LinearGains {
        a: 1.0,
        h: ssf.kappa_hat - ssf.pi,
        r_e,
        r_i,
        norm_convention: NORM_CONVENTION.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub margins: DesignMargins,
    pub con2: Con2Residuals,
    pub samples: usize,
    /// Smallest `-h V + r_e |û|^2 + r_i |w - ŵ|^2 - LV` over the samples.
    pub worst_slack: f64,
    /// Smallest `V - |C x - Ĉ x̂|^2` over the samples.
    pub worst_sandwich: f64,
    pub passed: bool,
}

const CHUNK: usize = 1024;

/// Algebraic residuals plus a randomized check of the dissipation inequality
/// with the interface supplying `u`. Samples are drawn in `[-10, 10]`.
pub fn verify_ssf(
    ssf: &QuadraticSsf,
    sys: &JlssSystem,
    abs_sys: &JlssSystem,
    gains: &LinearGains,
    trials: usize,
    seed: u64,
) -> Result<VerifyReport> {
    let margins = check_design_inequalities(sys, &ssf.m, &ssf.k, ssf.kappa_hat)?;
    let con2 = con2_residuals(ssf, sys, abs_sys)?;
    let chunks = trials.div_ceil(CHUNK);
    let per_chunk: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(seed, c as u64, Role::Sampling);
            let count = CHUNK.min(trials - c * CHUNK);
            let mut worst = (f64::INFINITY, f64::INFINITY);
            let mut draw = |len: usize| Vector::from_fn(len, |_, _| rng.random_range(-10.0..=10.0));
            for _ in 0..count {
                let x = draw(sys.n());
                let xh = draw(abs_sys.n());
                let uh = draw(abs_sys.m());
                let w = draw(sys.p());
                let wh = draw(sys.p());
                let u = interface_u(ssf, &x, &xh, &uh, &wh);
                let l = generator_quadratic(ssf, sys, abs_sys, &x, &xh, &u, &uh, &w, &wh)
                    .expect("shapes checked");
                let v = ssf.value(&x, &xh);
                let slack = -gains.h * v + gains.r_e * uh.norm_squared()
                    + gains.r_i * (&w - &wh).norm_squared()
                    - l;
                let out_gap = (&sys.c * &x - &abs_sys.c * &xh).norm_squared();
                worst.0 = worst.0.min(slack);
                worst.1 = worst.1.min(gains.a * v - out_gap);
            }
            worst
        })
        .collect();
    let (worst_slack, worst_sandwich) = per_chunk
        .into_iter()
        .fold((f64::INFINITY, f64::INFINITY), |acc, w| (acc.0.min(w.0), acc.1.min(w.1)));
    let scale = 1.0 + linalg::max_abs(&ssf.m);
    let passed = margins.satisfied(TOL_EQ * scale)
        && con2.max() <= TOL_EQ * (1.0 + linalg::max_abs(&sys.a) * linalg::max_abs(&ssf.p))
        && (trials == 0 || (worst_slack >= -TOL_EQ && worst_sandwich >= -TOL_EQ));
    Ok(VerifyReport {
        margins,
        con2,
        samples: trials,
        worst_slack,
        worst_sandwich,
        passed,
    })
}
