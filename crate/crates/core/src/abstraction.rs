//! Construction of a reduced-order abstraction for one subsystem, following
//! the nine-step pipeline: certificate synthesis, checks on `P`, solves for
//! the abstract matrices, choice of `B̂`, and packaging with verified gains.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix, TOL_EQ, TOL_RANK};
use crate::matrix_serde;
use crate::model::{JlssSystem, Jump};
use crate::ssf::{self, LinearGains, QuadraticSsf, SsfError, SynthOptions, VerifyReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AbstractionError {
    #[error("step {step}: {source}")]
    Ssf {
        step: u8,
        #[source]
        source: SsfError,
    },
    #[error("step {step}: P is not injective (rank {rank} < {cols})")]
    PNotInjective { step: u8, rank: usize, cols: usize },
    #[error("step {step}: condition {condition} violated (residual {residual:e})")]
    ConditionViolated {
        step: u8,
        condition: String,
        residual: f64,
    },
    #[error("step {step}: no (P_hat, G, F) satisfies the output and inverse conditions: {reason}")]
    Con3Unsatisfiable { step: u8, reason: String },
    #[error("step {step}: P_hat E G F = 0 or P_hat R_i G F = 0 fails (residual {residual:e})")]
    Con3deViolated { step: u8, residual: f64 },
    #[error("step {step}: user-supplied B_hat has {rows} rows, expected {expected}")]
    BhatShape { step: u8, rows: usize, expected: usize },
    #[error("certificate verification failed: {0}")]
    VerificationFailed(String),
}

impl AbstractionError {
    /// Pipeline step (1 to 9) at which the failure occurred; 0 for the final verification.
    pub fn step(&self) -> u8 {
        match self {
            Self::Ssf { step, .. }
            | Self::PNotInjective { step, .. }
            | Self::ConditionViolated { step, .. }
            | Self::Con3Unsatisfiable { step, .. }
            | Self::Con3deViolated { step, .. }
            | Self::BhatShape { step, .. } => *step,
            Self::VerificationFailed(_) => 0,
        }
    }
}

pub type Result<T> = std::result::Result<T, AbstractionError>;

#[derive(Debug, Clone, PartialEq)]
pub enum BhatMode {
    /// `B̂ = I`.
    Identity,
    /// `B̂ = [P̂ B, P̂ A G]`, preserving every concrete output trajectory.
    BehaviorPreserving,
    User(Matrix),
}

#[derive(Debug, Clone)]
pub struct AbstractionOptions {
    pub kappa_hat: f64,
    pub pi: f64,
    pub bhat: BhatMode,
    pub synth: SynthOptions,
    /// Certificate supplied instead of synthesized.
    pub user_mk: Option<(Matrix, Matrix)>,
    pub verify_samples: usize,
    pub seed: u64,
}

impl Default for AbstractionOptions {
    fn default() -> Self {
        Self {
            kappa_hat: 1.0,
            pi: 0.5,
            bhat: BhatMode::Identity,
            synth: SynthOptions::default(),
            user_mk: None,
            verify_samples: 10_000,
            seed: 0,
        }
    }
}

impl AbstractionOptions {
    /// `pi` defaults to `kappa_hat / 2`.
    pub fn with_kappa(kappa_hat: f64) -> Self {
        Self {
            kappa_hat,
            pi: kappa_hat / 2.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Containment {
    pub holds: bool,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PConditionsReport {
    pub injective: bool,
    /// `im A P ⊆ im P + im B`
    pub drift: Containment,
    /// `im D ⊆ im P + im B`
    pub internal_input: Containment,
    /// `im E P ⊆ im P`
    pub diffusion: Containment,
    /// `im R_i P ⊆ im P` for each reset
    pub resets: Vec<Containment>,
    /// `im P + ker C = R^n`
    pub output_complement: bool,
}

impl PConditionsReport {
    pub fn abstraction_ok(&self) -> bool {
        self.injective
            && self.drift.holds
            && self.internal_input.holds
            && self.diffusion.holds
            && self.resets.iter().all(|r| r.holds)
    }
}

fn contains(target: &Matrix, generators: &Matrix, tol: f64) -> Containment {
    let scale = 1.0 + target.norm();
    let (holds, residual) =
        linalg::subspace_contains(target, generators, tol * scale).expect("row counts agree");
    Containment { holds, residual }
}

fn rank(m: &Matrix) -> usize {
    linalg::image_basis(m, TOL_RANK).dim()
}

/// Geometric conditions on `P` under which the abstract matrices exist.
pub fn check_p_conditions(sys: &JlssSystem, p: &Matrix, tol: f64) -> PConditionsReport {
    let n = sys.n();
    assert_eq!(p.nrows(), n, "P must have n rows");
    let pb = linalg::hcat(p, &sys.b);
    let ker_c = linalg::kernel_basis(&sys.c, TOL_RANK);
    PConditionsReport {
        injective: rank(p) == p.ncols(),
        drift: contains(&(&sys.a * p), &pb, tol),
        internal_input: contains(&sys.d, &pb, tol),
        diffusion: contains(&(&sys.e * p), p, tol),
        resets: sys.jumps.iter().map(|j| contains(&(&j.r * p), p, tol)).collect(),
        output_complement: rank(&linalg::hcat(p, &ker_c.basis)) == n,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Con2Solution {
    pub a_hat: Matrix,
    pub q: Matrix,
    pub d_hat: Matrix,
    pub s: Matrix,
    pub c_hat: Matrix,
    pub e_hat: Matrix,
    pub r_hats: Vec<Matrix>,
}

fn solve_checked(a: &Matrix, b: &Matrix, step: u8, condition: &str) -> Result<Matrix> {
    let (x, residual) = linalg::lstsq_solve(a, b).expect("row counts agree");
    if residual > TOL_EQ * (1.0 + b.norm()) {
        return Err(AbstractionError::ConditionViolated {
            step,
            condition: condition.to_string(),
            residual,
        });
    }
    Ok(x)
}

/// Solves `rhs = P X - B Y`, taking `Y = 0` whenever `P X = rhs` is solvable.
fn solve_split(p: &Matrix, b: &Matrix, rhs: &Matrix, step: u8, condition: &str) -> Result<(Matrix, Matrix)> {
    let (x, residual) = linalg::lstsq_solve(p, rhs).expect("row counts agree");
    if residual <= TOL_EQ * (1.0 + rhs.norm()) {
        return Ok((x, Matrix::zeros(b.ncols(), rhs.ncols())));
    }
    let nh = p.ncols();
    let xy = solve_checked(&linalg::hcat(p, &(-b)), rhs, step, condition)?;
    Ok((xy.rows(0, nh).into_owned(), xy.rows(nh, b.ncols()).into_owned()))
}

/// Least-squares solves of `A P = P Â - B Q`, `D = P D̂ - B S`, `Ĉ = C P`,
/// `E P = P Ê`, `R_i P = P R̂_i`.
pub fn solve_con2(sys: &JlssSystem, p: &Matrix) -> Result<Con2Solution> {
    let (a_hat, q) = solve_split(p, &sys.b, &(&sys.a * p), 3, "A P = P A_hat - B Q")?;
    let (d_hat, s) = solve_split(p, &sys.b, &sys.d, 4, "D = P D_hat - B S")?;
    let c_hat = &sys.c * p;
    let e_hat = solve_checked(p, &(&sys.e * p), 8, "E P = P E_hat")?;
    let r_hats = sys
        .jumps
        .iter()
        .map(|j| solve_checked(p, &(&j.r * p), 9, "R_i P = P R_hat_i"))
        .collect::<Result<Vec<_>>>()?;
    Ok(Con2Solution {
        a_hat,
        q,
        d_hat,
        s,
        c_hat,
        e_hat,
        r_hats,
    })
}

/// Zeroes every column of `D̂` whose concrete column lies in `im B`, moving
/// that coupling entirely into `S`.
pub fn zero_redundant_dhat(
    sys: &JlssSystem,
    d_hat: &Matrix,
    s: &Matrix,
    _p: &Matrix,
    tol: f64,
) -> (Matrix, Matrix) {
    let mut d_out = d_hat.clone();
    let mut s_out = s.clone();
    if sys.m() == 0 {
        return (d_out, s_out);
    }
    for j in 0..sys.p() {
        let col = sys.d.column(j).into_owned();
        let colm = Matrix::from_column_slice(col.len(), 1, col.as_slice());
        let (x, residual) = linalg::lstsq_solve(&sys.b, &colm).expect("row counts agree");
        if residual <= tol * (1.0 + colm.norm()) {
            d_out.column_mut(j).fill(0.0);
            s_out.set_column(j, &(-x.column(0)));
        }
    }
    (d_out, s_out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPreservingData {
    #[serde(rename = "P_hat", with = "matrix_serde")]
    pub p_hat: Matrix,
    #[serde(rename = "G", with = "matrix_serde")]
    pub g: Matrix,
    #[serde(rename = "F", with = "matrix_serde")]
    pub f: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Con3Residuals {
    /// `||C - Ĉ P̂||`
    pub output: f64,
    /// `||I - P P̂ - G F||`
    pub resolution: f64,
    /// `||I - P̂ P||`
    pub left_inverse: f64,
    /// `||P̂ E G F||`
    pub diffusion: f64,
    /// `max_i ||P̂ R_i G F||`
    pub reset: f64,
}

pub fn con3_residuals(sys: &JlssSystem, p: &Matrix, c_hat: &Matrix, bp: &BehaviorPreservingData) -> Con3Residuals {
    let n = sys.n();
    let nh = p.ncols();
    let gf = &bp.g * &bp.f;
    Con3Residuals {
        output: (&sys.c - c_hat * &bp.p_hat).norm(),
        resolution: (Matrix::identity(n, n) - p * &bp.p_hat - &gf).norm(),
        left_inverse: (Matrix::identity(nh, nh) - &bp.p_hat * p).norm(),
        diffusion: (&bp.p_hat * &sys.e * &gf).norm(),
        reset: sys
            .jumps
            .iter()
            .map(|j| (&bp.p_hat * &j.r * &gf).norm())
            .fold(0.0, f64::max),
    }
}

/// Complement of `im P`, preferring standard basis vectors inside `ker C`,
/// then an orthonormal basis of `ker C`, then remaining standard vectors.
fn complement_basis(p: &Matrix, c: &Matrix) -> Matrix {
    let n = p.nrows();
    let ker_c = linalg::kernel_basis(c, TOL_RANK);
    let eye = Matrix::identity(n, n);
    let c_scale = 1.0 + c.norm();
    let mut candidates: Vec<Matrix> = Vec::new();
    for i in 0..n {
        let e = eye.columns(i, 1).into_owned();
        if (c * &e).norm() <= TOL_EQ * c_scale {
            candidates.push(e);
        }
    }
    for i in 0..ker_c.dim() {
        candidates.push(ker_c.basis.columns(i, 1).into_owned());
    }
    for i in 0..n {
        candidates.push(eye.columns(i, 1).into_owned());
    }
    let mut acc = p.clone();
    let mut g = Matrix::zeros(n, 0);
    for v in candidates {
        if acc.ncols() == n {
            break;
        }
        let trial = linalg::hcat(&acc, &v);
        if rank(&trial) == trial.ncols() {
            acc = trial;
            g = linalg::hcat(&g, &v);
        }
    }
    g
}

/// Chooses `B̂`. In behavior-preserving mode also returns `(P̂, G, F)` with
/// `[P̂; F] = [P G]^{-1}`.
pub fn choose_bhat(
    sys: &JlssSystem,
    p: &Matrix,
    c_hat: &Matrix,
    mode: &BhatMode,
) -> Result<(Matrix, Option<BehaviorPreservingData>)> {
    let nh = p.ncols();
    match mode {
        BhatMode::Identity => Ok((Matrix::identity(nh, nh), None)),
        BhatMode::User(b) => {
            if b.nrows() != nh {
                return Err(AbstractionError::BhatShape {
                    step: 6,
                    rows: b.nrows(),
                    expected: nh,
                });
            }
            Ok((b.clone(), None))
        }
        BhatMode::BehaviorPreserving => {
            let n = sys.n();
            let ker_c = linalg::kernel_basis(&sys.c, TOL_RANK);
            if rank(&linalg::hcat(p, &ker_c.basis)) != n {
                return Err(AbstractionError::Con3Unsatisfiable {
                    step: 2,
                    reason: "im P + ker C does not span the state space".to_string(),
                });
            }
            let g = complement_basis(p, &sys.c);
            let full = linalg::hcat(p, &g);
            let inv = full.clone().try_inverse().ok_or_else(|| AbstractionError::Con3Unsatisfiable {
                step: 6,
                reason: "[P G] is singular".to_string(),
            })?;
            let bp = BehaviorPreservingData {
                p_hat: inv.rows(0, nh).into_owned(),
                g: g.clone(),
                f: inv.rows(nh, n - nh).into_owned(),
            };
            let res = con3_residuals(sys, p, c_hat, &bp);
            let scale = 1.0 + full.norm() * inv.norm();
            let abc = res.output.max(res.resolution).max(res.left_inverse);
            if abc > TOL_EQ * scale {
                return Err(AbstractionError::Con3Unsatisfiable {
                    step: 6,
                    reason: format!("residual {abc:e}"),
                });
            }
            let de = res.diffusion.max(res.reset);
            if de > TOL_EQ * scale {
                return Err(AbstractionError::Con3deViolated { step: 6, residual: de });
            }
            let b_hat = linalg::hcat(&(&bp.p_hat * &sys.b), &(&bp.p_hat * &sys.a * &bp.g));
            Ok((b_hat, Some(bp)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u8,
    pub action: String,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractionResult {
    pub abs_sys: JlssSystem,
    pub ssf: QuadraticSsf,
    pub gains: LinearGains,
    pub bp: Option<BehaviorPreservingData>,
    pub p_conditions: PConditionsReport,
    pub steps: Vec<StepLog>,
    pub verification: VerifyReport,
}

impl AbstractionResult {
    pub fn from_json(text: &str, sys: &JlssSystem) -> std::result::Result<Self, String> {
        let mut r: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        r.abs_sys = fit_abstract_shapes(r.abs_sys, sys);
        r.ssf = r.ssf.fit_shapes(sys, &r.abs_sys);
        Ok(r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("abstraction serializes")
    }
}

fn fit_abstract_shapes(mut abs_sys: JlssSystem, sys: &JlssSystem) -> JlssSystem {
    let nh = abs_sys.n();
    abs_sys.d = matrix_serde::fit_empty(abs_sys.d, nh, sys.p());
    abs_sys.c = matrix_serde::fit_empty(abs_sys.c, sys.q(), nh);
    abs_sys
}

fn ssf_err(step: u8) -> impl Fn(SsfError) -> AbstractionError {
    move |source| AbstractionError::Ssf { step, source }
}

/// Runs the full pipeline for one subsystem.
pub fn build_abstraction(sys: &JlssSystem, p: &Matrix, opts: &AbstractionOptions) -> Result<AbstractionResult> {
    let mut steps = Vec::new();

    // 1. certificate (M, K)
    let (m, k, path) = match &opts.user_mk {
        Some((m, k)) => (m.clone(), k.clone(), ssf::SolverPath::User),
        None => {
            let s = ssf::synthesize_mk(sys, opts.kappa_hat, &opts.synth).map_err(ssf_err(1))?;
            (s.m, s.k, s.path)
        }
    };
    let margins = ssf::check_design_inequalities(sys, &m, &k, opts.kappa_hat).map_err(ssf_err(1))?;
    steps.push(StepLog {
        step: 1,
        action: format!("M, K via {path:?} (con1 margin {:e})", margins.con1),
        residual: (-margins.con11).max(0.0),
    });

    // 2. conditions on P
    if p.nrows() != sys.n() {
        return Err(AbstractionError::PNotInjective {
            step: 2,
            rank: 0,
            cols: p.ncols(),
        });
    }
    let report = check_p_conditions(sys, p, TOL_EQ);
    if !report.injective {
        return Err(AbstractionError::PNotInjective {
            step: 2,
            rank: rank(p),
            cols: p.ncols(),
        });
    }
    let named = [
        ("im A P in im P + im B", &report.drift),
        ("im D in im P + im B", &report.internal_input),
        ("im E P in im P", &report.diffusion),
    ];
    for (name, c) in named.into_iter().chain(report.resets.iter().map(|r| ("im R_i P in im P", r))) {
        if !c.holds {
            return Err(AbstractionError::ConditionViolated {
                step: 2,
                condition: name.to_string(),
                residual: c.residual,
            });
        }
    }
    if opts.bhat == BhatMode::BehaviorPreserving && !report.output_complement {
        return Err(AbstractionError::Con3Unsatisfiable {
            step: 2,
            reason: "im P + ker C does not span the state space".to_string(),
        });
    }
    steps.push(StepLog {
        step: 2,
        action: "P satisfies the containment conditions".to_string(),
        residual: report
            .resets
            .iter()
            .map(|r| r.residual)
            .fold(report.drift.residual.max(report.internal_input.residual).max(report.diffusion.residual), f64::max),
    });

    // 3-5, 8, 9
    let sol = solve_con2(sys, p)?;
    let (d_hat, s) = zero_redundant_dhat(sys, &sol.d_hat, &sol.s, p, TOL_EQ);
    steps.push(StepLog {
        step: 3,
        action: "A_hat, Q".to_string(),
        residual: (&sys.a * p - p * &sol.a_hat + &sys.b * &sol.q).norm(),
    });
    steps.push(StepLog {
        step: 4,
        action: "D_hat, S (redundant columns moved into S)".to_string(),
        residual: (&sys.d - p * &d_hat + &sys.b * &s).norm(),
    });
    steps.push(StepLog {
        step: 5,
        action: "C_hat = C P".to_string(),
        residual: 0.0,
    });

    // 6. B_hat
    let (b_hat, bp) = choose_bhat(sys, p, &sol.c_hat, &opts.bhat)?;
    steps.push(StepLog {
        step: 6,
        action: match (&opts.bhat, &bp) {
            (BhatMode::Identity, _) => "B_hat = I".to_string(),
            (BhatMode::User(_), _) => "B_hat supplied".to_string(),
            (BhatMode::BehaviorPreserving, _) => "B_hat = [P_hat B, P_hat A G]".to_string(),
        },
        residual: bp
            .as_ref()
            .map(|bp| {
                let r = con3_residuals(sys, p, &sol.c_hat, bp);
                r.output.max(r.resolution).max(r.left_inverse).max(r.diffusion).max(r.reset)
            })
            .unwrap_or(0.0),
    });

    // 7. R_tilde
    let r_tilde = ssf::compute_r_tilde(&m, &sys.b, p, &b_hat).map_err(ssf_err(7))?;
    steps.push(StepLog {
        step: 7,
        action: "R_tilde = (B^T M B)^-1 B^T M P B_hat".to_string(),
        residual: 0.0,
    });
    steps.push(StepLog {
        step: 8,
        action: "E_hat".to_string(),
        residual: (&sys.e * p - p * &sol.e_hat).norm(),
    });
    steps.push(StepLog {
        step: 9,
        action: "R_hat_i".to_string(),
        residual: sys
            .jumps
            .iter()
            .zip(&sol.r_hats)
            .map(|(j, rh)| (&j.r * p - p * rh).norm())
            .fold(0.0, f64::max),
    });

    let abs_jumps = sys
        .jumps
        .iter()
        .zip(sol.r_hats)
        .map(|(j, r)| Jump { rate: j.rate, r })
        .collect();
    let abs_sys = JlssSystem::new(sol.a_hat, b_hat, sol.c_hat, d_hat, sol.e_hat, abs_jumps)
        .expect("abstract matrices have consistent shapes");
    let certificate = QuadraticSsf {
        m,
        k,
        p: p.clone(),
        q: sol.q,
        s,
        r_tilde,
        kappa_hat: opts.kappa_hat,
        pi: opts.pi,
        solver_path: path,
    };
    let gains = ssf::extract_gains(&certificate, sys, &abs_sys)
        .map_err(|e| AbstractionError::VerificationFailed(e.to_string()))?;
    let verification = ssf::verify_ssf(&certificate, sys, &abs_sys, &gains, opts.verify_samples, opts.seed)
        .map_err(|e| AbstractionError::VerificationFailed(e.to_string()))?;
    if !verification.passed {
        return Err(AbstractionError::VerificationFailed(format!(
            "worst dissipation slack {:e}, worst output slack {:e}",
            verification.worst_slack, verification.worst_sandwich
        )));
    }
    Ok(AbstractionResult {
        abs_sys,
        ssf: certificate,
        gains,
        bp,
        p_conditions: report,
        steps,
        verification,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_study;

    fn sub(i: usize, d: f64) -> JlssSystem {
        case_study::network(d).subsystems[i].sys.clone()
    }

    fn close(a: &Matrix, b: &Matrix) -> bool {
        a.shape() == b.shape() && (a - b).norm() < 1e-12
    }

    #[test]
    fn triple_integrator_p_conditions() {
        let r = check_p_conditions(&sub(2, 0.5), &case_study::p_triple(), TOL_EQ);
        assert!(r.abstraction_ok() && r.output_complement);
        let r = check_p_conditions(&sub(2, 0.5), &Matrix::identity(3, 3), TOL_EQ);
        assert!(r.abstraction_ok());
    }

    #[test]
    fn rotation_with_e1_fails() {
        let sys = JlssSystem::new(
            Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            Matrix::zeros(2, 0),
            Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
            Matrix::zeros(2, 0),
            Matrix::zeros(2, 2),
            vec![],
        )
        .unwrap();
        let r = check_p_conditions(&sys, &Matrix::from_column_slice(2, 1, &[1.0, 0.0]), TOL_EQ);
        assert!(!r.drift.holds);
    }

    #[test]
    fn con2_double_integrator() {
        let d = 0.5;
        let sys = sub(0, d);
        let sol = solve_con2(&sys, &case_study::p_double()).unwrap();
        let one = |v: f64| Matrix::from_element(1, 1, v);
        assert!(close(&sol.a_hat, &one(-2.0)));
        assert!(close(&sol.q, &one(2.0)));
        assert!(close(&sol.c_hat, &one(1.0)));
        assert!(close(&sol.e_hat, &one(0.4)));
        assert!(close(&sol.r_hats[0], &one(0.1)));
        let (dh, s) = zero_redundant_dhat(&sys, &sol.d_hat, &sol.s, &case_study::p_double(), TOL_EQ);
        assert!(close(&dh, &one(0.0)));
        assert!(close(&s, &one(-d)));
    }

    #[test]
    fn con2_triple_integrator() {
        let d = 0.5;
        let sys = sub(2, d);
        let sol = solve_con2(&sys, &case_study::p_triple()).unwrap();
        assert!(close(&sol.a_hat, &Matrix::from_row_slice(2, 2, &[-2.0, 0.0, 0.0, -3.0])));
        assert_eq!(sol.q.shape(), (0, 2));
        assert_eq!(sol.s.shape(), (0, 1));
        assert!(close(&sol.d_hat, &Matrix::from_row_slice(2, 1, &[-d, d])));
        assert!(close(&sol.c_hat, &Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])));
        assert!(close(&sol.e_hat, &(Matrix::identity(2, 2) * 0.4)));
    }

    #[test]
    fn identity_p_reproduces_system() {
        let sys = sub(0, 0.5);
        let sol = solve_con2(&sys, &Matrix::identity(2, 2)).unwrap();
        assert!(close(&sol.a_hat, &sys.a));
        assert!(close(&sol.q, &Matrix::zeros(1, 2)));
        assert!(close(&sol.d_hat, &sys.d));
        assert!(close(&sol.e_hat, &sys.e));
    }

    #[test]
    fn zero_redundant_cases() {
        let sys = sub(2, 0.5);
        let dh = Matrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let (d2, _) = zero_redundant_dhat(&sys, &dh, &Matrix::zeros(0, 1), &case_study::p_triple(), TOL_EQ);
        assert_eq!(d2, dh);
        let mut sys0 = sub(0, 0.5);
        sys0.d = Matrix::zeros(2, 1);
        let (d2, s2) = zero_redundant_dhat(&sys0, &Matrix::zeros(1, 1), &Matrix::zeros(1, 1), &case_study::p_double(), TOL_EQ);
        assert_eq!(d2, Matrix::zeros(1, 1));
        assert_eq!(s2[(0, 0)].abs(), 0.0);
    }

    #[test]
    fn behavior_preserving_triple_integrator() {
        let sys = sub(2, 0.5);
        let p = case_study::p_triple();
        let c_hat = &sys.c * &p;
        let (b_hat, bp) = choose_bhat(&sys, &p, &c_hat, &BhatMode::BehaviorPreserving).unwrap();
        let bp = bp.unwrap();
        assert_eq!(bp.g, Matrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]));
        let r = con3_residuals(&sys, &p, &c_hat, &bp);
        assert!(r.output < 1e-12 && r.resolution < 1e-12 && r.left_inverse < 1e-12);
        assert!(r.diffusion < 1e-12 && r.reset < 1e-12);
        assert!(close(&b_hat, &(&bp.p_hat * &sys.a * &bp.g)));
    }

    #[test]
    fn published_triple_factors_violate_output_condition() {
        let sys = sub(2, 0.5);
        let p = case_study::p_triple();
        let bp = BehaviorPreservingData {
            p_hat: case_study::published::p_hat_triple(),
            g: case_study::published::g_triple(),
            f: case_study::published::f_triple(),
        };
        let r = con3_residuals(&sys, &p, &(&sys.c * &p), &bp);
        assert!(r.resolution < 1e-12 && r.left_inverse < 1e-12);
        assert!(r.output > 0.1);
        let b_hat = &bp.p_hat * &sys.a * &bp.g;
        assert!(close(&b_hat, &case_study::published::b_hat_triple()));
    }

    #[test]
    fn identity_behavior_mode() {
        let sys = sub(0, 0.5);
        let p = Matrix::identity(2, 2);
        let (b_hat, bp) = choose_bhat(&sys, &p, &sys.c, &BhatMode::BehaviorPreserving).unwrap();
        let bp = bp.unwrap();
        assert!(close(&bp.p_hat, &p));
        assert_eq!(bp.g.shape(), (2, 0));
        assert!(close(&b_hat, &sys.b));
        let (b_hat, _) = choose_bhat(&sys, &case_study::p_double(), &Matrix::identity(1, 1), &BhatMode::Identity).unwrap();
        assert_eq!(b_hat, Matrix::identity(1, 1));
    }

    #[test]
    fn end_to_end_double_integrator() {
        let sys = sub(0, 0.5);
        let opts = AbstractionOptions {
            kappa_hat: 3.0,
            pi: 1.0,
            ..Default::default()
        };
        let r = build_abstraction(&sys, &case_study::p_double(), &opts).unwrap();
        assert!(close(&r.abs_sys.a, &Matrix::from_element(1, 1, -2.0)));
        assert!(close(&r.abs_sys.b, &Matrix::identity(1, 1)));
        assert!(close(&r.abs_sys.d, &Matrix::zeros(1, 1)));
        assert!(r.verification.passed);
        assert_eq!(r.gains.h, 2.0);
    }

    #[test]
    fn identity_pipeline() {
        let sys = sub(0, 0.5);
        let opts = AbstractionOptions {
            kappa_hat: 3.0,
            pi: 1.0,
            ..Default::default()
        };
        let r = build_abstraction(&sys, &Matrix::identity(2, 2), &opts).unwrap();
        assert!(close(&r.abs_sys.a, &sys.a));
        assert!(close(&r.abs_sys.b, &Matrix::identity(2, 2)));
    }

    #[test]
    fn failing_p_names_step_two() {
        let sys = sub(2, 0.5);
        let opts = AbstractionOptions::with_kappa(2.0);
        let err = build_abstraction(&sys, &Matrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]), &opts).unwrap_err();
        assert_eq!(err.step(), 2);
    }

    #[test]
    fn json_round_trip() {
        let sys = sub(2, 0.5);
        let r = build_abstraction(&sys, &case_study::p_triple(), &case_study::options(3)).unwrap();
        let back = AbstractionResult::from_json(&r.to_json(), &sys).unwrap();
        assert_eq!(back, r);
    }
}
