//! Small-gain composition of subsystem certificates into a certificate for
//! the interconnected pair, `V = sum_i mu_i V_i`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::AbstractionResult;
use crate::linalg::{self, LinalgError, Matrix, Vector};
use crate::matrix_serde;
use crate::model::{Endpoint, Network};
use crate::ssf::LinearGains;

/// Margin by which the spectral radius must stay below one.
pub const TOL_SG: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompositionError {
    #[error("expected gains for {expected} subsystems, got {got}")]
    MissingGains { expected: usize, got: usize },
    #[error("small-gain condition fails: spectral radius {radius}")]
    Infeasible { radius: f64 },
    #[error("certificate invalid: {0}")]
    CertificateInvalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, CompositionError>;

/// Exponent applied to `N - 1` in the interconnection gains.
fn coupling_exponent(k: u32, triangle_mode: bool) -> f64 {
    let e = (k as f64 / 2.0).max(1.0);
    if triangle_mode {
        e - 1.0
    } else {
        e
    }
}

/// `Lambda = diag(h_i)`, `Delta_ij = r_int_i (N-1)^e / a_j` when `j` feeds `i`.
pub fn build_gain_matrices(net: &Network, gains: &[LinearGains], triangle_mode: bool) -> Result<(Matrix, Matrix)> {
    let n = net.len();
    if gains.len() != n {
        return Err(CompositionError::MissingGains {
            expected: n,
            got: gains.len(),
        });
    }
    let lambda = Matrix::from_diagonal(&Vector::from_iterator(n, gains.iter().map(|g| g.h)));
    let factor = ((n.max(1) - 1) as f64).powf(coupling_exponent(net.k, triangle_mode));
    let mut delta = Matrix::zeros(n, n);
    for (i, si) in net.subsystems.iter().enumerate() {
        for (j, sj) in net.subsystems.iter().enumerate() {
            if i == j {
                continue;
            }
            let connected = si.input_cols(sj.id).is_some_and(|c| !c.is_empty())
                && sj.output_rows(Endpoint::Peer(si.id)).is_some();
            if connected {
                delta[(i, j)] = gains[i].r_i * factor / gains[j].a;
            }
        }
    }
    Ok((lambda, delta))
}

/// Returns `mu > 0` with `mu^T (-Lambda + Delta) < 0`, or the spectral radius
/// of `Lambda^{-1} Delta` when no such vector exists.
pub fn find_mu(lambda: &Matrix, delta: &Matrix) -> Result<Vector> {
    let n = lambda.nrows();
    let diag: Vec<f64> = (0..n).map(|i| lambda[(i, i)]).collect();
    if diag.iter().any(|h| !(*h > 0.0)) {
        return Err(CompositionError::CertificateInvalid(
            "Lambda must have a positive diagonal".to_string(),
        ));
    }
    let scaled = Matrix::from_fn(n, n, |i, j| delta[(i, j)] / diag[i]);
    let radius = linalg::spectral_radius(&scaled)?;
    if radius >= 1.0 - TOL_SG {
        return Err(CompositionError::Infeasible { radius });
    }
    // (Lambda - Delta) is a nonsingular M-matrix, so its inverse is
    // entrywise nonnegative with a positive diagonal.
    let lhs = (lambda - delta).transpose();
    let rhs = Vector::from_vec(diag);
    let mu = lhs.lu().solve(&rhs).ok_or(CompositionError::Infeasible { radius })?;
    let max = mu.max();
    let mu = mu / max;
    check_small_gain(lambda, delta, &mu)?;
    Ok(mu)
}

/// Componentwise `mu^T (-Lambda + Delta)`; errors unless every entry is negative and `mu > 0`.
pub fn check_small_gain(lambda: &Matrix, delta: &Matrix, mu: &Vector) -> Result<Vector> {
    if mu.iter().any(|m| !(*m > 0.0)) {
        return Err(CompositionError::CertificateInvalid("mu must be positive".to_string()));
    }
    let row = (mu.transpose() * (delta - lambda)).transpose();
    if row.iter().any(|v| !(*v < 0.0)) {
        return Err(CompositionError::CertificateInvalid(format!(
            "mu^T(-Lambda + Delta) = {:?} is not negative",
            row.as_slice()
        )));
    }
    Ok(row)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeSlopes {
    pub alpha: f64,
    pub eta: f64,
    pub rho_ext: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionCertificate {
    pub ids: Vec<usize>,
    pub mu: Vec<f64>,
    #[serde(rename = "Lambda", with = "matrix_serde")]
    pub lambda: Matrix,
    #[serde(rename = "Delta", with = "matrix_serde")]
    pub delta: Matrix,
    pub spectral_radius: f64,
    pub k: u32,
    pub triangle_mode: bool,
    /// Subsystems whose abstract external inputs are held at zero; their
    /// external gain is dropped.
    pub zero_input_ids: Vec<usize>,
    /// Per-subsystem gains after zeroing the external gains above.
    pub gains: Vec<LinearGains>,
    /// Composite slopes from the stated optimizations (`mu^T s = s`, Euclidean ball).
    pub literal: CompositeSlopes,
    /// Variant with `1^T s = s` for eta and a per-component maximum for rho_ext.
    pub paper_example: CompositeSlopes,
    pub paper_example_mode: bool,
}

impl CompositionCertificate {
    /// Slopes selected by `paper_example_mode`.
    pub fn slopes(&self) -> CompositeSlopes {
        if self.paper_example_mode {
            self.paper_example
        } else {
            self.literal
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ComposeOptions {
    pub triangle_mode: bool,
    pub paper_example_mode: bool,
    pub zero_input_ids: Vec<usize>,
    /// Use this `mu` instead of searching for one.
    pub mu: Option<Vec<f64>>,
}

impl ComposeOptions {
    pub fn new() -> Self {
        Self {
            triangle_mode: true,
            ..Self::default()
        }
    }
}

/// Builds `Lambda`, `Delta`, certifies `mu` and computes the composite slopes.
pub fn compose(net: &Network, gains: &[LinearGains], opts: &ComposeOptions) -> Result<CompositionCertificate> {
    let n = net.len();
    let mut gains: Vec<LinearGains> = gains.to_vec();
    if gains.len() != n {
        return Err(CompositionError::MissingGains {
            expected: n,
            got: gains.len(),
        });
    }
    for (g, s) in gains.iter_mut().zip(&net.subsystems) {
        if opts.zero_input_ids.contains(&s.id) {
            g.r_e = 0.0;
        }
    }
    let (lambda, delta) = build_gain_matrices(net, &gains, opts.triangle_mode)?;
    let diag: Vec<f64> = (0..n).map(|i| lambda[(i, i)]).collect();
    let scaled = Matrix::from_fn(n, n, |i, j| delta[(i, j)] / diag[i]);
    let spectral_radius = linalg::spectral_radius(&scaled)?;
    let mu = match &opts.mu {
        Some(mu) => {
            if mu.len() != n {
                return Err(CompositionError::CertificateInvalid(format!(
                    "mu has {} entries, expected {n}",
                    mu.len()
                )));
            }
            let mu = Vector::from_vec(mu.clone());
            check_small_gain(&lambda, &delta, &mu)?;
            mu
        }
        None => find_mu(&lambda, &delta)?,
    };
    let decay = (mu.transpose() * (&lambda - &delta)).transpose();
    let e = (net.k as f64 / 2.0).max(1.0);
    let jensen = (n as f64).powf(e - 1.0);

    let literal = CompositeSlopes {
        alpha: 1.0 / (jensen * (0..n).map(|i| 1.0 / (gains[i].a * mu[i])).fold(0.0, f64::max)),
        eta: (0..n).map(|j| decay[j] / mu[j]).fold(f64::INFINITY, f64::min),
        rho_ext: (0..n).map(|i| (mu[i] * gains[i].r_e).powi(2)).sum::<f64>().sqrt(),
    };
    let paper_example = CompositeSlopes {
        alpha: 1.0 / (jensen * gains.iter().map(|g| 1.0 / g.a).fold(0.0, f64::max)),
        eta: decay.iter().copied().fold(f64::INFINITY, f64::min),
        rho_ext: gains.iter().map(|g| g.r_e).fold(0.0, f64::max),
    };
    Ok(CompositionCertificate {
        ids: net.subsystems.iter().map(|s| s.id).collect(),
        mu: mu.iter().copied().collect(),
        lambda,
        delta,
        spectral_radius,
        k: net.k,
        triangle_mode: opts.triangle_mode,
        zero_input_ids: opts.zero_input_ids.clone(),
        gains,
        literal,
        paper_example,
        paper_example_mode: opts.paper_example_mode,
    })
}

/// `sum_i mu_i (x_i - P_i x̂_i)^T M_i (x_i - P_i x̂_i)` over per-subsystem blocks.
pub fn composite_v(
    cert: &CompositionCertificate,
    abstractions: &[AbstractionResult],
    x: &[Vector],
    xh: &[Vector],
) -> Result<f64> {
    let n = cert.mu.len();
    if abstractions.len() != n || x.len() != n || xh.len() != n {
        return Err(CompositionError::MissingGains {
            expected: n,
            got: abstractions.len().min(x.len()).min(xh.len()),
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        let ssf = &abstractions[i].ssf;
        if x[i].len() != ssf.p.nrows() || xh[i].len() != ssf.p.ncols() {
            return Err(CompositionError::CertificateInvalid(format!(
                "block {i} has mismatched state dimensions"
            )));
        }
        total += cert.mu[i] * ssf.value(&x[i], &xh[i]);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_study::{self, published};
    use crate::ssf::NORM_CONVENTION;

    fn gains(h: f64, r_e: f64, r_i: f64) -> LinearGains {
        LinearGains {
            a: 1.0,
            h,
            r_e,
            r_i,
            norm_convention: NORM_CONVENTION.to_string(),
        }
    }

    fn published_gains(d: f64) -> Vec<LinearGains> {
        vec![
            gains(published::ETA, published::R_EXT_DOUBLE, published::R_INT_DOUBLE * d * d),
            gains(published::ETA, published::R_EXT_DOUBLE, published::R_INT_DOUBLE * d * d),
            gains(published::ETA, published::R_EXT_TRIPLE, published::R_INT_TRIPLE * d * d),
            gains(published::ETA, published::R_EXT_TRIPLE, published::R_INT_TRIPLE * d * d),
        ]
    }

    #[test]
    fn published_delta_matrix() {
        let d = 0.5;
        let net = case_study::network(d);
        let (l, dl) = build_gain_matrices(&net, &published_gains(d), true).unwrap();
        assert_eq!(l, Matrix::identity(4, 4) * 2.0);
        let mut expected = Matrix::zeros(4, 4);
        expected[(0, 2)] = 1.3 * d * d;
        expected[(1, 3)] = 1.3 * d * d;
        expected[(2, 1)] = 7.9 * d * d;
        expected[(3, 0)] = 7.9 * d * d;
        assert!((dl - &expected).norm() < 1e-15);
        let (_, dl3) = build_gain_matrices(&net, &published_gains(d), false).unwrap();
        assert!((dl3 - expected * 3.0).norm() < 1e-14);
    }

    #[test]
    fn published_mu_certifies() {
        let d = 0.5;
        let net = case_study::network(d);
        let (l, dl) = build_gain_matrices(&net, &published_gains(d), true).unwrap();
        let row = check_small_gain(&l, &dl, &Vector::from_vec(vec![2.0, 2.0, 1.0, 1.0])).unwrap();
        let expected = [-2.025, -2.025, -1.35, -1.35];
        for (r, e) in row.iter().zip(expected) {
            assert!((r - e).abs() < 1e-12);
        }
        let mu = find_mu(&l, &dl).unwrap();
        assert!(mu.iter().all(|m| *m > 0.0));
    }

    #[test]
    fn published_slopes() {
        let d = 0.5;
        let net = case_study::network(d);
        let opts = ComposeOptions {
            mu: Some(vec![2.0, 2.0, 1.0, 1.0]),
            zero_input_ids: vec![3, 4],
            ..ComposeOptions::new()
        };
        let c = compose(&net, &published_gains(d), &opts).unwrap();
        assert!((c.literal.alpha - 1.0).abs() < 1e-15);
        assert!((c.literal.eta - 1.0125).abs() < 1e-12);
        assert!((c.paper_example.eta - 1.35).abs() < 1e-12);
        assert!((c.paper_example.rho_ext - 0.16).abs() < 1e-15);
        assert!((c.literal.rho_ext - (2.0 * 0.16 * 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn infeasible_at_unit_coupling() {
        let net = case_study::network(1.0);
        let (l, dl) = build_gain_matrices(&net, &published_gains(1.0), true).unwrap();
        match find_mu(&l, &dl) {
            Err(CompositionError::Infeasible { radius }) => {
                assert!((radius - (1.3f64 * 7.9).sqrt() / 2.0).abs() < 1e-12)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn decoupled_gives_ones() {
        let l = Matrix::identity(3, 3) * 2.0;
        let mu = find_mu(&l, &Matrix::zeros(3, 3)).unwrap();
        assert_eq!(mu, Vector::from_element(3, 1.0));
    }

    #[test]
    fn single_subsystem_slopes_match() {
        let mut net = case_study::network(0.5);
        net.subsystems.truncate(1);
        net.subsystems[0].inputs.clear();
        let c = compose(&net, &[gains(1.7, 0.3, 0.0)], &ComposeOptions::new()).unwrap();
        assert_eq!(c.mu, vec![1.0]);
        assert_eq!(c.literal, CompositeSlopes { alpha: 1.0, eta: 1.7, rho_ext: 0.3 });
    }
}
