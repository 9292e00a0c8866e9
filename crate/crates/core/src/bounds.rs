//! Closed-form moment and probability bounds for linear gain slopes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::CompositionCertificate;
use crate::ssf::LinearGains;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundsError {
    #[error("{name} must be nonnegative and finite, got {value}")]
    NegativeInput { name: &'static str, value: f64 },
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
}

pub type Result<T> = std::result::Result<T, BoundsError>;

/// Linear slopes `alpha(s) = a s`, `eta(s) = h s`, `rho_ext(s) = r_e s`,
/// `rho_int(s) = r_i s` of a certificate for the `k`-th moment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSlopes {
    pub a: f64,
    pub h: f64,
    pub r_e: f64,
    pub r_i: f64,
    pub k: u32,
}

impl GainSlopes {
    pub fn new(a: f64, h: f64, r_e: f64, r_i: f64, k: u32) -> Result<Self> {
        let g = Self { a, h, r_e, r_i, k };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) || !(self.h > 0.0 && self.h.is_finite()) {
            return Err(BoundsError::InvalidArgs(format!(
                "slopes a = {}, h = {} must be positive",
                self.a, self.h
            )));
        }
        nonneg("r_e", self.r_e)?;
        nonneg("r_i", self.r_i)?;
        if self.k == 0 {
            return Err(BoundsError::InvalidArgs("k must be at least 1".to_string()));
        }
        Ok(())
    }

    pub fn from_gains(g: &LinearGains, k: u32) -> Result<Self> {
        Self::new(g.a, g.h, g.r_e, g.r_i, k)
    }

    /// Composite slopes; internal inputs are absorbed by the composition.
    pub fn from_certificate(cert: &CompositionCertificate) -> Result<Self> {
        let s = cert.slopes();
        Self::new(s.alpha, s.eta, s.rho_ext, 0.0, cert.k)
    }

    fn eps_pow(&self, eps: f64) -> f64 {
        self.a * eps.powi(self.k as i32)
    }
}

fn nonneg(name: &'static str, value: f64) -> Result<f64> {
    if value >= 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(BoundsError::NegativeInput { name, value })
    }
}

fn positive(name: &str, value: f64) -> Result<f64> {
    if value > 0.0 && !value.is_nan() {
        Ok(value)
    } else {
        Err(BoundsError::InvalidArgs(format!("{name} must be positive, got {value}")))
    }
}

/// Upper bound on `E||zeta(t) - zeta_hat(t)||^k`:
/// `(EV0 e^{-h t} + (r_e Eu + r_i Ew) / h) / a`.
pub fn moment_bound(g: &GainSlopes, ev0: f64, eu_hat: f64, ew_mismatch: f64, t: f64) -> Result<f64> {
    g.validate()?;
    nonneg("EV0", ev0)?;
    nonneg("Eu_hat", eu_hat)?;
    nonneg("Ew_mismatch", ew_mismatch)?;
    nonneg("t", t)?;
    Ok(moment_numerator(g, ev0, eu_hat, ew_mismatch, t) / g.a)
}

fn moment_numerator(g: &GainSlopes, ev0: f64, eu_hat: f64, ew_mismatch: f64, t: f64) -> f64 {
    ev0 * (-g.h * t).exp() + (g.r_e * eu_hat + g.r_i * ew_mismatch) / g.h
}

/// Probability bound before and after clamping to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probability {
    pub raw: f64,
    pub value: f64,
    /// `true` when `a eps^k >= eps_const / theta` selected the first formula.
    pub first_branch: bool,
}

impl Probability {
    fn new(raw: f64, first_branch: bool) -> Self {
        Self {
            raw,
            value: raw.clamp(0.0, 1.0),
            first_branch,
        }
    }
}

/// First formula: `1 - (1 - V0 / (a eps^k)) e^{-c T / (a eps^k)}`.
pub fn sup_bound_first(g: &GainSlopes, v0: f64, eps: f64, t_horizon: f64, eps_const: f64) -> f64 {
    let level = g.eps_pow(eps);
    1.0 - (1.0 - v0 / level) * (-eps_const * t_horizon / level).exp()
}

/// Second formula: `(theta V0 + (e^{T theta} - 1) c) / (theta a eps^k e^{T theta})`.
pub fn sup_bound_second(g: &GainSlopes, v0: f64, eps: f64, t_horizon: f64, eps_const: f64) -> f64 {
    let level = g.eps_pow(eps);
    let theta = g.h;
    // Written with e^{-T theta} so large horizons do not overflow.
    let decay = (-t_horizon * theta).exp();
    (theta * v0 * decay + (1.0 - decay) * eps_const) / (theta * level)
}

/// Bound on `P{ sup_{0 <= t <= T} ||zeta - zeta_hat|| >= eps }` with `theta = h`.
/// `eps_const` must dominate `rho_ext(||u_hat||^k) + rho_int(||w - w_hat||^k)`.
pub fn sup_probability_bound(g: &GainSlopes, v0: f64, eps: f64, t_horizon: f64, eps_const: f64) -> Result<Probability> {
    g.validate()?;
    nonneg("V0", v0)?;
    nonneg("eps_const", eps_const)?;
    positive("epsilon", eps)?;
    positive("T", t_horizon)?;
    let first = g.eps_pow(eps) >= eps_const / g.h;
    let raw = if first {
        sup_bound_first(g, v0, eps, t_horizon, eps_const)
    } else {
        sup_bound_second(g, v0, eps, t_horizon, eps_const)
    };
    Ok(Probability::new(raw, first))
}

/// Bound on `P{ ||zeta(t) - zeta_hat(t)|| >= eps }` at a single time.
pub fn pointwise_probability_bound(
    g: &GainSlopes,
    ev0: f64,
    eu_hat: f64,
    ew_mismatch: f64,
    eps: f64,
    t: f64,
) -> Result<Probability> {
    let moment = moment_bound(g, ev0, eu_hat, ew_mismatch, t)?;
    positive("epsilon", eps)?;
    let raw = moment.powf(1.0 / g.k as f64) / eps;
    Ok(Probability::new(raw, true))
}

/// Bound on `P{ sup_t ||zeta - zeta_hat|| >= eps }` over an infinite horizon
/// when the abstract input is zero.
pub fn infinite_horizon_bound(g: &GainSlopes, v0: f64, eps: f64) -> Result<Probability> {
    g.validate()?;
    nonneg("V0", v0)?;
    positive("epsilon", eps)?;
    Ok(Probability::new(v0 / g.eps_pow(eps), true))
}

/// `(sqrt(b1) + sqrt(b2))^2`, a squared-distance bound for chained gaps.
pub fn triangle_bound(b1: f64, b2: f64) -> f64 {
    let s = b1.max(0.0).sqrt() + b2.max(0.0).sqrt();
    s * s
}

/// Pointwise [`triangle_bound`] of two curves on a common grid.
pub fn triangle_curve(b1: &[f64], b2: &[f64]) -> Result<Vec<f64>> {
    if b1.len() != b2.len() {
        return Err(BoundsError::InvalidArgs(format!(
            "curves have lengths {} and {}",
            b1.len(),
            b2.len()
        )));
    }
    Ok(b1.iter().zip(b2).map(|(x, y)| triangle_bound(*x, *y)).collect())
}

/// Inputs of a bound query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundQuery {
    pub ev0: f64,
    /// `E||u_hat||_inf^k`
    pub eu_hat: f64,
    /// `E||w - w_hat||_inf^k`
    pub ew_mismatch: f64,
    pub epsilon: f64,
    pub horizon: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub t: f64,
    pub moment: f64,
    pub pointwise: f64,
    /// Sup bound over `[0, t]`; at `t = 0` the window is taken as one grid step.
    pub sup: f64,
    pub sup_raw: f64,
    pub infinite_horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub slopes: GainSlopes,
    pub query: BoundQuery,
    pub theta: f64,
    pub eps_const: f64,
    pub rows: Vec<BoundRow>,
}

/// Evaluates all bound families on the grid `0, dt, ..., horizon`.
pub fn bound_report(g: &GainSlopes, q: &BoundQuery) -> Result<BoundReport> {
    g.validate()?;
    positive("dt", q.dt)?;
    nonneg("horizon", q.horizon)?;
    positive("epsilon", q.epsilon)?;
    let eps_const = g.r_e * nonneg("Eu_hat", q.eu_hat)? + g.r_i * nonneg("Ew_mismatch", q.ew_mismatch)?;
    let steps = (q.horizon / q.dt).round() as usize;
    let infinite = if eps_const == 0.0 {
        infinite_horizon_bound(g, q.ev0, q.epsilon)?.value
    } else {
        1.0
    };
    let mut rows = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 * q.dt;
        let sup = sup_probability_bound(g, q.ev0, q.epsilon, t.max(q.dt), eps_const)?;
        rows.push(BoundRow {
            t,
            moment: moment_bound(g, q.ev0, q.eu_hat, q.ew_mismatch, t)?,
            pointwise: pointwise_probability_bound(g, q.ev0, q.eu_hat, q.ew_mismatch, q.epsilon, t)?.value,
            sup: sup.value,
            sup_raw: sup.raw,
            infinite_horizon: infinite,
        });
    }
    Ok(BoundReport {
        slopes: *g,
        query: *q,
        theta: g.h,
        eps_const,
        rows,
    })
}

impl BoundReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,moment,pointwise,sup,sup_raw,infinite_horizon\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.t, r.moment, r.pointwise, r.sup, r.sup_raw, r.infinite_horizon
            ));
        }
        out
    }
}
