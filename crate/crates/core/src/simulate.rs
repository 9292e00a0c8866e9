//! Euler–Maruyama Monte Carlo for concrete/abstract pairs coupled through
//! the interface, with the estimators used to check the bounds.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::AbstractionResult;
use crate::bounds::{self, BoundsError, GainSlopes};
use crate::composition::{self, CompositionCertificate, CompositionError};
use crate::linalg::{Matrix, Vector};
use crate::model::{Endpoint, JlssSystem, Network};
use crate::rng::{self, Role};

/// Largest admissible `dt * max rate`.
pub const MAX_JUMP_MASS: f64 = 0.1;
/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;
/// Recording interval for the summary grid.
pub const RECORD_DT: f64 = 0.01;
/// Rounding allowance in the moment dominance check, scaled by `1 + bound`.
pub const ROUNDOFF_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("need at least 2 trials, got {0}")]
    TooFewTrials(usize),
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error("input trajectory: {0}")]
    Parse(String),
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Piecewise-constant abstract input: `values[i]` holds on `[times[i], times[i+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTrajectory {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl InputTrajectory {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(SimError::Parse(format!(
                "{} breakpoints but {} value rows",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(SimError::Parse("breakpoints must be strictly increasing".to_string()));
        }
        let width = values[0].len();
        if values.iter().any(|v| v.len() != width || v.iter().any(|x| !x.is_finite())) {
            return Err(SimError::Parse("rows must have equal width and finite entries".to_string()));
        }
        Ok(Self { times, values })
    }

    pub fn zero(width: usize) -> Self {
        Self {
            times: vec![0.0],
            values: vec![vec![0.0; width]],
        }
    }

    pub fn width(&self) -> usize {
        self.values[0].len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Index of the breakpoint in force at `t`; times before the first
    /// breakpoint use the first value.
    pub fn index_at(&self, t: f64) -> usize {
        let slack = 1e-9 * (1.0 + t.abs());
        self.times.partition_point(|b| *b <= t + slack).saturating_sub(1)
    }

    pub fn at(&self, t: f64) -> &[f64] {
        &self.values[self.index_at(t)]
    }

    /// `max ||u(t)||^2` over breakpoints in force on `[0, horizon]`.
    pub fn sup_norm_sq(&self, horizon: f64) -> f64 {
        let last = self.index_at(horizon);
        let first = self.index_at(0.0);
        self.values[first..=last]
            .iter()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Reads CSV with header `t,u_1,...,u_m`.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| SimError::Parse(e.to_string()))?.clone();
        if headers.get(0) != Some("t") {
            return Err(SimError::Parse("first column must be `t`".to_string()));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| SimError::Parse(e.to_string()))?;
            let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
            let parsed = parsed.map_err(|e| SimError::Parse(format!("row {}: {e}", line + 1)))?;
            times.push(parsed[0]);
            values.push(parsed[1..].to_vec());
        }
        Self::new(times, values)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for j in 0..self.width() {
            out.push_str(&format!(",u_{}", j + 1));
        }
        out.push('\n');
        for (t, v) in self.times.iter().zip(&self.values) {
            out.push_str(&format!("{t:.17e}"));
            for x in v {
                out.push_str(&format!(",{x:.17e}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub trials: usize,
    pub master_seed: u64,
    pub record_dt: f64,
    /// Concrete and abstract systems see the same Brownian and Poisson paths.
    pub shared_drivers: bool,
    pub store_paths: bool,
    /// Per-component interval for the set-distance estimator.
    pub safe_box: Option<(f64, f64)>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 15.0,
            trials: 1000,
            master_seed: 42,
            record_dt: RECORD_DT,
            shared_drivers: true,
            store_paths: false,
            safe_box: None,
        }
    }
}

impl SimConfig {
    /// Returns `(steps, record_every)`.
    pub fn validate(&self, max_rate: f64) -> Result<(usize, usize)> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::ConfigInvalid(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(SimError::ConfigInvalid(format!("horizon = {} is invalid", self.horizon)));
        }
        if self.dt * max_rate > MAX_JUMP_MASS {
            return Err(SimError::ConfigInvalid(format!(
                "dt * rate = {} exceeds {MAX_JUMP_MASS}",
                self.dt * max_rate
            )));
        }
        let steps = (self.horizon / self.dt).round();
        if (steps * self.dt - self.horizon).abs() > 1e-12 * self.horizon.max(1.0) {
            return Err(SimError::ConfigInvalid(format!(
                "horizon {} is not a multiple of dt {}",
                self.horizon, self.dt
            )));
        }
        let every = (self.record_dt / self.dt).round().max(1.0);
        let steps = steps as usize;
        let every = every as usize;
        if steps % every != 0 {
            return Err(SimError::ConfigInvalid(format!(
                "horizon is not a multiple of the recording interval {}",
                self.dt * every as f64
            )));
        }
        if let Some((lo, hi)) = self.safe_box {
            if !(lo <= hi) {
                return Err(SimError::ConfigInvalid("safe box is empty".to_string()));
            }
        }
        Ok((steps, every))
    }
}

/// One Euler–Maruyama step
/// `x' = x + (A x + B u + D w) dt + E x dW + sum_i R_i x dN_i`.
pub fn step_jlss(sys: &JlssSystem, x: &Vector, u: &Vector, w: &Vector, dt: f64, dw: f64, dn: &[u64]) -> Result<Vector> {
    if x.len() != sys.n() || u.len() != sys.m() || w.len() != sys.p() || dn.len() != sys.jumps.len() {
        return Err(SimError::DimensionMismatch(format!(
            "x {}, u {}, w {}, dN {} for a system with n {}, m {}, p {}, {} jumps",
            x.len(),
            u.len(),
            w.len(),
            dn.len(),
            sys.n(),
            sys.m(),
            sys.p(),
            sys.jumps.len()
        )));
    }
    let mut next = x + sys.drift(x, u, w) * dt + &sys.e * x * dw;
    for (jump, count) in sys.jumps.iter().zip(dn) {
        if *count > 0 {
            next += &jump.r * x * (*count as f64);
        }
    }
    Ok(next)
}

/// Squared distance of `z` to the box `[lo, hi]^q`.
pub fn set_distance_sq(z: &[f64], lo: f64, hi: f64) -> f64 {
    z.iter()
        .map(|v| {
            let d = if *v < lo {
                lo - v
            } else if *v > hi {
                v - hi
            } else {
                0.0
            };
            d * d
        })
        .sum()
}

/// The closed loop of all concrete and abstract subsystems as one linear
/// jump diffusion in `z = [x_1..x_N, x̂_1..x̂_N]` driven by `û`.
#[derive(Debug, Clone)]
pub struct CoupledModel {
    pub drift: Matrix,
    pub input: Matrix,
    pub diffusion: Matrix,
    /// Brownian driver of each row of `z`.
    pub brownian_driver: Vec<usize>,
    pub brownian_drivers: usize,
    /// One reset matrix per jump slot; rows without a jump in that slot are zero.
    pub resets: Vec<Matrix>,
    /// Poisson driver of each row in each slot.
    pub jump_driver: Vec<Vec<Option<usize>>>,
    /// Rate of each Poisson driver, and whether it is drawn from the abstract stream.
    pub jump_rates: Vec<(f64, bool)>,
    pub n_concrete_brownian: usize,
    pub output: Matrix,
    pub abstract_output: Matrix,
    pub state_offsets: Vec<usize>,
    pub abstract_offsets: Vec<usize>,
    pub input_offsets: Vec<usize>,
}

impl CoupledModel {
    pub fn new(net: &Network, abstractions: &[AbstractionResult], shared_drivers: bool) -> Result<Self> {
        let n_sub = net.len();
        if abstractions.len() != n_sub {
            return Err(SimError::ConfigInvalid(format!(
                "{} abstractions for {n_sub} subsystems",
                abstractions.len()
            )));
        }
        let mut state_offsets = Vec::with_capacity(n_sub);
        let mut abstract_offsets = Vec::with_capacity(n_sub);
        let mut input_offsets = Vec::with_capacity(n_sub);
        let (mut nx, mut nxh, mut nu) = (0, 0, 0);
        for (spec, abs) in net.subsystems.iter().zip(abstractions) {
            let (sys, ah) = (&spec.sys, &abs.abs_sys);
            if sys.rates() != ah.rates() {
                return Err(SimError::ConfigInvalid(format!(
                    "subsystem {} and its abstraction have different jump rates",
                    spec.id
                )));
            }
            if abs.ssf.p.nrows() != sys.n() || abs.ssf.p.ncols() != ah.n() || ah.p() != sys.p() || ah.q() != sys.q() {
                return Err(SimError::DimensionMismatch(format!(
                    "abstraction of subsystem {} does not match its dimensions",
                    spec.id
                )));
            }
            state_offsets.push(nx);
            input_offsets.push(nu);
            nx += sys.n();
            nu += ah.m();
        }
        for abs in abstractions {
            abstract_offsets.push(nx + nxh);
            nxh += abs.abs_sys.n();
        }
        let dim = nx + nxh;
        let mut drift = Matrix::zeros(dim, dim);
        let mut input = Matrix::zeros(dim, nu);
        let mut diffusion = Matrix::zeros(dim, dim);
        let slots = net.subsystems.iter().map(|s| s.sys.jumps.len()).max().unwrap_or(0);
        let mut resets = vec![Matrix::zeros(dim, dim); slots];
        let mut jump_driver = vec![vec![None; dim]; slots];
        let mut jump_rates = Vec::new();
        let mut brownian_driver = vec![0; dim];

        let ext_rows: usize = net
            .subsystems
            .iter()
            .map(|s| s.external_rows().map_or(0, |r| r.len()))
            .sum();
        let mut output = Matrix::zeros(ext_rows, dim);
        let mut abstract_output = Matrix::zeros(ext_rows, dim);
        let mut ext_offset = 0;

        for (i, (spec, abs)) in net.subsystems.iter().zip(abstractions).enumerate() {
            let sys = &spec.sys;
            let ah = &abs.abs_sys;
            let ssf = &abs.ssf;
            let (ox, oa, ou) = (state_offsets[i], abstract_offsets[i], input_offsets[i]);
            let (n, nh) = (sys.n(), ah.n());

            let own = &sys.a + &sys.b * &ssf.k;
            add_block(&mut drift, ox, ox, &own);
            add_block(&mut drift, ox, oa, &(&sys.b * (&ssf.q - &ssf.k * &ssf.p)));
            add_block(&mut drift, oa, oa, &ah.a);
            add_block(&mut input, ox, ou, &(&sys.b * &ssf.r_tilde));
            add_block(&mut input, oa, ou, &ah.b);

            for block in &spec.inputs {
                let j = net.index_of(block.from).ok_or_else(|| {
                    SimError::ConfigInvalid(format!("subsystem {} reads from unknown {}", spec.id, block.from))
                })?;
                let from = &net.subsystems[j];
                let cols = spec.input_cols(block.from).expect("block exists");
                let c_ji = from.output_block(&from.sys.c, Endpoint::Peer(spec.id)).ok_or_else(|| {
                    SimError::ConfigInvalid(format!("subsystem {} sends nothing to {}", from.id, spec.id))
                })?;
                let ch_ji = from
                    .output_block(&abstractions[j].abs_sys.c, Endpoint::Peer(spec.id))
                    .expect("same output layout");
                if c_ji.nrows() != cols.len() {
                    return Err(SimError::DimensionMismatch(format!(
                        "block {} -> {} has {} rows, expected {}",
                        from.id,
                        spec.id,
                        c_ji.nrows(),
                        cols.len()
                    )));
                }
                let d_cols = sys.d.columns(cols.start, cols.len()).into_owned();
                let s_cols = ssf.s.columns(cols.start, cols.len()).into_owned();
                let dh_cols = ah.d.columns(cols.start, cols.len()).into_owned();
                add_block(&mut drift, ox, state_offsets[j], &(d_cols * &c_ji));
                add_block(&mut drift, ox, abstract_offsets[j], &(&sys.b * s_cols * &ch_ji));
                add_block(&mut drift, oa, abstract_offsets[j], &(dh_cols * &ch_ji));
            }

            add_block(&mut diffusion, ox, ox, &sys.e);
            add_block(&mut diffusion, oa, oa, &ah.e);
            let abstract_brownian = if shared_drivers { i } else { n_sub + i };
            brownian_driver[ox..ox + n].fill(i);
            brownian_driver[oa..oa + nh].fill(abstract_brownian);

            for (slot, (jc, ja)) in sys.jumps.iter().zip(&ah.jumps).enumerate() {
                add_block(&mut resets[slot], ox, ox, &jc.r);
                add_block(&mut resets[slot], oa, oa, &ja.r);
                let concrete = jump_rates.len();
                jump_rates.push((jc.rate, false));
                let abstract_driver = if shared_drivers {
                    concrete
                } else {
                    jump_rates.push((ja.rate, true));
                    concrete + 1
                };
                for r in ox..ox + n {
                    jump_driver[slot][r] = Some(concrete);
                }
                for r in oa..oa + nh {
                    jump_driver[slot][r] = Some(abstract_driver);
                }
            }

            if let Some(rows) = spec.external_rows() {
                let q = rows.len();
                let c = sys.c.rows(rows.start, q).into_owned();
                let ch = ah.c.rows(rows.start, q).into_owned();
                add_block(&mut output, ext_offset, ox, &c);
                add_block(&mut abstract_output, ext_offset, oa, &ch);
                ext_offset += q;
            }
        }
        Ok(Self {
            drift,
            input,
            diffusion,
            brownian_driver,
            brownian_drivers: if shared_drivers { n_sub } else { 2 * n_sub },
            resets,
            jump_driver,
            jump_rates,
            n_concrete_brownian: n_sub,
            output,
            abstract_output,
            state_offsets,
            abstract_offsets,
            input_offsets,
        })
    }

    pub fn dim(&self) -> usize {
        self.drift.nrows()
    }

    pub fn input_width(&self) -> usize {
        self.input.ncols()
    }

    pub fn max_rate(&self) -> f64 {
        self.jump_rates.iter().map(|r| r.0).fold(0.0, f64::max)
    }

    /// Stacks per-subsystem concrete and abstract states into `z`.
    pub fn stack(&self, x: &[Vector], xh: &[Vector]) -> Result<Vector> {
        let mut z = Vector::zeros(self.dim());
        let n_sub = self.state_offsets.len();
        if x.len() != n_sub || xh.len() != n_sub {
            return Err(SimError::DimensionMismatch(format!(
                "expected {n_sub} initial states, got {} and {}",
                x.len(),
                xh.len()
            )));
        }
        let mut pieces: Vec<(usize, &Vector)> = Vec::new();
        pieces.extend(self.state_offsets.iter().copied().zip(x));
        pieces.extend(self.abstract_offsets.iter().copied().zip(xh));
        pieces.sort_by_key(|p| p.0);
        let mut cursor = 0;
        for (offset, v) in pieces {
            if offset != cursor {
                return Err(SimError::DimensionMismatch("initial state sizes".to_string()));
            }
            z.rows_mut(offset, v.len()).copy_from(v);
            cursor += v.len();
        }
        if cursor != self.dim() {
            return Err(SimError::DimensionMismatch("initial state sizes".to_string()));
        }
        Ok(z)
    }
}

fn add_block(target: &mut Matrix, row: usize, col: usize, block: &Matrix) {
    let mut view = target.view_mut((row, col), (block.nrows(), block.ncols()));
    view += block;
}

/// Per-trial record on the recording grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub gap_sq: Vec<f64>,
    pub set_dist_sq: Vec<f64>,
    /// Running maximum of `||zeta - zeta_hat||` over every step up to each grid point.
    pub sup_gap: Vec<f64>,
    /// Total Poisson events per driver.
    pub jump_counts: Vec<u64>,
    /// `(zeta, zeta_hat)` on the grid when paths are stored.
    pub paths: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub times: Vec<f64>,
    pub trials: Vec<TrialRecord>,
}

fn draw_poisson(rng: &mut ChaCha8Rng, dist: &Option<Poisson<f64>>) -> u64 {
    match dist {
        Some(d) => d.sample(rng) as u64,
        None => 0,
    }
}

fn run_trial(
    model: &CoupledModel,
    z0: &Vector,
    inputs: &InputTrajectory,
    cfg: &SimConfig,
    steps: usize,
    every: usize,
    trial: u64,
) -> TrialRecord {
    let dim = model.dim();
    let seed = cfg.master_seed;
    let mut brown = rng::stream(seed, trial, Role::Brownian);
    let mut pois = rng::stream(seed, trial, Role::Poisson);
    let mut abs_brown = rng::stream(seed, trial, Role::AbstractBrownian);
    let mut abs_pois = rng::stream(seed, trial, Role::AbstractPoisson);
    let dists: Vec<Option<Poisson<f64>>> = model
        .jump_rates
        .iter()
        .map(|(rate, _)| Poisson::new(rate * cfg.dt).ok())
        .collect();

    let mut z = z0.clone();
    let mut next = Vector::zeros(dim);
    let mut drift = Vector::zeros(dim);
    let mut noise = Vector::zeros(dim);
    let mut jump = Vector::zeros(dim);
    let mut forced = Vector::zeros(dim);
    let mut dw = vec![0.0; model.brownian_drivers];
    let mut dn = vec![0u64; model.jump_rates.len()];
    let mut counts = vec![0u64; model.jump_rates.len()];
    let sqrt_dt = cfg.dt.sqrt();
    let gap_op = &model.output - &model.abstract_output;
    let mut gap = Vector::zeros(gap_op.nrows());
    let mut zeta = Vector::zeros(gap_op.nrows());
    let mut zeta_hat = Vector::zeros(gap_op.nrows());

    let points = steps / every + 1;
    let mut rec = TrialRecord {
        gap_sq: Vec::with_capacity(points),
        set_dist_sq: Vec::with_capacity(points),
        sup_gap: Vec::with_capacity(points),
        jump_counts: Vec::new(),
        paths: cfg.store_paths.then(|| (Vec::with_capacity(points), Vec::with_capacity(points))),
    };
    let mut sup = 0.0f64;
    let mut current_input = usize::MAX;

    for step in 0..=steps {
        gap.gemv(1.0, &gap_op, &z, 0.0);
        let g2 = gap.norm_squared();
        sup = sup.max(g2.sqrt());
        if step % every == 0 {
            rec.gap_sq.push(g2);
            rec.sup_gap.push(sup);
            zeta.gemv(1.0, &model.output, &z, 0.0);
            rec.set_dist_sq.push(match cfg.safe_box {
                Some((lo, hi)) => set_distance_sq(zeta.as_slice(), lo, hi),
                None => 0.0,
            });
            if let Some((zs, zhs)) = rec.paths.as_mut() {
                zeta_hat.gemv(1.0, &model.abstract_output, &z, 0.0);
                zs.push(zeta.as_slice().to_vec());
                zhs.push(zeta_hat.as_slice().to_vec());
            }
        }
        if step == steps {
            break;
        }
        let t = step as f64 * cfg.dt;
        let idx = inputs.index_at(t);
        if idx != current_input {
            current_input = idx;
            let u = Vector::from_column_slice(&inputs.values()[idx]);
            forced.gemv(1.0, &model.input, &u, 0.0);
        }

        for (d, slot) in dw.iter_mut().enumerate() {
            let source = if d < model.n_concrete_brownian {
                &mut brown
            } else {
                &mut abs_brown
            };
            let xi: f64 = source.sample(StandardNormal);
            *slot = xi * sqrt_dt;
        }
        let mut any_jump = false;
        for (d, (_, from_abstract)) in model.jump_rates.iter().enumerate() {
            let source = if *from_abstract { &mut abs_pois } else { &mut pois };
            dn[d] = draw_poisson(source, &dists[d]);
            counts[d] += dn[d];
            any_jump |= dn[d] > 0;
        }

        drift.gemv(1.0, &model.drift, &z, 0.0);
        drift += &forced;
        noise.gemv(1.0, &model.diffusion, &z, 0.0);
        for r in 0..dim {
            next[r] = z[r] + drift[r] * cfg.dt + noise[r] * dw[model.brownian_driver[r]];
        }
        if any_jump {
            for (slot, reset) in model.resets.iter().enumerate() {
                let drivers = &model.jump_driver[slot];
                if !drivers.iter().any(|d| d.is_some_and(|d| dn[d] > 0)) {
                    continue;
                }
                jump.gemv(1.0, reset, &z, 0.0);
                for r in 0..dim {
                    if let Some(d) = drivers[r] {
                        next[r] += jump[r] * dn[d] as f64;
                    }
                }
            }
        }
        std::mem::swap(&mut z, &mut next);
    }
    rec.jump_counts = counts;
    rec
}

/// Runs `cfg.trials` independent coupled trials; trial `i` draws from
/// streams keyed by `(cfg.master_seed, i)` so results do not depend on scheduling.
pub fn run_coupled(
    model: &CoupledModel,
    x0: &[Vector],
    xh0: &[Vector],
    inputs: &InputTrajectory,
    cfg: &SimConfig,
) -> Result<Ensemble> {
    let (steps, every) = cfg.validate(model.max_rate())?;
    if inputs.width() != model.input_width() {
        return Err(SimError::DimensionMismatch(format!(
            "input trajectory has {} columns, the abstract network takes {}",
            inputs.width(),
            model.input_width()
        )));
    }
    let z0 = model.stack(x0, xh0)?;
    let trials: Vec<TrialRecord> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|i| run_trial(model, &z0, inputs, cfg, steps, every, i))
        .collect();
    let times = (0..=steps / every)
        .map(|k| (k * every) as f64 * cfg.dt)
        .collect();
    Ok(Ensemble { times, trials })
}

/// Errors unless the inputs of the listed subsystems vanish identically.
pub fn check_zero_inputs(
    net: &Network,
    model: &CoupledModel,
    inputs: &InputTrajectory,
    zero_ids: &[usize],
) -> Result<()> {
    for id in zero_ids {
        let i = net
            .index_of(*id)
            .ok_or_else(|| SimError::ConfigInvalid(format!("unknown subsystem {id}")))?;
        let start = model.input_offsets[i];
        let end = model.input_offsets.get(i + 1).copied().unwrap_or(model.input_width());
        if inputs.values().iter().any(|v| v[start..end].iter().any(|x| *x != 0.0)) {
            return Err(SimError::ConfigInvalid(format!(
                "subsystem {id} is declared zero-input but its input columns are nonzero"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

/// Sample mean and standard error (`n - 1` normalization) in trial order.
pub fn mean_se(samples: impl ExactSizeIterator<Item = f64> + Clone) -> MeanSe {
    let n = samples.len() as f64;
    let mean = samples.clone().sum::<f64>() / n;
    let var = samples.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    MeanSe {
        mean,
        se: (var / n).sqrt(),
    }
}

/// Mean and standard error of `||zeta - zeta_hat||^2` per grid point.
pub fn estimate_moment_gap(ens: &Ensemble) -> Result<Vec<MeanSe>> {
    if ens.trials.len() < 2 {
        return Err(SimError::TooFewTrials(ens.trials.len()));
    }
    Ok((0..ens.times.len())
        .map(|k| mean_se(ens.trials.iter().map(|r| r.gap_sq[k])))
        .collect())
}

/// Mean squared distance of `zeta` to the safe box per grid point.
pub fn estimate_set_distance(ens: &Ensemble) -> Vec<f64> {
    let n = ens.trials.len().max(1) as f64;
    (0..ens.times.len())
        .map(|k| ens.trials.iter().map(|r| r.set_dist_sq[k]).sum::<f64>() / n)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exceedance {
    pub epsilon: f64,
    pub horizon: f64,
    pub count: usize,
    pub trials: usize,
    pub fraction: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

/// Wilson score interval for `count` successes in `n` trials.
pub fn wilson_interval(count: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = count as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Fraction of trials whose discrete-time `sup ||zeta - zeta_hat||` over `[0, T]` reaches `eps`.
pub fn estimate_sup_exceedance(ens: &Ensemble, eps: f64, horizon: f64) -> Result<Exceedance> {
    let last = *ens.times.last().unwrap_or(&0.0);
    if !(eps >= 0.0) || !(horizon >= 0.0) || horizon > last + 1e-9 {
        return Err(SimError::InvalidArgs(format!(
            "need eps >= 0 and 0 <= T <= {last}, got eps = {eps}, T = {horizon}"
        )));
    }
    let k = ens.times.partition_point(|t| *t <= horizon + 1e-9) - 1;
    let count = ens.trials.iter().filter(|r| r.sup_gap[k] >= eps).count();
    let n = ens.trials.len();
    let (wilson_low, wilson_high) = wilson_interval(count, n, Z95);
    Ok(Exceedance {
        epsilon: eps,
        horizon,
        count,
        trials: n,
        fraction: if n == 0 { 0.0 } else { count as f64 / n as f64 },
        wilson_low,
        wilson_high,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub t: f64,
    pub mean_gap_sq: f64,
    pub se: f64,
    pub bound: f64,
    pub mean_set_dist_sq: f64,
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("t,mean_gap_sq,se,bound,mean_set_dist_sq\n");
    for r in rows {
        out.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            r.t, r.mean_gap_sq, r.se, r.bound, r.mean_set_dist_sq
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceCheck {
    pub empirical: Exceedance,
    pub bound: f64,
    pub bound_raw: f64,
    /// `wilson_low <= bound`.
    pub dominated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub slopes: GainSlopes,
    pub ev0: f64,
    /// `sup_t ||u_hat(t)||^2`
    pub eu_hat: f64,
    pub eps_const: f64,
    /// `max_t (mean - bound - 3 se - ROUNDOFF_FLOOR (1 + bound))`; nonpositive when the moment bound dominates.
    pub worst_moment_excess: f64,
    pub worst_moment_time: f64,
    pub moment_dominated: bool,
    pub exceedance: Vec<ExceedanceCheck>,
    pub mean_jump_counts: Vec<f64>,
    pub passed: bool,
}

/// Simulation scenario for a composed network.
pub struct Scenario<'a> {
    pub net: &'a Network,
    pub abstractions: &'a [AbstractionResult],
    pub certificate: &'a CompositionCertificate,
    pub x0: &'a [Vector],
    pub xh0: &'a [Vector],
    pub inputs: &'a InputTrajectory,
    pub epsilons: &'a [f64],
    pub exceedance_horizons: &'a [f64],
}

pub const EXCEEDANCE_EPSILONS: [f64; 3] = [0.5, 1.0, 2.0];
pub const EXCEEDANCE_HORIZONS: [f64; 2] = [5.0, 15.0];

/// Runs the ensemble and compares it with the certified moment and sup bounds.
pub fn simulate_and_check(sc: &Scenario, cfg: &SimConfig) -> Result<(Vec<SummaryRow>, SimReport)> {
    let model = CoupledModel::new(sc.net, sc.abstractions, cfg.shared_drivers)?;
    check_zero_inputs(sc.net, &model, sc.inputs, &sc.certificate.zero_input_ids)?;
    let ens = run_coupled(&model, sc.x0, sc.xh0, sc.inputs, cfg)?;
    let slopes = GainSlopes::from_certificate(sc.certificate)?;
    let ev0 = composition::composite_v(sc.certificate, sc.abstractions, sc.x0, sc.xh0)?;
    let eu_hat = sc.inputs.sup_norm_sq(cfg.horizon);
    let eps_const = slopes.r_e * eu_hat;

    let gap = estimate_moment_gap(&ens)?;
    let dist = estimate_set_distance(&ens);
    let mut rows = Vec::with_capacity(ens.times.len());
    let mut worst = f64::NEG_INFINITY;
    let mut worst_t = 0.0;
    for (k, t) in ens.times.iter().enumerate() {
        let bound = bounds::moment_bound(&slopes, ev0, eu_hat, 0.0, *t)?;
        let excess = gap[k].mean - bound - 3.0 * gap[k].se - ROUNDOFF_FLOOR * (1.0 + bound);
        if excess > worst {
            worst = excess;
            worst_t = *t;
        }
        rows.push(SummaryRow {
            t: *t,
            mean_gap_sq: gap[k].mean,
            se: gap[k].se,
            bound,
            mean_set_dist_sq: dist[k],
        });
    }

    let mut exceedance = Vec::new();
    for &horizon in sc.exceedance_horizons {
        if horizon > cfg.horizon + 1e-9 {
            continue;
        }
        for &eps in sc.epsilons {
            let empirical = estimate_sup_exceedance(&ens, eps, horizon)?;
            let p = bounds::sup_probability_bound(&slopes, ev0, eps, horizon, eps_const)?;
            exceedance.push(ExceedanceCheck {
                empirical,
                bound: p.value,
                bound_raw: p.raw,
                dominated: empirical.wilson_low <= p.value,
            });
        }
    }
    let n = ens.trials.len() as f64;
    let drivers = model.jump_rates.len();
    let mean_jump_counts = (0..drivers)
        .map(|d| ens.trials.iter().map(|r| r.jump_counts[d] as f64).sum::<f64>() / n)
        .collect();
    let moment_dominated = worst <= 0.0;
    let passed = moment_dominated && exceedance.iter().all(|e| e.dominated);
    Ok((
        rows,
        SimReport {
            config: cfg.clone(),
            slopes,
            ev0,
            eu_hat,
            eps_const,
            worst_moment_excess: worst,
            worst_moment_time: worst_t,
            moment_dominated,
            exceedance,
            mean_jump_counts,
            passed,
        },
    ))
}

/// Outcome of one behavior-preservation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRun {
    pub sup_gap: f64,
    pub sup_output: f64,
}

/// Drives the concrete subsystem with random piecewise-constant `u` and `w`
/// and the abstraction from `x̂ = P̂ x` with `û = [u - Q P̂ x - S w; F x]`,
/// both on the same noise paths, and records `sup ||zeta - zeta_hat||`.
pub fn behavior_preservation_run(
    sys: &JlssSystem,
    abs: &AbstractionResult,
    x0: &Vector,
    dt: f64,
    horizon: f64,
    hold: f64,
    seed: u64,
    trial: u64,
) -> Result<BehaviorRun> {
    let bp = abs
        .bp
        .as_ref()
        .ok_or_else(|| SimError::ConfigInvalid("abstraction is not behavior preserving".to_string()))?;
    let ah = &abs.abs_sys;
    let ssf = &abs.ssf;
    let steps = (horizon / dt).round() as usize;
    let hold_steps = ((hold / dt).round() as usize).max(1);
    let mut brown = rng::stream(seed, trial, Role::Brownian);
    let mut pois = rng::stream(seed, trial, Role::Poisson);
    let mut inputs = rng::stream(seed, trial, Role::Inputs);
    let dists: Vec<Option<Poisson<f64>>> = sys.jumps.iter().map(|j| Poisson::new(j.rate * dt).ok()).collect();

    let mut x = x0.clone();
    let mut xh = &bp.p_hat * x0;
    let mut u = Vector::zeros(sys.m());
    let mut w = Vector::zeros(sys.p());
    let mut out = BehaviorRun {
        sup_gap: 0.0,
        sup_output: 0.0,
    };
    let mut dn = vec![0u64; sys.jumps.len()];
    for step in 0..=steps {
        let zeta = sys.output(&x);
        let zeta_hat = ah.output(&xh);
        out.sup_gap = out.sup_gap.max((&zeta - &zeta_hat).norm());
        out.sup_output = out.sup_output.max(zeta.norm());
        if step == steps {
            break;
        }
        if step % hold_steps == 0 {
            u = Vector::from_fn(sys.m(), |_, _| inputs.random_range(-1.0..=1.0));
            w = Vector::from_fn(sys.p(), |_, _| inputs.random_range(-1.0..=1.0));
        }
        let top = &u - &ssf.q * (&bp.p_hat * &x) - &ssf.s * &w;
        let bottom = &bp.f * &x;
        let mut uh = Vector::zeros(top.len() + bottom.len());
        uh.rows_mut(0, top.len()).copy_from(&top);
        uh.rows_mut(top.len(), bottom.len()).copy_from(&bottom);
        let xi: f64 = brown.sample(StandardNormal);
        let dw = xi * dt.sqrt();
        for (slot, dist) in dn.iter_mut().zip(&dists) {
            *slot = draw_poisson(&mut pois, dist);
        }
        let x_next = step_jlss(sys, &x, &u, &w, dt, dw, &dn)?;
        xh = step_jlss(ah, &xh, &uh, &w, dt, dw, &dn)?;
        x = x_next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Jump;

    fn scalar(a: f64, e: f64, jumps: Vec<Jump>) -> JlssSystem {
        JlssSystem::new(
            Matrix::from_element(1, 1, a),
            Matrix::zeros(1, 0),
            Matrix::from_element(1, 1, 1.0),
            Matrix::zeros(1, 0),
            Matrix::from_element(1, 1, e),
            jumps,
        )
        .unwrap()
    }

    #[test]
    fn step_examples() {
        let none = Vector::zeros(0);
        let x = Vector::from_vec(vec![1.0]);
        let still = scalar(0.0, 0.0, vec![]);
        assert_eq!(step_jlss(&still, &x, &none, &none, 0.1, 0.0, &[]).unwrap(), x);
        let jump = scalar(
            0.0,
            0.0,
            vec![Jump {
                rate: 1.0,
                r: Matrix::from_element(1, 1, 0.1),
            }],
        );
        let y = step_jlss(&jump, &x, &none, &none, 0.1, 0.0, &[1]).unwrap();
        assert!((y[0] - 1.1).abs() < 1e-15);
        let decay = scalar(-2.0, 0.0, vec![]);
        assert_eq!(step_jlss(&decay, &x, &none, &none, 0.5, 0.0, &[]).unwrap()[0], 0.0);
        assert!(step_jlss(&decay, &x, &none, &none, 0.5, 0.0, &[1]).is_err());
    }

    #[test]
    fn input_hold() {
        let u = InputTrajectory::new(vec![0.0, 0.1, 0.2], vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(u.at(0.0), &[1.0]);
        assert_eq!(u.at(0.099), &[1.0]);
        assert_eq!(u.at(100.0 * 0.001), &[2.0]);
        assert_eq!(u.at(7.0), &[3.0]);
        assert_eq!(u.sup_norm_sq(0.15), 4.0);
        let back = InputTrajectory::from_csv(&u.to_csv()).unwrap();
        assert_eq!(back, u);
        assert!(InputTrajectory::new(vec![0.0, 0.0], vec![vec![1.0], vec![1.0]]).is_err());
        assert!(InputTrajectory::from_csv("t,u_1\n0,abc\n").is_err());
    }

    #[test]
    fn set_distance_examples() {
        assert_eq!(set_distance_sq(&[7.0], 0.0, 5.0), 4.0);
        assert_eq!(set_distance_sq(&[1.0, 4.0], 0.0, 5.0), 0.0);
        assert_eq!(set_distance_sq(&[-1.0, 6.0], 0.0, 5.0), 2.0);
    }

    #[test]
    fn mean_se_hand_example() {
        let m = mean_se([0.0, 2.0].into_iter());
        assert_eq!(m.mean, 1.0);
        assert_eq!(m.se, 1.0);
    }

    #[test]
    fn wilson_endpoints() {
        let (lo, hi) = wilson_interval(0, 100, Z95);
        assert!(lo.abs() < 1e-15);
        assert!(hi > 0.0 && hi < 0.05);
        let (lo, hi) = wilson_interval(50, 100, Z95);
        assert!((lo + hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let cfg = SimConfig {
            dt: 0.05,
            ..SimConfig::default()
        };
        assert!(cfg.validate(4.2).is_err());
        let cfg = SimConfig {
            horizon: 1.0005,
            ..SimConfig::default()
        };
        assert!(cfg.validate(4.2).is_err());
        assert_eq!(SimConfig::default().validate(4.2).unwrap(), (15000, 10));
    }
}
