//! Command-line front end: `abstract`, `compose`, `bounds`, `simulate`, `verify`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{self, AbstractionError, AbstractionOptions, AbstractionResult, BhatMode};
use crate::bounds::{self, BoundQuery, GainSlopes};
use crate::composition::{self, ComposeOptions, CompositionCertificate, CompositionError};
use crate::linalg::{Matrix, Vector, TOL_EQ};
use crate::matrix_serde;
use crate::model::{JlssSystem, Network};
use crate::simulate::{self, InputTrajectory, Scenario, SimConfig};
use crate::ssf;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Condition(String),
    #[error("small-gain condition fails: spectral radius {radius}")]
    SmallGain { radius: f64 },
    #[error("{0}")]
    Dominance(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 1,
            Self::Condition(_) => 2,
            Self::SmallGain { .. } => 3,
            Self::Dominance(_) => 4,
        }
    }
}

impl From<AbstractionError> for CliError {
    fn from(e: AbstractionError) -> Self {
        Self::Condition(format!("table step {}: {e}", e.step()))
    }
}

impl From<CompositionError> for CliError {
    fn from(e: CompositionError) -> Self {
        match e {
            CompositionError::Infeasible { radius } => Self::SmallGain { radius },
            other => Self::Condition(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "jlssabs", version, about = "Compositional abstractions of jump linear stochastic systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the abstraction of one subsystem from its map P.
    Abstract(AbstractArgs),
    /// Compose subsystem certificates under the small-gain condition.
    Compose(ComposeArgs),
    /// Evaluate moment and probability bounds of a certificate.
    Bounds(BoundsArgs),
    /// Monte Carlo check of the certified bounds on the composed network.
    Simulate(SimulateArgs),
    /// Re-run residual and randomized checks on stored artifacts.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct AbstractArgs {
    /// JSON system, or a network together with `--id`.
    #[arg(long)]
    pub system: PathBuf,
    #[arg(long)]
    pub id: Option<usize>,
    /// Abstraction map P as CSV rows or a JSON nested array.
    #[arg(long = "p")]
    pub p: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    pub kappa_hat: f64,
    #[arg(long, default_value_t = 1.0)]
    pub pi: f64,
    /// identity, behavior, or file:PATH
    #[arg(long, default_value = "identity")]
    pub bhat: String,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    #[arg(long)]
    pub network: PathBuf,
    /// One abstraction per subsystem, in network order.
    #[arg(long, num_args = 1.., required = true)]
    pub abstractions: Vec<PathBuf>,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub triangle_mode: bool,
    #[arg(long)]
    pub paper_example_mode: bool,
    /// Ids whose abstract external inputs are held at zero.
    #[arg(long, value_delimiter = ',')]
    pub zero_inputs: Vec<usize>,
    /// Fixed weights instead of the computed ones.
    #[arg(long, value_delimiter = ',')]
    pub mu: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long)]
    pub certificate: PathBuf,
    /// `E[V(x0, x̂0)]`; computed from `--network`, `--abstractions`, `--init` when omitted.
    #[arg(long)]
    pub ev0: Option<f64>,
    #[arg(long)]
    pub network: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub abstractions: Vec<PathBuf>,
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// `E||û||_inf^k`
    #[arg(long, default_value_t = 0.0)]
    pub input_norm: f64,
    /// `E||w - ŵ||_inf^k`
    #[arg(long, default_value_t = 0.0)]
    pub w_mismatch: f64,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    #[arg(long, visible_alias = "T", default_value_t = 15.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dt: f64,
    #[arg(long)]
    pub paper_example_mode: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub network: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub abstractions: Vec<PathBuf>,
    #[arg(long)]
    pub certificate: PathBuf,
    /// CSV `t,u_1..u_m`; zero input when omitted.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    /// JSON `{"x": [[..], ..], "x_hat": [[..], ..]}`.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    #[arg(long, default_value_t = 15.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = simulate::EXCEEDANCE_EPSILONS)]
    pub epsilon: Vec<f64>,
    #[arg(long = "T", value_delimiter = ',', default_values_t = simulate::EXCEEDANCE_HORIZONS)]
    pub t_sup: Vec<f64>,
    /// `lo,hi` interval applied to each external output.
    #[arg(long, value_parser = parse_interval)]
    pub safe_box: Option<(f64, f64)>,
    #[arg(long)]
    pub paper_example_mode: bool,
    /// Draw separate noise for the abstraction (sensitivity studies only).
    #[arg(long)]
    pub independent_drivers: bool,
    /// Output directory for summary.csv and report.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub network: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub abstractions: Vec<PathBuf>,
    #[arg(long)]
    pub certificate: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Initial states of every subsystem and its abstraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialStates {
    pub x: Vec<Vec<f64>>,
    pub x_hat: Vec<Vec<f64>>,
}

impl InitialStates {
    pub fn vectors(&self) -> (Vec<Vector>, Vec<Vector>) {
        let conv = |v: &Vec<Vec<f64>>| v.iter().map(|s| Vector::from_vec(s.clone())).collect();
        (conv(&self.x), conv(&self.x_hat))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
        }
    }
    fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Reads a matrix from CSV rows or a JSON nested array.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let text = read(path)?;
    let rows: Vec<Vec<f64>> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
    } else {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(input_err)?;
            let row: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
            rows.push(row.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?);
        }
        rows
    };
    matrix_serde::from_rows(&rows).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Loads a system file; a network file needs `id` to pick the subsystem.
pub fn load_system(path: &Path, id: Option<usize>) -> Result<JlssSystem> {
    let text = read(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if value.get("subsystems").is_some() {
        let net = Network::from_json(&text).map_err(input_err)?;
        let id = id.ok_or_else(|| CliError::Input("network file given without --id".to_string()))?;
        let i = net
            .index_of(id)
            .ok_or_else(|| CliError::Input(format!("no subsystem with id {id}")))?;
        Ok(net.subsystems[i].sys.clone())
    } else {
        serde_json::from_value(value).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}

pub fn load_network(path: &Path) -> Result<Network> {
    let net = Network::from_json(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let violations = crate::model::validate_network(&net);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(CliError::Input(format!("invalid network: {}", list.join("; "))));
    }
    Ok(net)
}

pub fn load_abstractions(net: &Network, paths: &[PathBuf]) -> Result<Vec<AbstractionResult>> {
    if paths.len() != net.len() {
        return Err(CliError::Input(format!(
            "{} abstraction files for {} subsystems",
            paths.len(),
            net.len()
        )));
    }
    paths
        .iter()
        .zip(&net.subsystems)
        .map(|(p, s)| {
            AbstractionResult::from_json(&read(p)?, &s.sys).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn load_certificate(path: &Path) -> Result<CompositionCertificate> {
    CompositionCertificate::from_json(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_init(path: &Path) -> Result<InitialStates> {
    serde_json::from_str(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn parse_interval(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [lo, hi] = parts.as_slice() else {
        return Err(format!("expected lo,hi, got {s}"));
    };
    let lo: f64 = lo.parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.parse().map_err(|e| format!("{e}"))?;
    if lo > hi {
        return Err(format!("empty interval {s}"));
    }
    Ok((lo, hi))
}

pub fn parse_bhat(spec: &str) -> Result<BhatMode> {
    match spec {
        "identity" => Ok(BhatMode::Identity),
        "behavior" => Ok(BhatMode::BehaviorPreserving),
        other => match other.strip_prefix("file:") {
            Some(path) => Ok(BhatMode::User(read_matrix(Path::new(path))?)),
            None => Err(CliError::Input(format!(
                "--bhat must be identity, behavior or file:PATH, got {other}"
            ))),
        },
    }
}

pub fn cmd_abstract(args: &AbstractArgs) -> Result<()> {
    let sys = load_system(&args.system, args.id)?;
    let p = read_matrix(&args.p)?;
    if !(args.kappa_hat > 0.0) || !(args.pi > 0.0) {
        return Err(CliError::Input("--kappa-hat and --pi must be positive".to_string()));
    }
    let opts = AbstractionOptions {
        kappa_hat: args.kappa_hat,
        pi: args.pi,
        bhat: parse_bhat(&args.bhat)?,
        verify_samples: args.samples,
        seed: args.seed,
        ..AbstractionOptions::default()
    };
    let result = abstraction::build_abstraction(&sys, &p, &opts)?;
    write(&args.out, &result.to_json())
}

pub fn cmd_compose(args: &ComposeArgs) -> Result<CompositionCertificate> {
    let net = load_network(&args.network)?;
    let abstractions = load_abstractions(&net, &args.abstractions)?;
    let gains: Vec<_> = abstractions.iter().map(|a| a.gains.clone()).collect();
    let opts = ComposeOptions {
        triangle_mode: args.triangle_mode,
        paper_example_mode: args.paper_example_mode,
        zero_input_ids: args.zero_inputs.clone(),
        mu: args.mu.clone(),
    };
    let cert = composition::compose(&net, &gains, &opts)?;
    write(&args.out, &cert.to_json())?;
    Ok(cert)
}

pub fn cmd_bounds(args: &BoundsArgs) -> Result<()> {
    let mut cert = load_certificate(&args.certificate)?;
    cert.paper_example_mode |= args.paper_example_mode;
    let slopes = GainSlopes::from_certificate(&cert).map_err(input_err)?;
    let ev0 = match args.ev0 {
        Some(v) => v,
        None => {
            let (Some(net), Some(init)) = (&args.network, &args.init) else {
                return Err(CliError::Input(
                    "give --ev0, or --network, --abstractions and --init".to_string(),
                ));
            };
            let net = load_network(net)?;
            let abstractions = load_abstractions(&net, &args.abstractions)?;
            let (x, xh) = load_init(init)?.vectors();
            composition::composite_v(&cert, &abstractions, &x, &xh).map_err(input_err)?
        }
    };
    let query = BoundQuery {
        ev0,
        eu_hat: args.input_norm,
        ew_mismatch: args.w_mismatch,
        epsilon: args.epsilon,
        horizon: args.horizon,
        dt: args.dt,
    };
    let report = bounds::bound_report(&slopes, &query).map_err(input_err)?;
    write(&args.out, &report.to_csv())
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<simulate::SimReport> {
    let net = load_network(&args.network)?;
    let abstractions = load_abstractions(&net, &args.abstractions)?;
    let mut cert = load_certificate(&args.certificate)?;
    cert.paper_example_mode |= args.paper_example_mode;
    let width: usize = abstractions.iter().map(|a| a.abs_sys.m()).sum();
    let inputs = match &args.inputs {
        Some(p) => InputTrajectory::from_csv(&read(p)?).map_err(input_err)?,
        None => InputTrajectory::zero(width),
    };
    let (x, xh) = load_init(&args.init)?.vectors();
    let safe_box = args.safe_box;
    let cfg = SimConfig {
        dt: args.dt,
        horizon: args.horizon,
        trials: args.trials,
        master_seed: args.seed,
        shared_drivers: !args.independent_drivers,
        safe_box,
        ..SimConfig::default()
    };
    let scenario = Scenario {
        net: &net,
        abstractions: &abstractions,
        certificate: &cert,
        x0: &x,
        xh0: &xh,
        inputs: &inputs,
        epsilons: &args.epsilon,
        exceedance_horizons: &args.t_sup,
    };
    let (rows, report) = simulate::simulate_and_check(&scenario, &cfg).map_err(input_err)?;
    write(&args.out.join("summary.csv"), &simulate::summary_csv(&rows))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&args.out.join("report.json"), &json)?;
    if !report.passed {
        return Err(CliError::Dominance(format!(
            "bound dominance fails: worst moment excess {:e} at t = {}",
            report.worst_moment_excess, report.worst_moment_time
        )));
    }
    Ok(report)
}

/// One line per audited item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLine {
    pub item: String,
    pub value: f64,
    pub passed: bool,
}

pub fn audit(
    net: &Network,
    abstractions: &[AbstractionResult],
    cert: Option<&CompositionCertificate>,
    samples: usize,
    seed: u64,
) -> Result<Vec<AuditLine>> {
    let mut lines = Vec::new();
    for (spec, abs) in net.subsystems.iter().zip(abstractions) {
        let id = spec.id;
        let report = ssf::verify_ssf(&abs.ssf, &spec.sys, &abs.abs_sys, &abs.gains, samples, seed)
            .map_err(|e| CliError::Condition(format!("subsystem {id}: {e}")))?;
        let margin = report.margins.con1.min(report.margins.con11);
        lines.push(AuditLine {
            item: format!("subsystem {id}: design inequality margin"),
            value: margin,
            passed: report.margins.satisfied(0.0),
        });
        lines.push(AuditLine {
            item: format!("subsystem {id}: abstraction equation residual"),
            value: report.con2.max(),
            passed: report.con2.max() <= TOL_EQ,
        });
        lines.push(AuditLine {
            item: format!("subsystem {id}: worst sampled dissipation slack"),
            value: report.worst_slack,
            passed: report.passed,
        });
        if let Some(bp) = &abs.bp {
            let r = abstraction::con3_residuals(&spec.sys, &abs.ssf.p, &abs.abs_sys.c, bp);
            let worst = [r.output, r.resolution, r.left_inverse, r.diffusion, r.reset]
                .into_iter()
                .fold(0.0, f64::max);
            lines.push(AuditLine {
                item: format!("subsystem {id}: behavior-preservation residual"),
                value: worst,
                passed: worst <= TOL_EQ,
            });
        }
    }
    if let Some(cert) = cert {
        let gains: Vec<_> = abstractions.iter().map(|a| a.gains.clone()).collect();
        let opts = ComposeOptions {
            triangle_mode: cert.triangle_mode,
            paper_example_mode: cert.paper_example_mode,
            zero_input_ids: cert.zero_input_ids.clone(),
            mu: Some(cert.mu.clone()),
        };
        let recomputed = composition::compose(net, &gains, &opts);
        let (value, passed) = match &recomputed {
            Ok(c) => {
                let drift = (&c.delta - &cert.delta).norm() + (&c.lambda - &cert.lambda).norm();
                (drift, drift <= TOL_EQ)
            }
            Err(CompositionError::Infeasible { radius }) => (*radius, false),
            Err(_) => (f64::NAN, false),
        };
        lines.push(AuditLine {
            item: "composition: small-gain certificate for stored mu".to_string(),
            value,
            passed,
        });
    }
    Ok(lines)
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<Vec<AuditLine>> {
    let net = load_network(&args.network)?;
    let abstractions = load_abstractions(&net, &args.abstractions)?;
    let cert = args.certificate.as_deref().map(load_certificate).transpose()?;
    let lines = audit(&net, &abstractions, cert.as_ref(), args.samples, args.seed)?;
    for l in &lines {
        println!("{} {}: {:e}", if l.passed { "PASS" } else { "FAIL" }, l.item, l.value);
    }
    if lines.iter().any(|l| !l.passed) {
        return Err(CliError::Condition("verification failed".to_string()));
    }
    Ok(lines)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Abstract(a) => cmd_abstract(&a),
        Command::Compose(a) => cmd_compose(&a).map(|c| {
            println!("spectral radius {:.8}; mu = {:?}", c.spectral_radius, c.mu);
        }),
        Command::Bounds(a) => cmd_bounds(&a),
        Command::Simulate(a) => cmd_simulate(&a).map(|r| {
            println!(
                "moment bound dominates (worst excess {:e}); ev0 = {}",
                r.worst_moment_excess, r.ev0
            );
        }),
        Command::Verify(a) => cmd_verify(&a).map(|_| ()),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            if let CliError::SmallGain { radius } = &e {
                eprintln!("error: small-gain condition fails; spectral radius {radius:.8}");
            } else {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    }
}
