//! Jump linear stochastic systems and their interconnection.
//!
//! A subsystem evolves as
//! `dx = (A x + B u + D w) dt + E x dW + sum_i R_i x dN_i`, `y = C x`,
//! with a scalar Brownian motion `W` and independent Poisson counters `N_i`
//! of rate `lambda_i`. The internal input `w` and output `y` are partitioned
//! into blocks wired to peer subsystems.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::linalg::{Matrix, Vector};
use crate::matrix_serde::{self, fit_empty};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{matrix} has shape {got:?}, expected {expected:?}")]
    Shape {
        matrix: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("jump rate {0} is negative or not finite")]
    InvalidRate(f64),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("moment order k = {0} is not supported here (synthesis requires k = 2)")]
    UnsupportedMomentOrder(u32),
    #[error("parse error: {0}")]
    Parse(String),
}

/// One Poisson-triggered reset `x -> x + R x` with rate `rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub rate: f64,
    #[serde(rename = "R", with = "matrix_serde")]
    pub r: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JlssSystem {
    #[serde(rename = "A", with = "matrix_serde")]
    pub a: Matrix,
    #[serde(rename = "B", with = "matrix_serde")]
    pub b: Matrix,
    #[serde(rename = "C", with = "matrix_serde")]
    pub c: Matrix,
    #[serde(rename = "D", with = "matrix_serde")]
    pub d: Matrix,
    #[serde(rename = "E", with = "matrix_serde")]
    pub e: Matrix,
    pub jumps: Vec<Jump>,
}

#[derive(Deserialize)]
struct RawSystem {
    #[serde(rename = "A", with = "matrix_serde")]
    a: Matrix,
    #[serde(rename = "B", with = "matrix_serde", default = "empty")]
    b: Matrix,
    #[serde(rename = "C", with = "matrix_serde", default = "empty")]
    c: Matrix,
    #[serde(rename = "D", with = "matrix_serde", default = "empty")]
    d: Matrix,
    #[serde(rename = "E", with = "matrix_serde", default = "empty")]
    e: Matrix,
    #[serde(default)]
    jumps: Vec<Jump>,
}

fn empty() -> Matrix {
    Matrix::zeros(0, 0)
}

impl<'de> Deserialize<'de> for JlssSystem {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawSystem::deserialize(d)?;
        JlssSystem::new(raw.a, raw.b, raw.c, raw.d, raw.e, raw.jumps).map_err(de::Error::custom)
    }
}

fn check_shape(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<(), ModelError> {
    if m.shape() != (rows, cols) {
        return Err(ModelError::Shape {
            matrix: name.to_string(),
            expected: (rows, cols),
            got: m.shape(),
        });
    }
    Ok(())
}

impl JlssSystem {
    /// Validates dimensions and rates. Empty `B`, `C`, `D` are reshaped to
    /// `n×0`, `0×n`, `n×0`; an empty `E` means no diffusion.
    pub fn new(
        a: Matrix,
        b: Matrix,
        c: Matrix,
        d: Matrix,
        e: Matrix,
        jumps: Vec<Jump>,
    ) -> Result<Self, ModelError> {
        let n = a.nrows();
        check_shape("A", &a, n, n)?;
        let b = fit_empty(b, n, 0);
        let c = fit_empty(c, 0, n);
        let d = fit_empty(d, n, 0);
        let e = if e.is_empty() { Matrix::zeros(n, n) } else { e };
        check_shape("B", &b, n, b.ncols())?;
        check_shape("C", &c, c.nrows(), n)?;
        check_shape("D", &d, n, d.ncols())?;
        check_shape("E", &e, n, n)?;
        for (i, j) in jumps.iter().enumerate() {
            if !(j.rate.is_finite() && j.rate >= 0.0) {
                return Err(ModelError::InvalidRate(j.rate));
            }
            check_shape(&format!("R[{i}]"), &j.r, n, n)?;
        }
        Ok(Self { a, b, c, d, e, jumps })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn p(&self) -> usize {
        self.d.ncols()
    }
    pub fn q(&self) -> usize {
        self.c.nrows()
    }

    pub fn rates(&self) -> Vec<f64> {
        self.jumps.iter().map(|j| j.rate).collect()
    }

    /// `(rate, R)` pairs in the form expected by the Lyapunov solver.
    pub fn jump_pairs(&self) -> Vec<(f64, Matrix)> {
        self.jumps.iter().map(|j| (j.rate, j.r.clone())).collect()
    }

    /// `A + B K + sum_i lambda_i R_i`.
    pub fn closed_loop_mean_drift(&self, k: &Matrix) -> Matrix {
        let mut abar = &self.a + &self.b * k;
        for j in &self.jumps {
            abar += &j.r * j.rate;
        }
        abar
    }

    pub fn drift(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector {
        &self.a * x + &self.b * u + &self.d * w
    }

    pub fn output(&self, x: &Vector) -> Vector {
        &self.c * x
    }
}

/// Peer of an output block: another subsystem or the external environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Peer(usize),
    External,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Peer(id) => write!(f, "{id}"),
            Endpoint::External => f.write_str("ext"),
        }
    }
}

impl Serialize for Endpoint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Endpoint::Peer(id) => s.serialize_u64(*id as u64),
            Endpoint::External => s.serialize_str("ext"),
        }
    }
}

impl<'de> Deserialize<'de> for Endpoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct EndpointVisitor;
        impl Visitor<'_> for EndpointVisitor {
            type Value = Endpoint;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a subsystem id or \"ext\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Endpoint, E> {
                Ok(Endpoint::Peer(v as usize))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Endpoint, E> {
                usize::try_from(v)
                    .map(Endpoint::Peer)
                    .map_err(|_| E::custom("subsystem id must be nonnegative"))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Endpoint, E> {
                if v == "ext" {
                    Ok(Endpoint::External)
                } else {
                    v.parse()
                        .map(Endpoint::Peer)
                        .map_err(|_| E::custom(format!("unknown endpoint {v:?}")))
                }
            }
        }
        d.deserialize_any(EndpointVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBlock {
    pub from: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputBlock {
    pub to: Endpoint,
    pub rows: usize,
}

/// A subsystem with its internal input columns and output rows partitioned by peer.
/// Peers without a declared block are not connected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsystemSpec {
    pub id: usize,
    #[serde(flatten)]
    pub sys: JlssSystem,
    #[serde(default)]
    pub inputs: Vec<InputBlock>,
    #[serde(default)]
    pub outputs: Vec<OutputBlock>,
}

impl SubsystemSpec {
    /// Rows of `C` belonging to the block sent to `to`.
    pub fn output_rows(&self, to: Endpoint) -> Option<Range<usize>> {
        let mut start = 0;
        for block in &self.outputs {
            if block.to == to {
                return Some(start..start + block.rows);
            }
            start += block.rows;
        }
        None
    }

    /// Columns of `D` fed by subsystem `from`.
    pub fn input_cols(&self, from: usize) -> Option<Range<usize>> {
        let mut start = 0;
        for block in &self.inputs {
            if block.from == from {
                return Some(start..start + block.width);
            }
            start += block.width;
        }
        None
    }

    pub fn output_block(&self, c: &Matrix, to: Endpoint) -> Option<Matrix> {
        self.output_rows(to)
            .map(|r| c.rows(r.start, r.len()).into_owned())
    }

    pub fn input_block(&self, d: &Matrix, from: usize) -> Option<Matrix> {
        self.input_cols(from)
            .map(|r| d.columns(r.start, r.len()).into_owned())
    }

    pub fn external_rows(&self) -> Option<Range<usize>> {
        self.output_rows(Endpoint::External)
    }
}

/// Interconnection constraint or bookkeeping failure.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("duplicate subsystem id {0}")]
    DuplicateId(usize),
    #[error("subsystem {0} is wired to itself")]
    SelfLoop(usize),
    #[error("subsystem {id}: input widths sum to {declared}, but D has {actual} columns")]
    InputWidths { id: usize, declared: usize, actual: usize },
    #[error("subsystem {id}: output rows sum to {declared}, but C has {actual} rows")]
    OutputRows { id: usize, declared: usize, actual: usize },
    #[error("subsystem {id}: block for peer {peer} declared more than once")]
    DuplicateBlock { id: usize, peer: Endpoint },
    #[error("subsystem {id} references unknown subsystem {peer}")]
    UnknownPeer { id: usize, peer: usize },
    #[error("width mismatch on ({i},{j}): input width {input} vs output rows {output}")]
    WidthMismatch {
        i: usize,
        j: usize,
        input: usize,
        output: usize,
    },
    #[error("subsystem {i} takes input from {j}, but {j} has no output block to {i}")]
    MissingOutput { i: usize, j: usize },
    #[error("subsystem {j} sends output to {i}, but {i} has no input block from {j}")]
    MissingInput { i: usize, j: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    #[serde(default = "default_k")]
    pub k: u32,
    pub subsystems: Vec<SubsystemSpec>,
}

fn default_k() -> u32 {
    2
}

impl Network {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    /// Position of subsystem `id` in `subsystems`.
    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.subsystems.iter().position(|s| s.id == id)
    }

    pub fn require_k2(&self) -> Result<(), ModelError> {
        if self.k != 2 {
            return Err(ModelError::UnsupportedMomentOrder(self.k));
        }
        Ok(())
    }
}

/// Checks the interconnection constraints `p_ij = q_ji` and block bookkeeping.
pub fn validate_network(net: &Network) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut by_id: BTreeMap<usize, &SubsystemSpec> = BTreeMap::new();
    for s in &net.subsystems {
        if by_id.insert(s.id, s).is_some() {
            out.push(Violation::DuplicateId(s.id));
        }
    }
    for s in &net.subsystems {
        let declared: usize = s.inputs.iter().map(|b| b.width).sum();
        if declared != s.sys.p() {
            out.push(Violation::InputWidths {
                id: s.id,
                declared,
                actual: s.sys.p(),
            });
        }
        let declared: usize = s.outputs.iter().map(|b| b.rows).sum();
        if declared != s.sys.q() {
            out.push(Violation::OutputRows {
                id: s.id,
                declared,
                actual: s.sys.q(),
            });
        }
        let mut seen = BTreeSet::new();
        for b in &s.inputs {
            if !seen.insert(Endpoint::Peer(b.from)) {
                out.push(Violation::DuplicateBlock {
                    id: s.id,
                    peer: Endpoint::Peer(b.from),
                });
            }
        }
        let mut seen = BTreeSet::new();
        for b in &s.outputs {
            if !seen.insert(b.to) {
                out.push(Violation::DuplicateBlock { id: s.id, peer: b.to });
            }
        }

        for b in &s.inputs {
            if b.from == s.id {
                out.push(Violation::SelfLoop(s.id));
                continue;
            }
            let Some(peer) = by_id.get(&b.from) else {
                out.push(Violation::UnknownPeer { id: s.id, peer: b.from });
                continue;
            };
            match peer.output_rows(Endpoint::Peer(s.id)) {
                Some(rows) if rows.len() != b.width => out.push(Violation::WidthMismatch {
                    i: s.id,
                    j: b.from,
                    input: b.width,
                    output: rows.len(),
                }),
                Some(_) => {}
                None => out.push(Violation::MissingOutput { i: s.id, j: b.from }),
            }
        }
        for b in &s.outputs {
            let Endpoint::Peer(to) = b.to else { continue };
            if to == s.id {
                out.push(Violation::SelfLoop(s.id));
                continue;
            }
            match by_id.get(&to) {
                None => out.push(Violation::UnknownPeer { id: s.id, peer: to }),
                Some(peer) if peer.input_cols(s.id).is_none() => {
                    out.push(Violation::MissingInput { i: to, j: s.id })
                }
                Some(_) => {}
            }
        }
    }
    out.dedup();
    out
}

/// Closed interconnected system. Each subsystem keeps its own Brownian
/// motion (`diffusions[i]` acts on the whole state but is nonzero only on
/// block `i`) and its own Poisson sources.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSystem {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub diffusions: Vec<Matrix>,
    pub jumps: Vec<Jump>,
    pub state_offsets: Vec<usize>,
    pub input_offsets: Vec<usize>,
}

impl NetworkSystem {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn q(&self) -> usize {
        self.c.nrows()
    }
}

fn offsets(sizes: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    let mut out = vec![0];
    for s in sizes {
        acc += s;
        out.push(acc);
    }
    out
}

/// Substitutes `w_ij = C_ji x_j` and assembles the closed network.
pub fn interconnect(net: &Network) -> Result<NetworkSystem, ModelError> {
    let violations = validate_network(net);
    if !violations.is_empty() {
        let msg: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(ModelError::InvalidNetwork(msg.join("; ")));
    }
    let subs = &net.subsystems;
    let so = offsets(subs.iter().map(|s| s.sys.n()));
    let io = offsets(subs.iter().map(|s| s.sys.m()));
    let n = so[subs.len()];
    let m = io[subs.len()];
    let q: usize = subs
        .iter()
        .map(|s| s.external_rows().map_or(0, |r| r.len()))
        .sum();

    let mut a = Matrix::zeros(n, n);
    let mut b = Matrix::zeros(n, m);
    let mut c = Matrix::zeros(q, n);
    let mut diffusions = Vec::with_capacity(subs.len());
    let mut jumps = Vec::new();
    let mut row = 0;
    for (i, s) in subs.iter().enumerate() {
        let ni = s.sys.n();
        a.view_mut((so[i], so[i]), (ni, ni)).copy_from(&s.sys.a);
        b.view_mut((so[i], io[i]), (ni, s.sys.m())).copy_from(&s.sys.b);
        if let Some(ext) = s.output_block(&s.sys.c, Endpoint::External) {
            c.view_mut((row, so[i]), (ext.nrows(), ni)).copy_from(&ext);
            row += ext.nrows();
        }
        for blk in &s.inputs {
            let j = net.index_of(blk.from).expect("validated peer");
            let d_ij = s.input_block(&s.sys.d, blk.from).expect("declared block");
            let c_ji = subs[j]
                .output_block(&subs[j].sys.c, Endpoint::Peer(s.id))
                .expect("validated output block");
            let coupling = d_ij * c_ji;
            let mut view = a.view_mut((so[i], so[j]), (ni, subs[j].sys.n()));
            view += coupling;
        }
        let mut e = Matrix::zeros(n, n);
        e.view_mut((so[i], so[i]), (ni, ni)).copy_from(&s.sys.e);
        diffusions.push(e);
        for jump in &s.sys.jumps {
            let mut r = Matrix::zeros(n, n);
            r.view_mut((so[i], so[i]), (ni, ni)).copy_from(&jump.r);
            jumps.push(Jump { rate: jump.rate, r });
        }
    }
    Ok(NetworkSystem {
        a,
        b,
        c,
        diffusions,
        jumps,
        state_offsets: so,
        input_offsets: io,
    })
}

/// Total number of independent Poisson sources in the network.
pub fn jump_event_count(net: &Network) -> usize {
    net.subsystems.iter().map(|s| s.sys.jumps.len()).sum()
}
