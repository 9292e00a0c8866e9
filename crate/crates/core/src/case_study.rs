//! Four-subsystem benchmark network: two double integrators wired in a
//! ring with two autonomous triple integrators, each with a scalar
//! Brownian motion and a Poisson reset of rate 4.2.

use crate::abstraction::{AbstractionOptions, BhatMode};
use crate::linalg::{Matrix, Vector};
use crate::model::{Endpoint, InputBlock, JlssSystem, Jump, Network, OutputBlock, SubsystemSpec};
use crate::simulate::InputTrajectory;
use crate::rng::{self, Role};
use rand::Rng;

pub const RATE: f64 = 4.2;
pub const DIFFUSION: f64 = 0.4;
pub const RESET: f64 = 0.1;
/// Abstract inputs are held constant over this period.
pub const SAMPLING_PERIOD: f64 = 0.1;
/// Safe interval for each external output.
pub const SAFE_BOX: (f64, f64) = (0.0, 5.0);

fn rows(r: usize, c: usize, data: &[f64]) -> Matrix {
    Matrix::from_row_slice(r, c, data)
}

fn double_integrator(id: usize, to: usize, from: usize, d: f64) -> SubsystemSpec {
    let sys = JlssSystem::new(
        rows(2, 2, &[0.0, 1.0, 2.0, 0.0]),
        rows(2, 1, &[0.0, 1.0]),
        rows(1, 2, &[1.0, 0.0]),
        rows(2, 1, &[0.0, d]),
        Matrix::identity(2, 2) * DIFFUSION,
        vec![Jump {
            rate: RATE,
            r: Matrix::identity(2, 2) * RESET,
        }],
    )
    .expect("consistent dimensions");
    SubsystemSpec {
        id,
        sys,
        inputs: vec![InputBlock { from, width: 1 }],
        outputs: vec![OutputBlock {
            to: Endpoint::Peer(to),
            rows: 1,
        }],
    }
}

fn triple_integrator(id: usize, to: usize, from: usize, d: f64) -> SubsystemSpec {
    let sys = JlssSystem::new(
        rows(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -24.0, -26.0, -9.0]),
        Matrix::zeros(3, 0),
        rows(2, 3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
        rows(3, 1, &[0.0, -d, 5.0 * d]),
        Matrix::identity(3, 3) * DIFFUSION,
        vec![Jump {
            rate: RATE,
            r: Matrix::identity(3, 3) * RESET,
        }],
    )
    .expect("consistent dimensions");
    SubsystemSpec {
        id,
        sys,
        inputs: vec![InputBlock { from, width: 1 }],
        outputs: vec![
            OutputBlock {
                to: Endpoint::Peer(to),
                rows: 1,
            },
            OutputBlock {
                to: Endpoint::External,
                rows: 1,
            },
        ],
    }
}

/// The network with coupling strength `d`. Subsystem 1 feeds 4, 2 feeds 3,
/// 3 feeds 1 and 4 feeds 2; only 3 and 4 have external outputs.
pub fn network(d: f64) -> Network {
    Network {
        k: 2,
        subsystems: vec![
            double_integrator(1, 4, 3, d),
            double_integrator(2, 3, 4, d),
            triple_integrator(3, 1, 2, d),
            triple_integrator(4, 2, 1, d),
        ],
    }
}

/// Abstraction map for the double integrators (slow eigenvector of `A + B Q`).
pub fn p_double() -> Matrix {
    rows(2, 1, &[1.0, -2.0])
}

/// Abstraction map for the triple integrators (eigenvectors for -2 and -3).
pub fn p_triple() -> Matrix {
    rows(3, 2, &[1.0, 1.0, -2.0, -3.0, 4.0, 9.0])
}

pub fn p_matrix(id: usize) -> Matrix {
    if id <= 2 {
        p_double()
    } else {
        p_triple()
    }
}

/// Per-subsystem synthesis options. The triple integrators have no input,
/// and their mean-square decay rate is capped below 2.958, so they use a
/// smaller `kappa_hat`.
pub fn options(id: usize) -> AbstractionOptions {
    if id <= 2 {
        AbstractionOptions {
            kappa_hat: 3.0,
            pi: 1.0,
            bhat: BhatMode::Identity,
            ..AbstractionOptions::default()
        }
    } else {
        AbstractionOptions {
            kappa_hat: 2.5,
            pi: 1.0,
            bhat: BhatMode::BehaviorPreserving,
            ..AbstractionOptions::default()
        }
    }
}

/// Ids whose abstract external inputs are held at zero.
pub const ZERO_INPUT_IDS: [usize; 2] = [3, 4];

/// Concrete initial states, ordered as the subsystems.
pub fn initial_state() -> Vec<Vector> {
    vec![
        Vector::from_vec(vec![1.0, -2.0]),
        Vector::from_vec(vec![1.0, -2.0]),
        Vector::from_vec(vec![1.0, -1.0, -5.0]),
        Vector::from_vec(vec![1.0, -1.0, -5.0]),
    ]
}

/// Abstract initial states, ordered as the subsystems.
pub fn initial_abstract_state() -> Vec<Vector> {
    vec![
        Vector::from_vec(vec![1.0]),
        Vector::from_vec(vec![1.0]),
        Vector::from_vec(vec![1.44, -0.69]),
        Vector::from_vec(vec![1.44, -0.69]),
    ]
}

/// Abstract inputs: uniform in `[-1, 1]` for the two double integrators,
/// resampled every [`SAMPLING_PERIOD`], and zero for the triple integrators.
pub fn input_trajectory(seed: u64, horizon: f64) -> InputTrajectory {
    let mut rng = rng::stream(seed, 0, Role::Inputs);
    let steps = (horizon / SAMPLING_PERIOD).round() as usize;
    let mut times = Vec::with_capacity(steps);
    let mut values = Vec::with_capacity(steps);
    for k in 0..steps {
        times.push(k as f64 * SAMPLING_PERIOD);
        let u1: f64 = rng.random_range(-1.0..=1.0);
        let u2: f64 = rng.random_range(-1.0..=1.0);
        values.push(vec![u1, u2, 0.0, 0.0]);
    }
    InputTrajectory::new(times, values).expect("increasing breakpoints")
}

/// Values displayed in the literature for this benchmark, kept for regression
/// comparison.
pub mod published {
    use super::rows;
    use crate::linalg::Matrix;

    pub fn m_double() -> Matrix {
        rows(2, 2, &[1.68, 0.4, 0.4, 0.23])
    }

    pub fn k_double() -> Matrix {
        rows(1, 2, &[-9.0, -4.0])
    }

    pub fn m_triple() -> Matrix {
        rows(
            3,
            3,
            &[6.924, 3.871, 0.468, 3.871, 2.534, 0.315, 0.468, 0.315, 0.054],
        )
    }

    pub fn p_hat_triple() -> Matrix {
        rows(2, 3, &[0.0, -9.0, -3.0, 0.0, 4.0, 2.0]) / 6.0
    }

    pub fn g_triple() -> Matrix {
        rows(3, 1, &[1.0, 0.0, 0.0])
    }

    pub fn f_triple() -> Matrix {
        rows(1, 3, &[6.0, 5.0, 1.0]) / 6.0
    }

    pub fn b_hat_triple() -> Matrix {
        rows(2, 1, &[12.0, -8.0])
    }

    pub fn d_hat_triple(d: f64) -> Matrix {
        rows(2, 1, &[-d, d])
    }

    pub const R_INT_DOUBLE: f64 = 1.3;
    pub const R_INT_TRIPLE: f64 = 7.9;
    pub const R_EXT_DOUBLE: f64 = 0.16;
    pub const R_EXT_TRIPLE: f64 = 150.0;
    pub const ETA: f64 = 2.0;
}
