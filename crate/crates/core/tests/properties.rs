mod common;

use std::sync::OnceLock;

use jlssabs::abstraction::{self, AbstractionOptions, AbstractionResult};
use jlssabs::bounds::{self, GainSlopes};
use jlssabs::composition::{self, CompositionError};
use jlssabs::linalg::{self, Matrix, Vector};
use jlssabs::model::{Endpoint, JlssSystem, Jump, Network, OutputBlock, SubsystemSpec};
use jlssabs::simulate::{self, CoupledModel, InputTrajectory, SimConfig};
use jlssabs::ssf;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn case() -> &'static common::CaseStudy {
    static CASE: OnceLock<common::CaseStudy> = OnceLock::new();
    CASE.get_or_init(|| common::case_study(common::COUPLING, 1.0))
}

fn gain_matrices() -> impl Strategy<Value = (Matrix, Matrix)> {
    (2usize..=5).prop_flat_map(|n| {
        (
            prop::collection::vec(0.1f64..5.0, n),
            prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..3.0], n * n),
        )
            .prop_map(move |(diag, off)| {
                let lambda = Matrix::from_diagonal(&Vector::from_vec(diag));
                let delta = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { off[i * n + j] });
                (lambda, delta)
            })
    })
}

fn scaled_radius(lambda: &Matrix, delta: &Matrix) -> f64 {
    let n = lambda.nrows();
    let scaled = Matrix::from_fn(n, n, |i, j| delta[(i, j)] / lambda[(i, i)]);
    linalg::spectral_radius(&scaled).unwrap()
}

fn random_state(seed: u64, scale: f64) -> (Vec<Vector>, Vec<Vector>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cs = case();
    let mut draw = |len: usize| {
        Vector::from_fn(len, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
    };
    let x = cs.net.subsystems.iter().map(|s| draw(s.sys.n())).collect();
    let xh = cs.abstractions.iter().map(|a| draw(a.abs_sys.n())).collect();
    (x, xh)
}

/// Internal input of subsystem `i` assembled from the outputs of its peers.
fn internal_input(net: &Network, outputs: &[Matrix], states: &[Vector], i: usize) -> Vector {
    let spec = &net.subsystems[i];
    let mut w = Vec::new();
    for block in &spec.inputs {
        let j = net.index_of(block.from).unwrap();
        let c = net.subsystems[j]
            .output_block(&outputs[j], Endpoint::Peer(spec.id))
            .unwrap();
        w.extend((c * &states[j]).iter().copied());
    }
    Vector::from_vec(w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn small_gain_search_matches_spectral_radius((lambda, delta) in gain_matrices()) {
        let radius = scaled_radius(&lambda, &delta);
        prop_assume!((radius - 1.0).abs() > 1e-6);
        match composition::find_mu(&lambda, &delta) {
            Ok(mu) => {
                prop_assert!(radius < 1.0);
                prop_assert!(mu.iter().all(|m| *m > 0.0));
                prop_assert!((mu.max() - 1.0).abs() < 1e-12);
                let row = composition::check_small_gain(&lambda, &delta, &mu).unwrap();
                prop_assert!(row.iter().all(|v| *v < 0.0));
            }
            Err(CompositionError::Infeasible { radius: r }) => {
                prop_assert!(radius > 1.0);
                prop_assert!((r - radius).abs() < 1e-9 * (1.0 + radius));
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn small_gain_row_scales_with_mu((lambda, delta) in gain_matrices(), c in 0.01f64..100.0) {
        let n = lambda.nrows();
        let mu = Vector::from_fn(n, |i, _| 1.0 + i as f64);
        let row = (mu.transpose() * (&delta - &lambda)).transpose();
        let scaled = (mu.transpose() * c * (&delta - &lambda)).transpose();
        prop_assert!((scaled - row * c).norm() <= 1e-12 * c * (1.0 + lambda.norm() + delta.norm()) * mu.norm());
        if let Ok(mu) = composition::find_mu(&lambda, &delta) {
            let a = composition::check_small_gain(&lambda, &delta, &mu).unwrap();
            let b = composition::check_small_gain(&lambda, &delta, &(&mu * c)).unwrap();
            prop_assert!((b - a * c).norm() <= 1e-10 * c * (1.0 + lambda.norm()));
        }
    }

    #[test]
    fn composite_function_bounds_the_output_gap(seed in any::<u64>(), scale in 0.01f64..10.0) {
        let cs = case();
        let (x, xh) = random_state(seed, scale);
        let v = composition::composite_v(&cs.certificate, &cs.abstractions, &x, &xh).unwrap();
        let mut gap_sq = 0.0;
        for (i, spec) in cs.net.subsystems.iter().enumerate() {
            if let Some(rows) = spec.external_rows() {
                let zeta = spec.sys.c.rows(rows.start, rows.len()) * &x[i];
                let zeta_hat = cs.abstractions[i].abs_sys.c.rows(rows.start, rows.len()) * &xh[i];
                gap_sq += (zeta - zeta_hat).norm_squared();
            }
        }
        let alpha = cs.certificate.literal.alpha;
        prop_assert!(alpha * gap_sq <= v * (1.0 + 1e-9) + 1e-12, "alpha gap {} > V {}", alpha * gap_sq, v);
    }

    #[test]
    fn composite_function_dissipates(seed in any::<u64>(), scale in 0.01f64..10.0, u_scale in 0.0f64..3.0) {
        let cs = case();
        let net = &cs.net;
        let (x, xh) = random_state(seed, scale);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let concrete_c: Vec<Matrix> = net.subsystems.iter().map(|s| s.sys.c.clone()).collect();
        let abstract_c: Vec<Matrix> = cs.abstractions.iter().map(|a| a.abs_sys.c.clone()).collect();
        let mut generator = 0.0;
        let mut input_sq = 0.0;
        for (i, spec) in net.subsystems.iter().enumerate() {
            let a = &cs.abstractions[i];
            let w = internal_input(net, &concrete_c, &x, i);
            let wh = internal_input(net, &abstract_c, &xh, i);
            let uh = if cs.certificate.zero_input_ids.contains(&spec.id) {
                Vector::zeros(a.abs_sys.m())
            } else {
                Vector::from_fn(a.abs_sys.m(), |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * u_scale
                })
            };
            input_sq += uh.norm_squared();
            let u = ssf::interface_u(&a.ssf, &x[i], &xh[i], &uh, &wh);
            let l = ssf::generator_quadratic(&a.ssf, &spec.sys, &a.abs_sys, &x[i], &xh[i], &u, &uh, &w, &wh).unwrap();
            generator += cs.certificate.mu[i] * l;
        }
        let v = composition::composite_v(&cs.certificate, &cs.abstractions, &x, &xh).unwrap();
        let s = cs.certificate.literal;
        let rhs = -s.eta * v + s.rho_ext * input_sq;
        prop_assert!(generator <= rhs + 1e-9 * (1.0 + v.abs() + input_sq), "LV {generator} > {rhs}");
    }

    #[test]
    fn moment_bound_is_monotone(
        h in 0.05f64..5.0, r_e in 0.0f64..3.0, r_i in 0.0f64..3.0,
        ev0 in 0.0f64..50.0, eu in 0.0f64..5.0, ew in 0.0f64..5.0,
        t in 0.0f64..20.0, dt in 0.0f64..5.0,
    ) {
        let g = GainSlopes::new(1.0, h, r_e, r_i, 2).unwrap();
        let now = bounds::moment_bound(&g, ev0, eu, ew, t).unwrap();
        let later = bounds::moment_bound(&g, ev0, eu, ew, t + dt).unwrap();
        let floor = (r_e * eu + r_i * ew) / h;
        let tol = 1e-12 * (1.0 + ev0 + floor);
        prop_assert!(later <= now + tol);
        prop_assert!(now >= floor - tol && now <= ev0 + floor + tol);
        let more = bounds::moment_bound(&g, ev0 + 1.0, eu + 0.5, ew, t).unwrap();
        prop_assert!(more >= now);
    }

    #[test]
    fn probability_bounds_are_probabilities(
        a in 0.05f64..5.0, h in 0.05f64..5.0, k in 1u32..=4,
        v0 in 0.0f64..20.0, eps in 0.01f64..5.0, horizon in 0.001f64..50.0, c in 0.0f64..20.0,
        extra in 0.0f64..10.0,
    ) {
        let g = GainSlopes::new(a, h, 1.0, 0.0, k).unwrap();
        let p = bounds::sup_probability_bound(&g, v0, eps, horizon, c).unwrap();
        prop_assert!((0.0..=1.0).contains(&p.value));
        prop_assert!(p.raw >= -1e-12);
        let longer = bounds::sup_probability_bound(&g, v0, eps, horizon + extra, c).unwrap();
        prop_assert!(longer.value >= p.value - 1e-12);
        let pointwise = bounds::pointwise_probability_bound(&g, v0, c, 0.0, eps, horizon).unwrap();
        prop_assert!((0.0..=1.0).contains(&pointwise.value));
        let infinite = bounds::infinite_horizon_bound(&g, v0, eps).unwrap();
        prop_assert!((0.0..=1.0).contains(&infinite.value));
    }

    #[test]
    fn triangle_bound_dominates_both_terms(b1 in 0.0f64..100.0, b2 in 0.0f64..100.0) {
        let t = bounds::triangle_bound(b1, b2);
        prop_assert!(t >= b1 + b2 - 1e-9 * (1.0 + b1 + b2));
        prop_assert!(t <= 2.0 * (b1 + b2) + 1e-9 * (1.0 + b1 + b2));
    }

    #[test]
    fn wilson_interval_brackets_the_fraction(n in 1usize..5000, frac in 0.0f64..=1.0) {
        let count = ((n as f64) * frac).floor() as usize;
        let (lo, hi) = simulate::wilson_interval(count, n, simulate::Z95);
        let p = count as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
    }

    #[test]
    fn input_csv_round_trips(values in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..20)) {
        let times: Vec<f64> = (0..values.len()).map(|k| k as f64 * 0.1).collect();
        let traj = InputTrajectory::new(times, values).unwrap();
        let back = InputTrajectory::from_csv(&traj.to_csv()).unwrap();
        prop_assert_eq!(back, traj);
    }
}

fn scalar_network(a: f64, e: f64, jumps: Vec<Jump>) -> (Network, Vec<AbstractionResult>) {
    let sys = JlssSystem::new(
        Matrix::from_element(1, 1, a),
        Matrix::zeros(1, 0),
        Matrix::from_element(1, 1, 1.0),
        Matrix::zeros(1, 0),
        Matrix::from_element(1, 1, e),
        jumps,
    )
    .unwrap();
    let opts = AbstractionOptions {
        kappa_hat: 1.0,
        pi: 0.5,
        ..AbstractionOptions::default()
    };
    let abs = abstraction::build_abstraction(&sys, &Matrix::identity(1, 1), &opts).unwrap();
    let net = Network {
        k: 2,
        subsystems: vec![SubsystemSpec {
            id: 1,
            sys,
            inputs: vec![],
            outputs: vec![OutputBlock {
                to: Endpoint::External,
                rows: 1,
            }],
        }],
    };
    (net, vec![abs])
}

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn euler_mean_converges_weakly() {
    let (a, e, x0, horizon) = (-1.0, 0.5, 1.0, 1.0);
    let sys = JlssSystem::new(
        Matrix::from_element(1, 1, a),
        Matrix::zeros(1, 0),
        Matrix::from_element(1, 1, 1.0),
        Matrix::zeros(1, 0),
        Matrix::from_element(1, 1, e),
        vec![],
    )
    .unwrap();
    let (fine_dt, ratio, paths) = (1e-3, 10usize, 20_000usize);
    let coarse_dt = fine_dt * ratio as f64;
    let steps = (horizon / fine_dt).round() as usize;
    let none = Vector::zeros(0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut fine, mut coarse, mut diff) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..paths {
        let mut xf = Vector::from_element(1, x0);
        let mut xc = xf.clone();
        let mut acc = 0.0;
        for k in 0..steps {
            let z: f64 = StandardNormal.sample(&mut rng);
            let dw = z * fine_dt.sqrt();
            xf = simulate::step_jlss(&sys, &xf, &none, &none, fine_dt, dw, &[]).unwrap();
            acc += dw;
            if (k + 1) % ratio == 0 {
                xc = simulate::step_jlss(&sys, &xc, &none, &none, coarse_dt, acc, &[]).unwrap();
                acc = 0.0;
            }
        }
        fine.push(xf[0]);
        coarse.push(xc[0]);
        diff.push(xc[0] - xf[0]);
    }
    let exact = x0 * (a * horizon).exp();
    let (mf, sf) = mean_and_se(&fine);
    let (mc, sc) = mean_and_se(&coarse);
    assert!((mf - exact).abs() <= 3.0 * sf, "dt = 1e-3: {mf} vs {exact} (SE {sf})");
    assert!((mc - exact).abs() <= 3.0 * sc, "dt = 1e-2: {mc} vs {exact} (SE {sc})");
    // Same Brownian paths: the difference isolates the discretization bias.
    let euler = |dt: f64| x0 * (1.0 + a * dt).powi((horizon / dt).round() as i32);
    let (md, sd) = mean_and_se(&diff);
    let predicted = euler(coarse_dt) - euler(fine_dt);
    assert!((md - predicted).abs() <= 3.0 * sd, "bias difference {md} vs {predicted} (SE {sd})");
    assert!(md < -3.0 * sd, "coarse bias not larger: {md} (SE {sd})");
    assert!((euler(fine_dt) - exact).abs() < (euler(coarse_dt) - exact).abs());
}

#[test]
fn poisson_counts_match_rate() {
    let rate = 3.0;
    let (net, abstractions) = scalar_network(
        -1.0,
        0.2,
        vec![Jump {
            rate,
            r: Matrix::from_element(1, 1, -0.1),
        }],
    );
    let model = CoupledModel::new(&net, &abstractions, true).unwrap();
    let cfg = SimConfig {
        dt: 1e-3,
        horizon: 2.0,
        trials: 2000,
        master_seed: 9,
        ..SimConfig::default()
    };
    let x0 = vec![Vector::from_element(1, 1.0)];
    let ens = simulate::run_coupled(&model, &x0, &x0, &InputTrajectory::zero(model.input_width()), &cfg).unwrap();
    let counts: Vec<f64> = ens.trials.iter().map(|t| t.jump_counts.iter().sum::<u64>() as f64).collect();
    let (mean, se) = mean_and_se(&counts);
    let expected = rate * cfg.horizon;
    assert!((mean - expected).abs() <= 3.0 * se, "{mean} vs {expected} (SE {se})");
    assert!(ens.trials.iter().all(|t| t.gap_sq.iter().all(|g| *g < 1e-24)));
}

#[test]
fn shared_drivers_keep_identity_gap_and_independent_drivers_do_not() {
    let (net, abstractions) = scalar_network(-1.0, 0.5, vec![]);
    let x0 = vec![Vector::from_element(1, 1.0)];
    let cfg = SimConfig {
        dt: 1e-3,
        horizon: 1.0,
        trials: 50,
        ..SimConfig::default()
    };
    let run = |shared: bool| {
        let model = CoupledModel::new(&net, &abstractions, shared).unwrap();
        simulate::run_coupled(&model, &x0, &x0, &InputTrajectory::zero(model.input_width()), &cfg).unwrap()
    };
    let shared = run(true);
    assert!(shared.trials.iter().all(|t| t.sup_gap.last().unwrap() < &1e-12));
    let independent = run(false);
    assert!(independent.trials.iter().any(|t| t.sup_gap.last().unwrap() > &1e-3));
}
