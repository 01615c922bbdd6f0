mod common;

use common::feeders::*;
use feedersim::cic::{pwl_square, pwl_square_coefficients};
use feedersim::inverters::{apply_filter, pu, volt_var_target, volt_watt_target, DroopSettings};
use feedersim::network::chain_feeder;
use feedersim::powerflow::{InjectionSet, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};
use feedersim::qp::{solve, QpMethod, QpProblem, QpSettings, QpStatus};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_injections(n: usize, seed: u64, magnitude: f64) -> InjectionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inj = InjectionSet::zeros(n);
    for k in 0..n {
        inj.p[k] = rng.random_range(-magnitude..=magnitude);
        inj.q[k] = rng.random_range(-magnitude..=magnitude);
    }
    inj
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zbus_equals_shared_path_impedance(nodes in 2usize..30, seed in any::<u64>(), r in 0.005f64..0.08) {
        let net = random_feeder(nodes, seed, r);
        let z = path_impedance(&net);
        prop_assert_eq!(z.len(), net.reduced_buses().len());
        for (i, row) in z.iter().enumerate() {
            for (j, zij) in row.iter().enumerate() {
                prop_assert!((net.r_matrix[(i, j)] - zij.re).abs() < 1e-12);
                prop_assert!((net.x_matrix[(i, j)] - zij.im).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn power_flow_satisfies_nodal_balance(nodes in 2usize..30, seed in any::<u64>(), r in 0.005f64..0.05, mag in 0.0f64..4.0) {
        let net = random_feeder(nodes, seed, r);
        let inj = random_injections(net.reduced_buses().len(), seed ^ 0x5eed, mag);
        let sol = default_solve(&net, &inj);
        prop_assert!(sol.converged);
        prop_assert!(sol.residual < DEFAULT_TOLERANCE);
        prop_assert!(admittance_residual(&net, &sol.v, &inj) < 1e-8);
    }

    #[test]
    fn two_bus_matches_closed_form(r in 0.001f64..0.5, x in 0.0f64..0.3, p in -6.0f64..6.0, q in -3.0f64..3.0) {
        let net = chain_feeder(2, r, x).unwrap();
        let inj = InjectionSet { p: vec![p], q: vec![q] };
        let sol = feedersim::powerflow::solve_ac(&net, &inj, 1e-12, DEFAULT_MAX_ITER).unwrap();
        prop_assume!(sol.converged);
        let exact = two_bus_voltage(Complex64::new(r, x) / net.z_base(), Complex64::new(p, q) * 1000.0 / net.base_power);
        prop_assert!((sol.v[1] - exact).norm() < 1e-9);
    }

    #[test]
    fn linearization_error_is_second_order(nodes in 5usize..30, seed in any::<u64>()) {
        let net = random_feeder(nodes, seed, 0.02);
        let inj = random_injections(net.reduced_buses().len(), seed, 0.5);
        let e1 = linearization_error(&net, &inj);
        let e2 = linearization_error(&net, &scaled(&inj, 0.5));
        prop_assume!(e1 > 1e-9);
        prop_assert!(e1 / e2 >= 3.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn droop_curves_are_monotone_and_bounded(a in 0.9f64..1.25, b in 0.9f64..1.25) {
        let s = DroopSettings::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(volt_var_target(hi, &s) <= volt_var_target(lo, &s));
        prop_assert!(volt_watt_target(hi, &s) <= volt_watt_target(lo, &s));
        for v in [a, b] {
            let q = volt_var_target(v, &s);
            let p = volt_watt_target(v, &s);
            prop_assert!((-s.q_min_pu..=0.0).contains(&q));
            prop_assert!((s.p_min_pu..=1.0).contains(&p));
        }
    }

    #[test]
    fn filter_stays_between_state_and_target(prev in -1.0f64..1.0, target in -1.0f64..1.0, dt in 0.01f64..1.5) {
        let next = apply_filter(prev, target, dt, 1.5).unwrap();
        prop_assert!(next >= prev.min(target) - 1e-15 && next <= prev.max(target) + 1e-15);
    }

    #[test]
    fn chord_overestimates_the_square(v in pu(207.0)..pu(265.0)) {
        let bp = [pu(207.0), pu(253.0), pu(265.0)];
        let seg = pwl_square_coefficients(&bp).unwrap();
        let gap = bp.windows(2).map(|w| (w[1] - w[0]).powi(2) / 4.0).fold(0.0, f64::max);
        let y = pwl_square(&seg, v);
        prop_assert!(y >= v * v - 1e-15);
        prop_assert!(y <= v * v + gap + 1e-15);
    }

    #[test]
    fn interior_point_and_admm_agree(n in 2usize..6, m in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let p = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
        let q = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let ax = &a * &x0;
        let lo = DVector::from_fn(m, |i, _| ax[i] - rng.random_range(0.0..1.0));
        let hi = DVector::from_fn(m, |i, _| ax[i] + rng.random_range(0.0..1.0));
        let prob = QpProblem { p, q, a, l: lo, u: hi };
        let tight = QpSettings { eps_abs: 1e-9, eps_rel: 1e-9, ..QpSettings::default() };
        let ipm = solve(&prob, &tight, None);
        let admm = solve(&prob, &QpSettings { method: QpMethod::Admm, max_iter: 200_000, ..tight.clone() }, None);
        prop_assert_eq!(ipm.status, QpStatus::Solved);
        prop_assert_eq!(admm.status, QpStatus::Solved);
        prop_assert!(prob.violation(&ipm.x) < 1e-6);
        let scale = 1.0 + prob.objective(&ipm.x).abs();
        prop_assert!((prob.objective(&ipm.x) - prob.objective(&admm.x)).abs() < 1e-5 * scale);
    }
}

#[test]
fn droop_breakpoints_are_exact() {
    let s = DroopSettings::default();
    assert_eq!(volt_var_target(248.0 / 230.0, &s), 0.0);
    assert!((volt_var_target(253.0 / 230.0, &s) + 0.44).abs() <= 1e-12);
    assert_eq!(volt_watt_target(253.0 / 230.0, &s), 1.0);
    assert!((volt_watt_target(265.0 / 230.0, &s) - 0.2).abs() <= 1e-12);
}

#[test]
fn flat_injections_leave_flat_voltage() {
    let net = random_feeder(12, 3, 0.02);
    let sol = feedersim::powerflow::solve_ac(
        &net,
        &InjectionSet::zeros(11),
        DEFAULT_TOLERANCE,
        DEFAULT_MAX_ITER,
    )
    .unwrap();
    assert!(sol
        .v
        .iter()
        .all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));
}
