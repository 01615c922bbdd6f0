//! Independent references for the network model and power flow.

use feedersim::network::{generate_synthetic_feeder, FeederSpec, NetworkModel};
use feedersim::powerflow::{
    linearized_voltages, solve_ac, InjectionSet, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE,
};
use num_complex::Complex64;

pub fn random_feeder(nodes: usize, seed: u64, segment_r_ohm: f64) -> NetworkModel {
    generate_synthetic_feeder(&FeederSpec {
        nodes,
        seed,
        segment_r_ohm,
        ..FeederSpec::default()
    })
    .unwrap()
}

/// Parent bus of every bus, found by walking the line list from the slack.
fn parents(net: &NetworkModel) -> Vec<Option<(usize, Complex64)>> {
    let n = net.bus_count();
    let mut parent = vec![None; n];
    let mut seen = vec![false; n];
    seen[net.slack] = true;
    let mut frontier = vec![net.slack];
    while let Some(b) = frontier.pop() {
        for l in &net.lines {
            let other = if l.from == b {
                l.to
            } else if l.to == b {
                l.from
            } else {
                continue;
            };
            if !seen[other] {
                seen[other] = true;
                parent[other] = Some((b, Complex64::new(l.resistance, l.reactance) / net.z_base()));
                frontier.push(other);
            }
        }
    }
    parent
}

/// Reduced impedance matrix from shared path impedances, by reduced index.
pub fn path_impedance(net: &NetworkModel) -> Vec<Vec<Complex64>> {
    let parent = parents(net);
    let path = |mut b: usize| {
        let mut edges = Vec::new();
        while let Some((p, z)) = parent[b] {
            edges.push((b, z));
            b = p;
        }
        edges
    };
    let red = net.reduced_buses();
    red.iter()
        .map(|&i| {
            let pi = path(i);
            red.iter()
                .map(|&j| {
                    let pj = path(j);
                    pi.iter()
                        .filter(|(b, _)| pj.iter().any(|(c, _)| c == b))
                        .map(|(_, z)| *z)
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Largest nodal power mismatch from the bus admittance matrix, per-unit.
pub fn admittance_residual(net: &NetworkModel, v: &[Complex64], inj: &InjectionSet) -> f64 {
    let y = net.admittance.map(|e| e * net.z_base());
    let kva = net.base_power / 1000.0;
    let mut worst: f64 = 0.0;
    for (k, &b) in net.reduced_buses().iter().enumerate() {
        let i: Complex64 = (0..net.bus_count()).map(|m| y[(b, m)] * v[m]).sum();
        let s = v[b] * i.conj();
        worst = worst.max((s - Complex64::new(inj.p[k], inj.q[k]) / kva).norm());
    }
    worst
}

/// Exact receiving-end voltage of a slack plus one bus through impedance
/// `z` (per-unit) with injection `s` (per-unit).
pub fn two_bus_voltage(z: Complex64, s: Complex64) -> Complex64 {
    // |V|² - conj(V) = z·conj(s)
    let a = z * s.conj();
    let im = a.im;
    let re = 0.5 * (1.0 + (1.0 + 4.0 * (a.re - im * im)).sqrt());
    Complex64::new(re, im)
}

/// Largest complex difference between linearized and AC voltages.
pub fn linearization_error(net: &NetworkModel, inj: &InjectionSet) -> f64 {
    let ac = solve_ac(net, inj, 1e-11, DEFAULT_MAX_ITER)
        .unwrap()
        .into_result()
        .unwrap();
    let (re, im) = linearized_voltages(net, inj, None).unwrap();
    net.reduced_buses()
        .iter()
        .enumerate()
        .map(|(k, &b)| (Complex64::new(re[k], im[k]) - ac.v[b]).norm())
        .fold(0.0, f64::max)
}

pub fn scaled(inj: &InjectionSet, f: f64) -> InjectionSet {
    InjectionSet {
        p: inj.p.iter().map(|v| v * f).collect(),
        q: inj.q.iter().map(|v| v * f).collect(),
    }
}

pub fn default_solve(
    net: &NetworkModel,
    inj: &InjectionSet,
) -> feedersim::powerflow::VoltageSolution {
    solve_ac(net, inj, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER).unwrap()
}
