//! AC power flow (backward-forward sweep) and the linearized voltage model.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::network::NetworkModel;

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Signed per-bus injections (positive into the grid), indexed by reduced
/// bus position. Units kW / kvar.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InjectionSet {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl InjectionSet {
    pub fn zeros(n: usize) -> Self {
        Self {
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    fn check(&self, network: &NetworkModel) -> Result<()> {
        let n = network.reduced_buses().len();
        if self.p.len() != n || self.q.len() != n {
            return param(format!(
                "injection vectors have length {}/{}, network has {n} non-slack buses",
                self.p.len(),
                self.q.len()
            ));
        }
        if self.p.iter().chain(&self.q).any(|v| !v.is_finite()) {
            return param("injections must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageSolution {
    /// Complex voltage per bus id, per-unit.
    pub v: Vec<Complex64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest nodal complex power mismatch, per-unit.
    pub residual: f64,
}

impl VoltageSolution {
    pub fn magnitude(&self, bus: usize) -> f64 {
        self.v[bus].norm()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::Divergence {
                iterations: self.iterations,
                residual: self.residual,
            })
        }
    }
}

/// Complex current injected into the network at each bus, `Y·V`, per-unit.
fn nodal_currents(network: &NetworkModel, v: &[Complex64]) -> Vec<Complex64> {
    let mut i = vec![Complex64::new(0.0, 0.0); v.len()];
    for (k, l) in network.lines.iter().enumerate() {
        let y = network.line_admittance_pu(k);
        let flow = y * (v[l.from] - v[l.to]);
        i[l.from] += flow;
        i[l.to] -= flow;
    }
    i
}

/// Complex power injected at every bus by the given voltages, per-unit.
pub fn nodal_power(network: &NetworkModel, v: &[Complex64]) -> Vec<Complex64> {
    nodal_currents(network, v)
        .iter()
        .zip(v)
        .map(|(i, v)| v * i.conj())
        .collect()
}

fn mismatch(network: &NetworkModel, v: &[Complex64], s: &[Complex64]) -> f64 {
    let calc = nodal_power(network, v);
    network
        .reduced_buses()
        .iter()
        .enumerate()
        .map(|(k, &b)| (calc[b] - s[k]).norm())
        .fold(0.0, f64::max)
}

/// Solves the AC power flow from a flat start.
pub fn solve_ac(
    network: &NetworkModel,
    injections: &InjectionSet,
    tolerance: f64,
    max_iter: usize,
) -> Result<VoltageSolution> {
    let flat = vec![Complex64::new(1.0, 0.0); network.bus_count()];
    solve_ac_from(network, injections, &flat, tolerance, max_iter)
}

/// Backward-forward sweep from an initial voltage guess. Non-convergence
/// is reported through `converged = false`, not as an error.
pub fn solve_ac_from(
    network: &NetworkModel,
    injections: &InjectionSet,
    initial: &[Complex64],
    tolerance: f64,
    max_iter: usize,
) -> Result<VoltageSolution> {
    injections.check(network)?;
    if !(tolerance > 0.0) {
        return param("tolerance must be positive");
    }
    if !network.is_radial() {
        return Err(Error::Topology(
            "backward-forward sweep requires a radial feeder".into(),
        ));
    }
    if initial.len() != network.bus_count() {
        return param("initial voltage vector has the wrong length");
    }
    let kva = network.base_power / 1000.0;
    let s: Vec<Complex64> = injections
        .p
        .iter()
        .zip(&injections.q)
        .map(|(p, q)| Complex64::new(p / kva, q / kva))
        .collect();
    let mut s_bus = vec![Complex64::new(0.0, 0.0); network.bus_count()];
    for (k, &b) in network.reduced_buses().iter().enumerate() {
        s_bus[b] = s[k];
    }
    let z_base = network.z_base();
    let slack = network.slack;
    let mut v = initial.to_vec();
    v[slack] = Complex64::new(1.0, 0.0);
    let order = network.bfs_order();

    let mut residual = mismatch(network, &v, &s);
    let mut iterations = 0;
    while residual >= tolerance && iterations < max_iter {
        iterations += 1;
        let mut acc: Vec<Complex64> = v.iter().zip(&s_bus).map(|(v, s)| (s / v).conj()).collect();
        for &b in order.iter().rev() {
            if let Some((p, _)) = network.parent(b) {
                let carried = acc[b];
                acc[p] += carried;
            }
        }
        for &b in order.iter() {
            if let Some((p, k)) = network.parent(b) {
                let z = network.lines[k].impedance() / z_base;
                v[b] = v[p] + z * acc[b];
            }
        }
        residual = mismatch(network, &v, &s);
        if !residual.is_finite() {
            break;
        }
    }
    Ok(VoltageSolution {
        converged: residual < tolerance,
        v,
        iterations,
        residual,
    })
}

/// Linearized nodal voltages `(Re V, Im V)` per reduced bus:
/// `Re V = 1 + R·p + X·q`, `Im V = X·p - R·q`, with `p, q` the sum of the
/// net and coordinated signed injections.
pub fn linearized_voltages(
    network: &NetworkModel,
    net: &InjectionSet,
    coordinated: Option<&InjectionSet>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    net.check(network)?;
    if let Some(c) = coordinated {
        c.check(network)?;
    }
    let kva = network.base_power / 1000.0;
    let n = net.len();
    let p: Vec<f64> = (0..n)
        .map(|k| (net.p[k] + coordinated.map_or(0.0, |c| c.p[k])) / kva)
        .collect();
    let q: Vec<f64> = (0..n)
        .map(|k| (net.q[k] + coordinated.map_or(0.0, |c| c.q[k])) / kva)
        .collect();
    let r = &network.r_matrix;
    let x = &network.x_matrix;
    let mut re = vec![1.0; n];
    let mut im = vec![0.0; n];
    for i in 0..n {
        for m in 0..n {
            re[i] += r[(i, m)] * p[m] + x[(i, m)] * q[m];
            im[i] += x[(i, m)] * p[m] - r[(i, m)] * q[m];
        }
    }
    Ok((re, im))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFormula {
    /// Joule loss over the voltage drop across each line.
    #[default]
    Difference,
    /// Literal voltage-sum form; does not vanish on a flat profile.
    VoltageSum,
}

/// Total active line losses in kW for the given bus voltages (per-unit).
pub fn line_losses(network: &NetworkModel, voltages: &[Complex64]) -> f64 {
    line_losses_with(network, voltages, LossFormula::Difference)
}

pub fn line_losses_with(
    network: &NetworkModel,
    voltages: &[Complex64],
    formula: LossFormula,
) -> f64 {
    let kva = network.base_power / 1000.0;
    network
        .lines
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let g = network.line_admittance_pu(k).conj().re;
            let (a, b) = (voltages[l.from], voltages[l.to]);
            let d = match formula {
                LossFormula::Difference => a - b,
                LossFormula::VoltageSum => a + b,
            };
            g * d.norm_sqr()
        })
        .sum::<f64>()
        * kva
}

/// Complex power delivered by the slack bus into the feeder, kW + j kvar.
pub fn slack_power(network: &NetworkModel, voltages: &[Complex64]) -> Complex64 {
    let kva = network.base_power / 1000.0;
    nodal_power(network, voltages)[network.slack] * kva
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{chain_feeder, Bus, BusKind, Line};

    /// Two-bus network whose line has the given per-unit impedance on a
    /// 1 kVA base.
    fn two_bus_pu(z: Complex64) -> NetworkModel {
        let zb = 230.0 * 230.0 / 1000.0;
        let buses = vec![
            Bus {
                id: 0,
                kind: BusKind::Slack,
                has_load: false,
            },
            Bus {
                id: 1,
                kind: BusKind::Load,
                has_load: true,
            },
        ];
        let lines = vec![Line {
            from: 0,
            to: 1,
            resistance: z.re * zb,
            reactance: z.im * zb,
        }];
        NetworkModel::new(buses, lines, 230.0, 1000.0).unwrap()
    }

    /// Closed form for V1 = 1 + z conj(S / V1).
    fn two_bus_closed_form(z: Complex64, s: Complex64) -> Complex64 {
        let w = z * s.conj();
        let b = w.im;
        let a = 0.5 * (1.0 + (1.0 + 4.0 * (w.re - b * b)).sqrt());
        Complex64::new(a, b)
    }

    #[test]
    fn no_load_is_flat() {
        let net = chain_feeder(5, 0.1, 0.02).unwrap();
        let sol = solve_ac(&net, &InjectionSet::zeros(4), 1e-8, 100).unwrap();
        assert!(sol.converged);
        for v in &sol.v {
            assert_eq!(*v, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn two_bus_matches_closed_form() {
        let z = Complex64::new(0.012, 0.002);
        let net = two_bus_pu(z);
        let inj = InjectionSet {
            p: vec![0.05],
            q: vec![0.0],
        };
        let sol = solve_ac(&net, &inj, 1e-12, 100).unwrap();
        assert!(sol.converged);
        let exact = two_bus_closed_form(z, Complex64::new(0.05, 0.0));
        assert!(
            (sol.v[1] - exact).norm() < 1e-10,
            "{:?} vs {:?}",
            sol.v[1],
            exact
        );
    }

    #[test]
    fn load_depresses_voltage() {
        let net = two_bus_pu(Complex64::new(0.012, 0.002));
        let sol = solve_ac(
            &net,
            &InjectionSet {
                p: vec![-0.05],
                q: vec![0.0],
            },
            1e-10,
            100,
        )
        .unwrap();
        assert!(sol.v[1].norm() < 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        let net = chain_feeder(3, 0.1, 0.02).unwrap();
        assert!(solve_ac(&net, &InjectionSet::zeros(3), 1e-8, 10).is_err());
        assert!(linearized_voltages(&net, &InjectionSet::zeros(1), None).is_err());
    }

    #[test]
    fn linearized_zero_and_single() {
        let net = chain_feeder(4, 0.2, 0.05).unwrap();
        let (re, im) = linearized_voltages(&net, &InjectionSet::zeros(3), None).unwrap();
        assert!(re.iter().all(|&v| v == 1.0) && im.iter().all(|&v| v == 0.0));
        let mut inj = InjectionSet::zeros(3);
        inj.p[2] = 1.5;
        let (re, _) = linearized_voltages(&net, &inj, None).unwrap();
        for (n, v) in re.iter().enumerate() {
            assert!((v - (1.0 + net.r_matrix[(n, 2)] * 1.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn losses_flat_and_ohmic() {
        let net = two_bus_pu(Complex64::new(0.012, 0.002));
        let flat = vec![Complex64::new(1.0, 0.0); 2];
        assert_eq!(line_losses(&net, &flat), 0.0);
        let sol = solve_ac(
            &net,
            &InjectionSet {
                p: vec![0.05],
                q: vec![0.01],
            },
            1e-12,
            100,
        )
        .unwrap();
        let y = net.line_admittance_pu(0);
        let i = y * (sol.v[1] - sol.v[0]);
        let expected = i.norm_sqr() * 0.012;
        assert!((line_losses(&net, &sol.v) - expected).abs() < 1e-14);
        assert!(line_losses_with(&net, &flat, LossFormula::VoltageSum) > 0.0);
    }

    #[test]
    fn power_balance_at_slack() {
        let net = chain_feeder(6, 0.15, 0.025).unwrap();
        let inj = InjectionSet {
            p: vec![-0.8, 2.0, -1.0, 3.0, -0.5],
            q: vec![-0.2, -0.5, -0.3, 0.0, -0.1],
        };
        let sol = solve_ac(&net, &inj, 1e-10, 100).unwrap();
        let slack = slack_power(&net, &sol.v);
        let losses = line_losses(&net, &sol.v);
        let net_inj: f64 = inj.p.iter().sum();
        assert!((slack.re - (-net_inj + losses)).abs() < 1e-6);
    }

    #[test]
    fn resolve_is_idempotent() {
        let net = chain_feeder(8, 0.12, 0.02).unwrap();
        let inj = InjectionSet {
            p: vec![3.0; 7],
            q: vec![-1.0; 7],
        };
        let sol = solve_ac(&net, &inj, 1e-8, 100).unwrap();
        let again = solve_ac_from(&net, &inj, &sol.v, 1e-8, 100).unwrap();
        assert!(again.converged && again.iterations <= 2);
    }
}
