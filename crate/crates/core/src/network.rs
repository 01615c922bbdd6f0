//! Feeder topology, admittance assembly and the slack-reduced impedance
//! matrices shared by the power-flow truth model and the linearized
//! controller model.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

pub const NOMINAL_VOLTAGE_V: f64 = 230.0;
pub const DEFAULT_BASE_POWER_VA: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Slack,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub has_load: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Series resistance in ohms.
    pub resistance: f64,
    /// Series reactance in ohms.
    pub reactance: f64,
}

impl Line {
    pub fn impedance(&self) -> Complex64 {
        Complex64::new(self.resistance, self.reactance)
    }

    pub fn admittance(&self) -> Complex64 {
        1.0 / self.impedance()
    }
}

/// Electrical model of a feeder. Immutable once built.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub slack: usize,
    /// Phase base voltage in volts.
    pub base_voltage: f64,
    /// Power base in VA.
    pub base_power: f64,
    /// Full N'×N' bus admittance matrix in siemens.
    pub admittance: DMatrix<Complex64>,
    /// Re and Im of the inverse of the slack-reduced admittance matrix, in
    /// per-unit, indexed by reduced position (see [`NetworkModel::reduced_buses`]).
    pub r_matrix: DMatrix<f64>,
    pub x_matrix: DMatrix<f64>,
    reduced: Vec<usize>,
    reduced_pos: Vec<Option<usize>>,
    parent: Vec<Option<(usize, usize)>>,
    order: Vec<usize>,
    radial: bool,
}

fn validate(buses: &[Bus], lines: &[Line]) -> Result<usize> {
    let n = buses.len();
    if n < 2 {
        return param(format!("a network needs at least 2 buses, got {n}"));
    }
    for (i, b) in buses.iter().enumerate() {
        if b.id != i {
            return param(format!(
                "bus ids must be contiguous 0..{n}, found id {} at position {i}",
                b.id
            ));
        }
    }
    let slacks: Vec<usize> = buses
        .iter()
        .filter(|b| b.kind == BusKind::Slack)
        .map(|b| b.id)
        .collect();
    if slacks.len() != 1 {
        return Err(Error::Topology(format!(
            "exactly one slack bus required, found {}",
            slacks.len()
        )));
    }
    for (k, l) in lines.iter().enumerate() {
        if l.from >= n || l.to >= n {
            return Err(Error::Topology(format!("line {k} references unknown bus")));
        }
        if l.from == l.to {
            return Err(Error::Topology(format!(
                "line {k} is a self-loop on bus {}",
                l.from
            )));
        }
        if !(l.resistance > 0.0 && l.reactance > 0.0)
            || !l.resistance.is_finite()
            || !l.reactance.is_finite()
        {
            return param(format!(
                "line {k} ({}-{}) needs positive finite impedance, got {}+j{} ohm",
                l.from, l.to, l.resistance, l.reactance
            ));
        }
    }
    let slack = slacks[0];
    let mut adj = vec![Vec::new(); n];
    for l in lines {
        adj[l.from].push(l.to);
        adj[l.to].push(l.from);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([slack]);
    seen[slack] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    if let Some(lost) = seen.iter().position(|s| !s) {
        return Err(Error::Topology(format!(
            "bus {lost} is not connected to the slack bus"
        )));
    }
    Ok(slack)
}

/// Assembles the bus admittance matrix in siemens:
/// `Y[m][n] = -1/z_mn` off-diagonal, diagonal the sum of incident line admittances.
pub fn build_admittance(buses: &[Bus], lines: &[Line]) -> Result<DMatrix<Complex64>> {
    validate(buses, lines)?;
    let n = buses.len();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for l in lines {
        let ya = l.admittance();
        y[(l.from, l.from)] += ya;
        y[(l.to, l.to)] += ya;
        y[(l.from, l.to)] -= ya;
        y[(l.to, l.from)] -= ya;
    }
    Ok(y)
}

/// Removes the slack row/column from `admittance` and inverts it. Returns
/// `(Re Z, Im Z)` in the reciprocal units of the admittance (ohms for siemens).
pub fn reduce_and_invert(
    admittance: &DMatrix<Complex64>,
    slack: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = admittance.nrows();
    if n != admittance.ncols() || slack >= n {
        return param("admittance must be square and contain the slack bus");
    }
    let keep: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = keep.len();
    let reduced = DMatrix::from_fn(m, m, |i, j| admittance[(keep[i], keep[j])]);
    let z = reduced
        .try_inverse()
        .ok_or_else(|| Error::Topology("slack-reduced admittance matrix is singular".into()))?;
    let mut r = z.map(|c| c.re);
    let mut x = z.map(|c| c.im);
    // symmetrize away round-off
    for i in 0..m {
        for j in (i + 1)..m {
            let rv = 0.5 * (r[(i, j)] + r[(j, i)]);
            r[(i, j)] = rv;
            r[(j, i)] = rv;
            let xv = 0.5 * (x[(i, j)] + x[(j, i)]);
            x[(i, j)] = xv;
            x[(j, i)] = xv;
        }
    }
    Ok((r, x))
}

impl NetworkModel {
    pub fn new(
        buses: Vec<Bus>,
        lines: Vec<Line>,
        base_voltage: f64,
        base_power: f64,
    ) -> Result<Self> {
        if !(base_voltage > 0.0 && base_power > 0.0) {
            return param("base voltage and base power must be positive");
        }
        let admittance = build_admittance(&buses, &lines)?;
        let slack = buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated");
        let (r_ohm, x_ohm) = reduce_and_invert(&admittance, slack)?;
        let z_base = base_voltage * base_voltage / base_power;
        let n = buses.len();
        let reduced: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
        let mut reduced_pos = vec![None; n];
        for (k, &b) in reduced.iter().enumerate() {
            reduced_pos[b] = Some(k);
        }

        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (k, l) in lines.iter().enumerate() {
            adj[l.from].push((l.to, k));
            adj[l.to].push((l.from, k));
        }
        let mut parent = vec![None; n];
        let mut order = Vec::with_capacity(n);
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([slack]);
        seen[slack] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, k) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some((u, k));
                    queue.push_back(v);
                }
            }
        }
        let radial = lines.len() == n - 1;

        Ok(Self {
            buses,
            lines,
            slack,
            base_voltage,
            base_power,
            admittance,
            r_matrix: r_ohm / z_base,
            x_matrix: x_ohm / z_base,
            reduced,
            reduced_pos,
            parent,
            order,
            radial,
        })
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    /// Base impedance in ohms.
    pub fn z_base(&self) -> f64 {
        self.base_voltage * self.base_voltage / self.base_power
    }

    /// Non-slack bus ids in the order used by `r_matrix`/`x_matrix` and
    /// by every per-bus injection vector.
    pub fn reduced_buses(&self) -> &[usize] {
        &self.reduced
    }

    pub fn reduced_index(&self, bus: usize) -> Option<usize> {
        self.reduced_pos.get(bus).copied().flatten()
    }

    /// Households are non-slack buses that carry a load.
    pub fn household_buses(&self) -> Vec<usize> {
        self.buses
            .iter()
            .filter(|b| b.kind == BusKind::Load && b.has_load)
            .map(|b| b.id)
            .collect()
    }

    pub fn is_radial(&self) -> bool {
        self.radial
    }

    /// Parent bus and line index of `bus` on the BFS tree rooted at the slack.
    pub fn parent(&self, bus: usize) -> Option<(usize, usize)> {
        self.parent[bus]
    }

    /// Buses in breadth-first order from the slack.
    pub fn bfs_order(&self) -> &[usize] {
        &self.order
    }

    /// Line admittance in per-unit.
    pub fn line_admittance_pu(&self, line: usize) -> Complex64 {
        self.lines[line].admittance() * self.z_base()
    }

    /// Driving-point resistance from the slack, used as electric distance.
    pub fn electric_distance(&self, bus: usize) -> f64 {
        self.reduced_index(bus)
            .map_or(0.0, |k| self.r_matrix[(k, k)])
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let file: NetworkFile = serde_json::from_str(&text)?;
        file.into_model()
    }

    pub fn to_file(&self) -> NetworkFile {
        NetworkFile {
            buses: self
                .buses
                .iter()
                .map(|b| BusEntry {
                    id: b.id,
                    has_load: b.has_load,
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineEntry {
                    from: l.from,
                    to: l.to,
                    r_ohm: l.resistance,
                    x_ohm: l.reactance,
                })
                .collect(),
            slack_id: self.slack,
            base_voltage_v: self.base_voltage,
            base_power_va: Some(self.base_power),
        }
    }
}

/// Multiplies every line impedance by `factor`; topology is unchanged.
pub fn scale_feeder(network: &NetworkModel, factor: f64) -> Result<NetworkModel> {
    if !(factor > 0.0) || !factor.is_finite() {
        return param(format!("scale factor must be positive, got {factor}"));
    }
    let lines = network
        .lines
        .iter()
        .map(|l| Line {
            resistance: l.resistance * factor,
            reactance: l.reactance * factor,
            ..*l
        })
        .collect();
    NetworkModel::new(
        network.buses.clone(),
        lines,
        network.base_voltage,
        network.base_power,
    )
}

/// Parameters of a synthetic radial feeder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeederSpec {
    pub nodes: usize,
    pub seed: u64,
    /// Mean segment resistance in ohms.
    pub segment_r_ohm: f64,
    pub rx_ratio: f64,
    /// Probability that a new bus starts a lateral instead of extending the
    /// current one.
    pub branch_probability: f64,
    /// Relative spread of segment lengths, uniform in `1 ± jitter`.
    pub length_jitter: f64,
    /// Impedance multiplier applied after generation.
    pub scale: f64,
    pub base_voltage_v: f64,
    pub base_power_va: f64,
}

impl Default for FeederSpec {
    fn default() -> Self {
        Self {
            nodes: 114,
            seed: 1,
            segment_r_ohm: 0.02,
            rx_ratio: 6.0,
            branch_probability: 0.25,
            length_jitter: 0.5,
            scale: 1.0,
            base_voltage_v: NOMINAL_VOLTAGE_V,
            base_power_va: DEFAULT_BASE_POWER_VA,
        }
    }
}

/// Builds a random radial feeder. Bus 0 is the transformer secondary; every
/// other bus hosts one household.
pub fn generate_synthetic_feeder(spec: &FeederSpec) -> Result<NetworkModel> {
    if spec.nodes < 2 {
        return param(format!(
            "a feeder needs at least 2 nodes, got {}",
            spec.nodes
        ));
    }
    if !(spec.segment_r_ohm > 0.0) || !(spec.rx_ratio > 0.0) {
        return param("segment resistance and R/X ratio must be positive");
    }
    if !(0.0..=1.0).contains(&spec.branch_probability) || !(0.0..1.0).contains(&spec.length_jitter)
    {
        return param("branch_probability must lie in [0,1] and length_jitter in [0,1)");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut buses = Vec::with_capacity(spec.nodes);
    buses.push(Bus {
        id: 0,
        kind: BusKind::Slack,
        has_load: false,
    });
    let mut lines = Vec::with_capacity(spec.nodes - 1);
    let mut tip = 0usize;
    for id in 1..spec.nodes {
        let from = if id > 1 && rng.random::<f64>() < spec.branch_probability {
            rng.random_range(1..id)
        } else {
            tip
        };
        let len = 1.0 + spec.length_jitter * (2.0 * rng.random::<f64>() - 1.0);
        let r = spec.segment_r_ohm * len;
        buses.push(Bus {
            id,
            kind: BusKind::Load,
            has_load: true,
        });
        lines.push(Line {
            from,
            to: id,
            resistance: r,
            reactance: r / spec.rx_ratio,
        });
        tip = id;
    }
    let model = NetworkModel::new(buses, lines, spec.base_voltage_v, spec.base_power_va)?;
    if spec.scale != 1.0 {
        scale_feeder(&model, spec.scale)
    } else {
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusEntry {
    pub id: usize,
    #[serde(default = "default_true")]
    pub has_load: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineEntry {
    pub from: usize,
    pub to: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

/// On-disk network description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkFile {
    pub buses: Vec<BusEntry>,
    pub lines: Vec<LineEntry>,
    pub slack_id: usize,
    #[serde(default = "default_base_voltage")]
    pub base_voltage_v: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_power_va: Option<f64>,
}

fn default_base_voltage() -> f64 {
    NOMINAL_VOLTAGE_V
}

impl NetworkFile {
    pub fn into_model(self) -> Result<NetworkModel> {
        if self.slack_id >= self.buses.len() {
            return Err(Error::Topology(format!(
                "slack_id {} out of range",
                self.slack_id
            )));
        }
        let buses = self
            .buses
            .iter()
            .map(|b| Bus {
                id: b.id,
                kind: if b.id == self.slack_id {
                    BusKind::Slack
                } else {
                    BusKind::Load
                },
                has_load: b.has_load && b.id != self.slack_id,
            })
            .collect();
        let lines = self
            .lines
            .iter()
            .map(|l| Line {
                from: l.from,
                to: l.to,
                resistance: l.r_ohm,
                reactance: l.x_ohm,
            })
            .collect();
        NetworkModel::new(
            buses,
            lines,
            self.base_voltage_v,
            self.base_power_va.unwrap_or(DEFAULT_BASE_POWER_VA),
        )
    }
}

/// Builds a simple chain: slack at 0, buses 1..n in series with identical
/// impedance.
pub fn chain_feeder(n: usize, r_ohm: f64, x_ohm: f64) -> Result<NetworkModel> {
    if n < 2 {
        return param("a chain needs at least 2 buses");
    }
    let buses = (0..n)
        .map(|id| Bus {
            id,
            kind: if id == 0 {
                BusKind::Slack
            } else {
                BusKind::Load
            },
            has_load: id != 0,
        })
        .collect();
    let lines = (1..n)
        .map(|id| Line {
            from: id - 1,
            to: id,
            resistance: r_ohm,
            reactance: x_ohm,
        })
        .collect();
    NetworkModel::new(buses, lines, NOMINAL_VOLTAGE_V, DEFAULT_BASE_POWER_VA)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn two_bus_admittance() {
        let net = chain_feeder(2, 0.6, 0.1).unwrap();
        let y = 1.0 / c(0.6, 0.1);
        assert!((net.admittance[(0, 0)] - y).norm() < 1e-14);
        assert!((net.admittance[(1, 1)] - y).norm() < 1e-14);
        assert!((net.admittance[(0, 1)] + y).norm() < 1e-14);
        assert!((net.admittance[(1, 0)] + y).norm() < 1e-14);
    }

    #[test]
    fn series_lines_middle_diagonal() {
        let net = chain_feeder(3, 0.5, 0.2).unwrap();
        let y = 1.0 / c(0.5, 0.2);
        assert!((net.admittance[(1, 1)] - 2.0 * y).norm() < 1e-14);
    }

    #[test]
    fn two_bus_reduced_impedance_is_line_impedance() {
        let net = chain_feeder(2, 0.6, 0.1).unwrap();
        let (r, x) = reduce_and_invert(&net.admittance, 0).unwrap();
        assert!((r[(0, 0)] - 0.6).abs() < 1e-12);
        assert!((x[(0, 0)] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn three_bus_chain_shared_path() {
        let z = c(0.5, 0.0833);
        let net = chain_feeder(3, z.re, z.im).unwrap();
        let (r, x) = reduce_and_invert(&net.admittance, 0).unwrap();
        assert!((r[(0, 0)] - z.re).abs() < 1e-12 && (x[(0, 0)] - z.im).abs() < 1e-12);
        assert!((r[(1, 1)] - 2.0 * z.re).abs() < 1e-12 && (x[(1, 1)] - 2.0 * z.im).abs() < 1e-12);
        assert!((r[(0, 1)] - z.re).abs() < 1e-12 && (x[(0, 1)] - z.im).abs() < 1e-12);
    }

    #[test]
    fn zero_impedance_rejected() {
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
            resistance: 0.0,
            reactance: 0.1,
        }];
        assert!(matches!(
            build_admittance(&buses, &lines),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn disconnected_rejected() {
        let buses = (0..3)
            .map(|id| Bus {
                id,
                kind: if id == 0 {
                    BusKind::Slack
                } else {
                    BusKind::Load
                },
                has_load: true,
            })
            .collect::<Vec<_>>();
        let lines = vec![Line {
            from: 0,
            to: 1,
            resistance: 0.1,
            reactance: 0.02,
        }];
        assert!(matches!(
            build_admittance(&buses, &lines),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn two_slacks_rejected() {
        let buses = vec![
            Bus {
                id: 0,
                kind: BusKind::Slack,
                has_load: false,
            },
            Bus {
                id: 1,
                kind: BusKind::Slack,
                has_load: false,
            },
        ];
        let lines = vec![Line {
            from: 0,
            to: 1,
            resistance: 0.1,
            reactance: 0.02,
        }];
        assert!(matches!(
            build_admittance(&buses, &lines),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn synthetic_feeder_ratio_and_determinism() {
        let spec = FeederSpec {
            nodes: 114,
            seed: 1,
            ..Default::default()
        };
        let a = generate_synthetic_feeder(&spec).unwrap();
        let b = generate_synthetic_feeder(&spec).unwrap();
        assert_eq!(a.bus_count(), 114);
        for l in &a.lines {
            assert!((l.resistance / l.reactance - 6.0).abs() < 1e-12);
        }
        assert_eq!(a.lines, b.lines);
        assert!(a.is_radial());
    }

    #[test]
    fn synthetic_two_nodes_has_one_line() {
        let net = generate_synthetic_feeder(&FeederSpec {
            nodes: 2,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(net.lines.len(), 1);
    }

    #[test]
    fn synthetic_too_small() {
        assert!(generate_synthetic_feeder(&FeederSpec {
            nodes: 1,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn scale_identity_and_factor() {
        let net = chain_feeder(4, 0.6, 0.1).unwrap();
        let same = scale_feeder(&net, 1.0).unwrap();
        assert_eq!(same.lines, net.lines);
        let big = scale_feeder(&net, 2.5).unwrap();
        assert!((big.lines[0].resistance - 1.5).abs() < 1e-12);
        assert!(scale_feeder(&net, 0.0).is_err());
        assert!(scale_feeder(&net, -1.0).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let net = generate_synthetic_feeder(&FeederSpec {
            nodes: 7,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let text = serde_json::to_string(&net.to_file()).unwrap();
        let back: NetworkFile = serde_json::from_str(&text).unwrap();
        let back = back.into_model().unwrap();
        assert_eq!(back.lines, net.lines);
        assert_eq!(back.slack, net.slack);
    }
}
