//! Brute-force reference for the coordinated controller objective.

use feedersim::cic::{
    assemble, solve, CicProblem, CicSettings, CicSolution, CicStatus, CoordinatedUnit,
    DispatchLimits,
};
use feedersim::network::{chain_feeder, NetworkModel};
use feedersim::powerflow::InjectionSet;

pub const STEP: f64 = 0.01;
pub const Q_LEVELS: usize = 5;

pub struct Case {
    pub network: NetworkModel,
    pub problem_net: InjectionSet,
    pub units: Vec<CoordinatedUnit>,
    pub settings: CicSettings,
}

pub fn cic_case() -> Case {
    let network = chain_feeder(6, 0.25, 0.25 / 6.0).unwrap();
    let n = network.reduced_buses().len();
    let demand = 0.3;
    let mut net = InjectionSet::zeros(n);
    for i in 0..n {
        net.p[i] = -demand;
        net.q[i] = -demand * 0.329;
    }
    let units = [3, 4]
        .iter()
        .map(|&bus| CoordinatedUnit {
            bus,
            p_av: 4.0,
            p_demand: demand,
            s_rating: 6.0,
        })
        .collect();
    Case {
        network,
        problem_net: net,
        units,
        settings: CicSettings::default(),
    }
}

pub fn cic_problem(c: &Case, fixed_q: Option<Vec<f64>>) -> CicProblem<'_> {
    CicProblem {
        network: &c.network,
        net: c.problem_net.clone(),
        units: c.units.clone(),
        monitored: (0..c.network.reduced_buses().len()).collect(),
        settings: c.settings.clone(),
        limits: DispatchLimits {
            total_injection: None,
            fixed_q,
        },
    }
}

/// Largest chord of `v²` through consecutive breakpoints.
fn chord(bp: &[f64], v: f64) -> f64 {
    bp.windows(2)
        .map(|w| (w[0] + w[1]) * v - w[0] * w[1])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Objective evaluated directly from the sensitivity matrices.
pub struct GridOracle<'a> {
    c: &'a Case,
    pub base_re: Vec<f64>,
    pub base_im: Vec<f64>,
    bound: f64,
}

impl<'a> GridOracle<'a> {
    pub fn new(c: &'a Case) -> Self {
        let n = c.network.reduced_buses().len();
        let (r, x) = (&c.network.r_matrix, &c.network.x_matrix);
        let mut p = c.problem_net.p.clone();
        for u in &c.units {
            p[u.bus] += u.p_av;
        }
        let q = &c.problem_net.q;
        let base_re = (0..n)
            .map(|i| {
                1.0 + (0..n)
                    .map(|m| r[(i, m)] * p[m] + x[(i, m)] * q[m])
                    .sum::<f64>()
            })
            .collect();
        let base_im = (0..n)
            .map(|i| {
                (0..n)
                    .map(|m| x[(i, m)] * p[m] - r[(i, m)] * q[m])
                    .sum::<f64>()
            })
            .collect();
        let s = &c.settings;
        GridOracle {
            c,
            base_re,
            base_im,
            bound: chord(&s.re_breakpoints, s.v_cic),
        }
    }

    pub fn objective(&self, curtail: &[f64], q: &[f64], re: &mut [f64], im: &mut [f64]) -> f64 {
        let net = &self.c.network;
        let (r, x) = (&net.r_matrix, &net.x_matrix);
        re.copy_from_slice(&self.base_re);
        im.copy_from_slice(&self.base_im);
        for (k, u) in self.c.units.iter().enumerate() {
            let (dp, dq) = (-curtail[k], q[k]);
            for i in 0..re.len() {
                re[i] += r[(i, u.bus)] * dp + x[(i, u.bus)] * dq;
                im[i] += x[(i, u.bus)] * dp - r[(i, u.bus)] * dq;
            }
        }
        let s = &self.c.settings;
        let mut losses = 0.0;
        for (k, line) in net.lines.iter().enumerate() {
            let at = |b: usize, v: &[f64], slack: f64| net.reduced_index(b).map_or(slack, |i| v[i]);
            let dr = at(line.from, re, 1.0) - at(line.to, re, 1.0);
            let di = at(line.from, im, 0.0) - at(line.to, im, 0.0);
            losses += net.line_admittance_pu(k).re * (dr * dr + di * di);
        }
        let over: f64 = (0..re.len())
            .map(|i| {
                (chord(&s.re_breakpoints, re[i]) + chord(&s.im_breakpoints, im[i].abs())
                    - self.bound)
                    .max(0.0)
            })
            .sum();
        let hinge: f64 = self
            .c
            .units
            .iter()
            .enumerate()
            .map(|(k, u)| (curtail[k] - (u.p_av - u.p_demand).max(0.0)).max(0.0))
            .sum();
        curtail.iter().sum::<f64>() + losses + s.big_m * over + s.big_m.sqrt() * hinge
    }

    /// Minimum over the curtailment grid with reactive setpoints held.
    pub fn grid_min(&self, q: &[f64]) -> f64 {
        let n = self.base_re.len();
        let (mut re, mut im) = (vec![0.0; n], vec![0.0; n]);
        let u = &self.c.units;
        let steps = |k: usize| (u[k].p_av / STEP).round() as usize;
        let mut best = f64::INFINITY;
        for a in 0..=steps(0) {
            for b in 0..=steps(1) {
                let curtail = [a as f64 * STEP, b as f64 * STEP];
                let feasible = (0..2).all(|k| {
                    (u[k].p_av - curtail[k]).powi(2) + q[k] * q[k] <= u[k].s_rating.powi(2)
                });
                if feasible {
                    best = best.min(self.objective(&curtail, q, &mut re, &mut im));
                }
            }
        }
        best
    }
}

pub fn q_grid(c: &Case) -> Vec<f64> {
    let lo = -c.settings.q_min_pu * c.units[0].s_rating;
    (0..Q_LEVELS)
        .map(|i| lo * i as f64 / (Q_LEVELS - 1) as f64)
        .collect()
}

/// Setpoint violations of box and apparent power limits, if any.
pub fn setpoint_violations(c: &Case, sol: &CicSolution, q_bounds: &[(f64, f64)]) -> Vec<String> {
    let mut out = Vec::new();
    for (k, u) in c.units.iter().enumerate() {
        let (p, q) = (sol.p_inj[k], sol.q[k]);
        if !(p >= 0.0 && p <= u.p_av) {
            out.push(format!(
                "unit {k}: active setpoint {p} outside [0, {}]",
                u.p_av
            ));
        }
        if !(q >= q_bounds[k].0 && q <= q_bounds[k].1) {
            out.push(format!(
                "unit {k}: reactive setpoint {q} outside {:?}",
                q_bounds[k]
            ));
        }
        if p * p + q * q > u.s_rating * u.s_rating * (1.0 + 1e-12) {
            out.push(format!(
                "unit {k}: apparent power {} above {}",
                p.hypot(q),
                u.s_rating
            ));
        }
        if sol.curtail[k] != u.p_av - p {
            out.push(format!("unit {k}: curtailment inconsistent with setpoint"));
        }
    }
    out
}

pub struct GridReport {
    /// Largest |solver - grid| over the fixed reactive combinations.
    pub fixed_gap: f64,
    /// |solver - grid| with reactive power free.
    pub free_gap: f64,
    /// Largest |reported - recomputed| objective.
    pub recompute_gap: f64,
    pub free_curtailment: f64,
    pub problems: Vec<String>,
}

pub fn compare_with_grid() -> GridReport {
    let c = cic_case();
    let oracle = GridOracle::new(&c);
    let grid = q_grid(&c);
    let (lo, hi) = (grid[Q_LEVELS - 1], 0.0);
    let n = oracle.base_re.len();
    let mut report = GridReport {
        fixed_gap: 0.0,
        free_gap: 0.0,
        recompute_gap: 0.0,
        free_curtailment: 0.0,
        problems: Vec::new(),
    };

    let mut overall = f64::INFINITY;
    for &q0 in &grid {
        for &q1 in &grid {
            let q = [q0, q1];
            let expected = oracle.grid_min(&q);
            overall = overall.min(expected);
            let sol = solve(
                &assemble(&cic_problem(&c, Some(q.to_vec()))).unwrap(),
                1e-8,
                20_000,
            );
            if sol.status != CicStatus::Optimal {
                report
                    .problems
                    .push(format!("q={q:?}: status {:?}", sol.status));
            }
            report
                .problems
                .extend(setpoint_violations(&c, &sol, &[(q0, q0), (q1, q1)]));
            let direct =
                oracle.objective(&sol.curtail, &sol.q, &mut vec![0.0; n], &mut vec![0.0; n]);
            report.recompute_gap = report.recompute_gap.max((direct - sol.objective).abs());
            report.fixed_gap = report.fixed_gap.max((sol.objective - expected).abs());
        }
    }

    let sol = solve(&assemble(&cic_problem(&c, None)).unwrap(), 1e-8, 20_000);
    if sol.status != CicStatus::Optimal {
        report
            .problems
            .push(format!("free: status {:?}", sol.status));
    }
    report
        .problems
        .extend(setpoint_violations(&c, &sol, &[(lo, hi), (lo, hi)]));
    report.free_gap = (sol.objective - overall).abs();
    report.free_curtailment = sol.curtail.iter().sum();
    report
}
