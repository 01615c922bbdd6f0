//! Coordinated inverter control: a convex program over curtailment and
//! reactive setpoints of the coordinated fleet, solved once per timestep
//! against the linearized voltage model.
//!
//! Voltages are affine in the decision variables and are substituted out,
//! so the program carries only curtailment `P_c`, reactive power `q_c`, a
//! hinge variable per inverter for the self-sufficiency reward and an
//! overvoltage slack per monitored node.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::inverters::{pu, DroopSettings};
use crate::network::NetworkModel;
use crate::powerflow::InjectionSet;
use crate::qp::{self, QpProblem, QpSettings, QpStatus};

/// Chord of `v²` over `[lo, hi]`: `m·v + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PwlSegment {
    pub lo: f64,
    pub hi: f64,
    pub m: f64,
    pub c: f64,
}

impl PwlSegment {
    pub fn eval(&self, v: f64) -> f64 {
        self.m * v + self.c
    }
}

pub fn pwl_square_coefficients(breakpoints: &[f64]) -> Result<Vec<PwlSegment>> {
    if breakpoints.len() < 2 {
        return param("at least two breakpoints are required");
    }
    if breakpoints.iter().any(|b| !b.is_finite()) || breakpoints.windows(2).any(|w| w[1] <= w[0]) {
        return param("breakpoints must be finite and strictly increasing");
    }
    Ok(breakpoints
        .windows(2)
        .map(|w| PwlSegment {
            lo: w[0],
            hi: w[1],
            m: w[0] + w[1],
            c: -w[0] * w[1],
        })
        .collect())
}

/// Piecewise-linear interpolant of `v²`, i.e. the largest chord value.
/// Outside the breakpoint span the end chords are extended.
pub fn pwl_square(segments: &[PwlSegment], v: f64) -> f64 {
    segments
        .iter()
        .map(|s| s.eval(v))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Reward for curtailing only exported surplus: `-√M·min(P_c, max(P_av - P_d, 0))`.
pub fn self_sufficiency_term(curtail: f64, p_av: f64, p_demand: f64, big_m: f64) -> f64 {
    -big_m.sqrt() * curtail.min((p_av - p_demand).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CicSettings {
    /// Voltage ceiling in per-unit.
    pub v_cic: f64,
    pub big_m: f64,
    pub q_min_pu: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    pub re_breakpoints: Vec<f64>,
    pub im_breakpoints: Vec<f64>,
    /// Edges of the inscribed polygon used for the apparent power limit.
    pub capacity_facets: usize,
}

impl Default for CicSettings {
    fn default() -> Self {
        Self {
            v_cic: pu(255.85),
            big_m: 1e4,
            q_min_pu: 0.44,
            tolerance: 1e-6,
            max_iter: 20_000,
            re_breakpoints: vec![pu(207.0), pu(253.0), pu(265.0)],
            im_breakpoints: vec![0.0, 0.1, 0.2],
            capacity_facets: 16,
        }
    }
}

impl CicSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_cic > 0.0 && self.v_cic.is_finite()) {
            return param("v_cic must be positive");
        }
        if !(self.big_m > 0.0 && self.big_m.is_finite()) {
            return param("big_m must be positive");
        }
        if !(self.q_min_pu > 0.0 && self.q_min_pu < 1.0) {
            return param("q_min_pu must lie in (0,1)");
        }
        if !(self.tolerance > 0.0) || self.max_iter == 0 {
            return param("solver tolerance and iteration limit must be positive");
        }
        if self.capacity_facets < 2 {
            return param("capacity_facets must be at least 2");
        }
        pwl_square_coefficients(&self.re_breakpoints)?;
        pwl_square_coefficients(&self.im_breakpoints)?;
        Ok(())
    }

    pub fn validate_against(&self, droop: &DroopSettings) -> Result<()> {
        self.validate()?;
        if self.v_cic >= droop.v_trip {
            return param("v_cic must be below v_trip");
        }
        Ok(())
    }
}

/// One coordinated inverter. `bus` is a reduced-bus index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatedUnit {
    pub bus: usize,
    pub p_av: f64,
    pub p_demand: f64,
    pub s_rating: f64,
}

/// Extra constraints used by the aggregator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DispatchLimits {
    /// Bounds on the fleet's summed active injection, kW.
    pub total_injection: Option<(f64, f64)>,
    /// Reactive setpoints held fixed, kvar per unit.
    pub fixed_q: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct CicProblem<'a> {
    pub network: &'a NetworkModel,
    /// Signed injections of everything except coordinated PV, kW/kvar per
    /// reduced bus.
    pub net: InjectionSet,
    pub units: Vec<CoordinatedUnit>,
    /// Reduced-bus indices whose voltage is bounded by `v_cic`.
    pub monitored: Vec<usize>,
    pub settings: CicSettings,
    pub limits: DispatchLimits,
}

/// Line endpoints as reduced indices (`None` for the slack) and conductance.
#[derive(Debug, Clone)]
struct LossLine {
    from: Option<usize>,
    to: Option<usize>,
    g: f64,
}

#[derive(Debug, Clone)]
pub struct CicProgram {
    pub qp: QpProblem,
    units: Vec<CoordinatedUnit>,
    monitored: Vec<usize>,
    re_const: DVector<f64>,
    im_const: DVector<f64>,
    re_lin: DMatrix<f64>,
    im_lin: DMatrix<f64>,
    re_segments: Vec<PwlSegment>,
    im_segments: Vec<PwlSegment>,
    bound: f64,
    big_m: f64,
    q_lo: Vec<f64>,
    q_hi: Vec<f64>,
    excess: Vec<f64>,
    lines: Vec<LossLine>,
    kva: f64,
    infeasible: bool,
}

impl CicProgram {
    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    pub fn variable_count(&self) -> usize {
        self.qp.n()
    }

    /// Upper bound applied to the squared-voltage surrogate.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Linearized `(Re V, Im V)` per reduced bus for given setpoints.
    pub fn predict(&self, curtail: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let u = self.decision(curtail, q);
        let re = &self.re_const + &self.re_lin * &u;
        let im = &self.im_const + &self.im_lin * &u;
        (re.iter().copied().collect(), im.iter().copied().collect())
    }

    /// Squared-voltage surrogate: chord of `Re²` plus chord of `|Im|²`.
    pub fn surrogate(&self, re: f64, im: f64) -> f64 {
        pwl_square(&self.re_segments, re) + pwl_square(&self.im_segments, im.abs())
    }

    /// Linearized line losses in kW.
    pub fn losses(&self, re: &[f64], im: &[f64]) -> f64 {
        let at = |b: Option<usize>, v: &[f64], slack: f64| b.map_or(slack, |k| v[k]);
        self.lines
            .iter()
            .map(|l| {
                let dr = at(l.from, re, 1.0) - at(l.to, re, 1.0);
                let di = at(l.from, im, 0.0) - at(l.to, im, 0.0);
                l.g * (dr * dr + di * di)
            })
            .sum::<f64>()
            * self.kva
    }

    fn decision(&self, curtail: &[f64], q: &[f64]) -> DVector<f64> {
        let c = self.units.len();
        let mut u = DVector::zeros(2 * c);
        for k in 0..c {
            u[k] = curtail[k];
            u[c + k] = q[k];
        }
        u
    }
}

fn var_p(k: usize) -> usize {
    k
}

fn var_q(c: usize, k: usize) -> usize {
    c + k
}

fn var_h(c: usize, k: usize) -> usize {
    2 * c + k
}

fn var_s(c: usize, d: usize) -> usize {
    3 * c + d
}

/// Sparse constraint row with its lower and upper bound.
type Row = (Vec<(usize, f64)>, f64, f64);

pub fn assemble(problem: &CicProblem<'_>) -> Result<CicProgram> {
    let settings = &problem.settings;
    settings.validate()?;
    let network = problem.network;
    let n = network.reduced_buses().len();
    if problem.net.p.len() != n || problem.net.q.len() != n {
        return param(format!("injection vectors must have {n} entries"));
    }
    let c = problem.units.len();
    for (k, u) in problem.units.iter().enumerate() {
        if u.bus >= n {
            return param(format!(
                "coordinated unit {k} references bus index {} outside 0..{n}",
                u.bus
            ));
        }
        if !(u.p_av >= 0.0 && u.p_av.is_finite() && u.p_demand >= 0.0 && u.p_demand.is_finite()) {
            return param(format!(
                "coordinated unit {k} has invalid available power or demand"
            ));
        }
        if !(u.s_rating > 0.0 && u.s_rating.is_finite()) {
            return param(format!("coordinated unit {k} has a non-positive rating"));
        }
    }
    let mut monitored = problem.monitored.clone();
    monitored.sort_unstable();
    monitored.dedup();
    if let Some(&d) = monitored.last() {
        if d >= n {
            return param(format!("monitored bus index {d} outside 0..{n}"));
        }
    }
    let dcount = monitored.len();

    let mut q_lo: Vec<f64> = problem
        .units
        .iter()
        .map(|u| -settings.q_min_pu * u.s_rating)
        .collect();
    let mut q_hi = vec![0.0; c];
    if let Some(fixed) = &problem.limits.fixed_q {
        if fixed.len() != c {
            return param("fixed_q must have one entry per coordinated unit");
        }
        for k in 0..c {
            if !(fixed[k] >= q_lo[k] - 1e-9 && fixed[k] <= 1e-9) {
                return param(format!(
                    "fixed reactive setpoint {} outside the unit's range",
                    fixed[k]
                ));
            }
            q_lo[k] = fixed[k].min(0.0).max(q_lo[k]);
            q_hi[k] = q_lo[k];
        }
    }

    let kva = network.base_power / 1000.0;
    let r = &network.r_matrix;
    let x = &network.x_matrix;
    let mut p_pu: Vec<f64> = problem.net.p.iter().map(|v| v / kva).collect();
    let q_pu: Vec<f64> = problem.net.q.iter().map(|v| v / kva).collect();
    for u in &problem.units {
        p_pu[u.bus] += u.p_av / kva;
    }
    let mut re_const = DVector::from_element(n, 1.0);
    let mut im_const = DVector::zeros(n);
    for i in 0..n {
        for m in 0..n {
            re_const[i] += r[(i, m)] * p_pu[m] + x[(i, m)] * q_pu[m];
            im_const[i] += x[(i, m)] * p_pu[m] - r[(i, m)] * q_pu[m];
        }
    }
    let mut re_lin = DMatrix::zeros(n, 2 * c);
    let mut im_lin = DMatrix::zeros(n, 2 * c);
    for (k, u) in problem.units.iter().enumerate() {
        for i in 0..n {
            re_lin[(i, k)] = -r[(i, u.bus)] / kva;
            re_lin[(i, c + k)] = x[(i, u.bus)] / kva;
            im_lin[(i, k)] = -x[(i, u.bus)] / kva;
            im_lin[(i, c + k)] = -r[(i, u.bus)] / kva;
        }
    }

    let re_segments = pwl_square_coefficients(&settings.re_breakpoints)?;
    let im_segments = pwl_square_coefficients(&settings.im_breakpoints)?;
    let bound = pwl_square(&re_segments, settings.v_cic);
    let excess: Vec<f64> = problem
        .units
        .iter()
        .map(|u| (u.p_av - u.p_demand).max(0.0))
        .collect();

    let nv = 3 * c + dcount;
    let mut pmat = DMatrix::zeros(nv, nv);
    let mut qvec = DVector::zeros(nv);
    let lines: Vec<LossLine> = network
        .lines
        .iter()
        .enumerate()
        .map(|(k, l)| LossLine {
            from: network.reduced_index(l.from),
            to: network.reduced_index(l.to),
            g: network.line_admittance_pu(k).re,
        })
        .collect();
    for l in &lines {
        let row = |lin: &DMatrix<f64>, konst: &DVector<f64>, b: Option<usize>, slack: f64| match b {
            Some(i) => (lin.row(i).transpose().into_owned(), konst[i]),
            None => (DVector::zeros(2 * c), slack),
        };
        let (ra, ca) = row(&re_lin, &re_const, l.from, 1.0);
        let (rb, cb) = row(&re_lin, &re_const, l.to, 1.0);
        let (ia, da) = row(&im_lin, &im_const, l.from, 0.0);
        let (ib, db) = row(&im_lin, &im_const, l.to, 0.0);
        let a = ra - rb;
        let b = ia - ib;
        let (ac, bc) = (ca - cb, da - db);
        let w = 2.0 * l.g * kva;
        let mut block = pmat.view_mut((0, 0), (2 * c, 2 * c));
        block += (&a * a.transpose() + &b * b.transpose()) * w;
        let mut lin = qvec.rows_mut(0, 2 * c);
        lin += (&a * ac + &b * bc) * w;
    }
    let sqrt_m = settings.big_m.sqrt();
    for k in 0..c {
        qvec[var_p(k)] += 1.0;
        qvec[var_h(c, k)] += sqrt_m;
    }
    for d in 0..dcount {
        qvec[var_s(c, d)] += settings.big_m;
    }

    let mut rows: Vec<Row> = Vec::new();
    let inf = f64::INFINITY;
    for (k, u) in problem.units.iter().enumerate() {
        rows.push((vec![(var_p(k), 1.0)], 0.0, u.p_av));
        rows.push((vec![(var_q(c, k), 1.0)], q_lo[k], q_hi[k]));
        rows.push((vec![(var_h(c, k), 1.0)], 0.0, inf));
        rows.push((vec![(var_h(c, k), 1.0), (var_p(k), -1.0)], -excess[k], inf));
    }
    for d in 0..dcount {
        rows.push((vec![(var_s(c, d), 1.0)], 0.0, inf));
    }
    for (di, &bus) in monitored.iter().enumerate() {
        for sr in &re_segments {
            for si in &im_segments {
                for sign in [1.0, -1.0] {
                    let mut coeffs = Vec::with_capacity(2 * c + 1);
                    for j in 0..2 * c {
                        let v = sr.m * re_lin[(bus, j)] + sign * si.m * im_lin[(bus, j)];
                        if v != 0.0 {
                            coeffs.push((j, v));
                        }
                    }
                    coeffs.push((var_s(c, di), -1.0));
                    let hi =
                        bound - sr.c - si.c - sr.m * re_const[bus] - sign * si.m * im_const[bus];
                    rows.push((coeffs, f64::NEG_INFINITY, hi));
                }
            }
        }
    }
    // inscribed polygon of the apparent power disk, only where it can bind
    let facets = settings.capacity_facets;
    let half = std::f64::consts::FRAC_PI_2 / facets as f64 / 2.0;
    for (k, u) in problem.units.iter().enumerate() {
        let corner = u.p_av.powi(2) + q_lo[k].powi(2);
        if corner <= u.s_rating.powi(2) {
            continue;
        }
        for f in 0..facets {
            let theta = (2 * f + 1) as f64 * half;
            let (cs, sn) = (theta.cos(), theta.sin());
            // cs·(p_av - P) + sn·(-q) <= S·cos(half)
            rows.push((
                vec![(var_p(k), -cs), (var_q(c, k), -sn)],
                f64::NEG_INFINITY,
                u.s_rating * half.cos() - cs * u.p_av,
            ));
        }
    }
    let total_av: f64 = problem.units.iter().map(|u| u.p_av).sum();
    let mut infeasible = false;
    if let Some((lo, hi)) = problem.limits.total_injection {
        if !(lo <= hi) || lo > total_av + 1e-9 || hi < -1e-9 {
            infeasible = true;
        }
        rows.push((
            (0..c).map(|k| (var_p(k), -1.0)).collect(),
            lo - total_av,
            hi - total_av,
        ));
    }

    let m = rows.len();
    let mut a = DMatrix::zeros(m, nv);
    let mut l = DVector::zeros(m);
    let mut uvec = DVector::zeros(m);
    for (i, (coeffs, lo, hi)) in rows.into_iter().enumerate() {
        for (j, v) in coeffs {
            a[(i, j)] = v;
        }
        l[i] = lo;
        uvec[i] = hi;
    }
    Ok(CicProgram {
        qp: QpProblem {
            p: pmat,
            q: qvec,
            a,
            l,
            u: uvec,
        },
        units: problem.units.clone(),
        monitored,
        re_const,
        im_const,
        re_lin,
        im_lin,
        re_segments,
        im_segments,
        bound,
        big_m: settings.big_m,
        q_lo,
        q_hi,
        excess,
        lines,
        kva,
        infeasible,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CicStatus {
    Optimal,
    NotConverged,
    /// Constraints cannot be met; setpoints are the full-support fallback.
    Infeasible,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CicSolution {
    pub curtail: Vec<f64>,
    pub p_inj: Vec<f64>,
    pub q: Vec<f64>,
    /// Linearized voltages per reduced bus at the returned setpoints.
    pub predicted_re: Vec<f64>,
    pub predicted_im: Vec<f64>,
    pub phi: f64,
    pub rho: f64,
    pub kappa: f64,
    pub nu: f64,
    /// Minimized value, `φ + ρ + κ + ν + √M·φ`; the last two form a hinge
    /// on curtailment beyond each household's export surplus.
    pub objective: f64,
    pub status: CicStatus,
    pub iterations: usize,
    #[serde(skip)]
    pub warm: Option<WarmStart>,
}

pub fn solve(program: &CicProgram, tolerance: f64, max_iter: usize) -> CicSolution {
    solve_warm(program, tolerance, max_iter, None)
}

pub fn solve_warm(
    program: &CicProgram,
    tolerance: f64,
    max_iter: usize,
    warm: Option<&WarmStart>,
) -> CicSolution {
    let c = program.units.len();
    if program.infeasible {
        return fallback(program);
    }
    if c == 0 {
        return finish(program, Vec::new(), Vec::new(), CicStatus::Optimal, 0, None);
    }
    let settings = QpSettings {
        eps_abs: tolerance,
        eps_rel: tolerance,
        max_iter,
        ..QpSettings::default()
    };
    let warm_vecs = warm.and_then(|w| {
        (w.x.len() == program.qp.n() && w.y.len() == program.qp.m()).then(|| {
            (
                DVector::from_vec(w.x.clone()),
                DVector::from_vec(w.y.clone()),
            )
        })
    });
    let sol = qp::solve(
        &program.qp,
        &settings,
        warm_vecs.as_ref().map(|(x, y)| (x, y)),
    );
    let status = match sol.status {
        QpStatus::Solved => CicStatus::Optimal,
        QpStatus::MaxIterations => CicStatus::NotConverged,
        QpStatus::PrimalInfeasible => return fallback(program),
    };
    let curtail: Vec<f64> = (0..c).map(|k| sol.x[var_p(k)]).collect();
    let q: Vec<f64> = (0..c).map(|k| sol.x[var_q(c, k)]).collect();
    let warm = WarmStart {
        x: sol.x.iter().copied().collect(),
        y: sol.y.iter().copied().collect(),
    };
    finish(program, curtail, q, status, sol.iterations, Some(warm))
}

/// Clamps to the box and radially projects onto the apparent power disk.
pub fn project_setpoint(
    p_inj: f64,
    q: f64,
    p_av: f64,
    q_lo: f64,
    q_hi: f64,
    s_rating: f64,
) -> (f64, f64) {
    let mut p = p_inj.clamp(0.0, p_av);
    let mut qq = q.clamp(q_lo, q_hi);
    let mag = (p * p + qq * qq).sqrt();
    if mag > s_rating {
        p *= s_rating / mag;
        qq *= s_rating / mag;
    }
    (p, qq)
}

fn finish(
    program: &CicProgram,
    curtail: Vec<f64>,
    q: Vec<f64>,
    status: CicStatus,
    iterations: usize,
    warm: Option<WarmStart>,
) -> CicSolution {
    let c = program.units.len();
    let mut p_inj = Vec::with_capacity(c);
    let mut q_out = Vec::with_capacity(c);
    let mut curtail_out = Vec::with_capacity(c);
    for k in 0..c {
        let u = &program.units[k];
        let (p, qq) = project_setpoint(
            u.p_av - curtail[k],
            q[k],
            u.p_av,
            program.q_lo[k],
            program.q_hi[k],
            u.s_rating,
        );
        p_inj.push(p);
        q_out.push(qq);
        curtail_out.push(u.p_av - p);
    }
    let (re, im) = program.predict(&curtail_out, &q_out);
    let phi: f64 = curtail_out.iter().sum();
    let rho = program.losses(&re, &im);
    let kappa = program.big_m
        * program
            .monitored
            .iter()
            .map(|&d| (program.surrogate(re[d], im[d]) - program.bound).max(0.0))
            .sum::<f64>();
    let nu: f64 = (0..c)
        .map(|k| {
            self_sufficiency_term(
                curtail_out[k],
                program.units[k].p_av,
                program.units[k].p_demand,
                program.big_m,
            )
        })
        .sum();
    let hinge: f64 = (0..c)
        .map(|k| (curtail_out[k] - program.excess[k]).max(0.0))
        .sum();
    CicSolution {
        curtail: curtail_out,
        p_inj,
        q: q_out,
        predicted_re: re,
        predicted_im: im,
        phi,
        rho,
        kappa,
        nu,
        objective: phi + rho + kappa + program.big_m.sqrt() * hinge,
        status,
        iterations,
        warm,
    }
}

fn fallback(program: &CicProgram) -> CicSolution {
    let curtail: Vec<f64> = program.units.iter().map(|u| u.p_av).collect();
    let q: Vec<f64> = program
        .units
        .iter()
        .zip(&program.q_lo)
        .map(|(_, &lo)| lo)
        .collect();
    let mut sol = finish(program, curtail, q, CicStatus::Infeasible, 0, None);
    sol.status = CicStatus::Infeasible;
    sol
}
