//! Virtual power plant logic: reserve operation, regulation offers, request
//! dispatch through the coordinated fleet, and the measured response of the
//! autonomous inverters sharing the feeder.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cic::{self, CicProblem, CicSettings, CicSolution, CicStatus};
use crate::config::Mix;
use crate::error::{param, Result};
use crate::inverters::{trip_window_steps, InverterKind};
use crate::rng;
use crate::scenario::{
    penetration_count, CicMode, Experiment, Fleet, SimState, StepInputs, StepRecord,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GssSettings {
    /// Share of the maximum feasible output held back as reserve.
    pub gamma: f64,
    pub hold_minutes: f64,
    /// PV output levels as fractions of the inverter AC rating.
    pub levels: Vec<f64>,
    /// Requests spread over all levels.
    pub requests: usize,
    pub penetration: f64,
    /// Coordinated share of the fleet, the rest is autonomous.
    pub coordinated_share: f64,
    pub placement: usize,
    /// Steady operation before the first request at each level.
    pub warmup_minutes: f64,
    /// Hour of day whose demand is held during the sweep.
    pub load_time_h: f64,
}

impl Default for GssSettings {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            hold_minutes: 5.0,
            levels: (0..13).map(|k| (40 + 5 * k) as f64 / 100.0).collect(),
            requests: 320,
            penetration: 0.6,
            coordinated_share: 0.5,
            placement: 0,
            warmup_minutes: 60.0,
            load_time_h: 13.0,
        }
    }
}

impl GssSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return param(format!("gamma must lie in [0,1), got {}", self.gamma));
        }
        if !(self.hold_minutes > 0.0) || !(self.warmup_minutes >= 0.0) {
            return param("hold_minutes must be positive and warmup_minutes non-negative");
        }
        if self.levels.is_empty() || self.levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return param("levels must be non-empty fractions in [0,1]");
        }
        if self.requests < self.levels.len() {
            return param("requests must cover every level at least once");
        }
        if !(self.penetration > 0.0 && self.penetration <= 1.0)
            || !(0.0..=1.0).contains(&self.coordinated_share)
        {
            return param("penetration must lie in (0,1] and coordinated_share in [0,1]");
        }
        if !(0.0..24.0).contains(&self.load_time_h) {
            return param("load_time_h must be an hour of day");
        }
        Ok(())
    }

    /// Requests per level: an even split with the remainder going to the
    /// lowest levels.
    pub fn requests_per_level(&self) -> Vec<usize> {
        let n = self.levels.len();
        (0..n)
            .map(|i| self.requests / n + usize::from(i < self.requests % n))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "UR")]
    Up,
    #[serde(rename = "DR")]
    Down,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "UR",
            Direction::Down => "DR",
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Direction::Up => 1.0,
            Direction::Down => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GssRequest {
    pub direction: Direction,
    /// kW, non-negative.
    pub magnitude: f64,
    pub issue_step: usize,
    pub hold_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Fulfilled,
    /// The request could not be met; carries the largest feasible magnitude.
    Rejected {
        max_feasible_kw: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GssOutcome {
    pub status: OutcomeStatus,
    /// Change of the coordinated total against the step before the
    /// request, per held step, kW.
    pub delivered: Vec<f64>,
    /// Change of the autonomous total over the same reference, kW.
    pub autonomous_offset: Vec<f64>,
    pub net_seen_by_operator: Vec<f64>,
    /// Per coordinated unit change at the last held step, kW.
    pub per_inverter_gss: Vec<f64>,
    /// Autonomous curtailment before the request, kW.
    pub prior_autonomous_curtailment: f64,
    pub trips: usize,
}

/// Re-optimizes under `Σ p_inj ≤ (1 - γ)·Σ p_inj_max`, where the maximum is
/// the unconstrained solution of the same problem.
pub fn reserve_setpoints(
    problem: &CicProblem<'_>,
    max_feasible: &CicSolution,
    gamma: f64,
) -> Result<CicSolution> {
    if !(0.0..1.0).contains(&gamma) {
        return param(format!("gamma must lie in [0,1), got {gamma}"));
    }
    if gamma == 0.0 {
        return Ok(max_feasible.clone());
    }
    let total: f64 = max_feasible.p_inj.iter().sum();
    let mut capped = problem.clone();
    capped.limits.total_injection = Some((0.0, (1.0 - gamma) * total));
    let settings = &problem.settings;
    Ok(cic::solve(
        &cic::assemble(&capped)?,
        settings.tolerance,
        settings.max_iter,
    ))
}

/// Up- and down-regulation offers on the current coordinated total.
pub fn offer_bounds(total: f64, gamma: f64) -> (f64, f64) {
    let total = total.max(0.0);
    (gamma * total, (1.0 - gamma) * total)
}

/// Coordinated total required during a request: the prior operating point
/// moved by exactly the requested magnitude.
pub fn delivery_target(request: &GssRequest, prior_total: f64) -> f64 {
    prior_total + request.direction.sign() * request.magnitude
}

/// Whether a dispatch solution meets its constraints, including the
/// controller's voltage ceiling.
pub fn is_deliverable(sol: &CicSolution, settings: &CicSettings) -> bool {
    sol.status == CicStatus::Optimal && sol.kappa <= settings.big_m * settings.tolerance
}

/// Solves the controller program for one held step of a request, with the
/// reactive setpoints frozen at their values before the request.
pub fn dispatch(
    request: &GssRequest,
    problem: &CicProblem<'_>,
    prior_total: f64,
    prior_q: &[f64],
) -> Result<CicSolution> {
    if !(request.magnitude >= 0.0) {
        return param("request magnitude must be non-negative");
    }
    let target = delivery_target(request, prior_total);
    let mut p = problem.clone();
    p.limits.total_injection = Some((target, target));
    p.limits.fixed_q = Some(prior_q.to_vec());
    let s = &problem.settings;
    Ok(cic::solve(&cic::assemble(&p)?, s.tolerance, s.max_iter))
}

/// Signed change of the summed autonomous output.
pub fn measure_autonomous_response(
    before: &[(f64, f64)],
    after: &[(f64, f64)],
    autonomous: &[usize],
) -> f64 {
    autonomous.iter().map(|&k| after[k].0 - before[k].0).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRow {
    pub level: f64,
    pub direction: Direction,
    pub request_kw: f64,
    pub offer_kw: f64,
    pub delivered_kw: f64,
    pub autonomous_offset_kw: f64,
    pub rate_per_unit: f64,
    pub outcome: GssOutcome,
}

/// The VPP fleet: a prefix of one placement ordering split between
/// coordinated and autonomous inverters.
pub fn gss_fleet(exp: &Experiment) -> Result<Fleet> {
    let g = &exp.config.gss;
    let Some(ordering) = exp.orderings.get(g.placement) else {
        return param(format!("gss.placement {} out of range", g.placement));
    };
    let k = penetration_count(ordering.len(), g.penetration)?;
    let mix = Mix {
        legacy: 0.0,
        autonomous: 1.0 - g.coordinated_share,
        non_exporting: 0.0,
        coordinated: g.coordinated_share,
    };
    let mut kinds: Vec<InverterKind> = InverterKind::ALL
        .iter()
        .zip(mix.counts(k))
        .flat_map(|(&kd, c)| std::iter::repeat_n(kd, c))
        .collect();
    kinds.shuffle(&mut rng::stream(
        exp.config.fleet.placement_seed,
        "gss",
        g.placement as u64,
    ));
    let assignments: Vec<(usize, InverterKind)> =
        ordering[..k].iter().copied().zip(kinds).collect();
    let f = &exp.config.fleet;
    Fleet::new(
        &assignments,
        &exp.inputs.households,
        f.s_rating_kva,
        f.p_ac_max_kw,
        trip_window_steps(exp.config.profiles.step_seconds),
    )
}

/// Operating point of a level after warm-up in reserve mode.
struct Warm {
    state: SimState,
    last: StepRecord,
    step: usize,
}

struct LevelRunner<'a> {
    exp: &'a Experiment,
    demand: Vec<f64>,
    pv: f64,
    mode: CicMode,
}

impl LevelRunner<'_> {
    fn inputs(&self, fleet: &Fleet) -> StepInputs {
        StepInputs {
            demand: self.demand.clone(),
            pv: vec![self.pv; fleet.units.len()],
        }
    }

    fn warm_up(&self, fleet: Fleet, level: usize) -> Result<Warm> {
        let g = &self.exp.config.gss;
        let step_s = self.exp.config.profiles.step_seconds;
        let steps = ((g.warmup_minutes * 60.0 / step_s).ceil() as usize).max(1);
        let engine = self.exp.engine(&fleet);
        let inputs = self.inputs(&fleet);
        let rng = rng::stream(self.exp.config.run.seed, "gss-protection", level as u64);
        let mut state = engine.initial_state(fleet, rng);
        let mut last = None;
        for _ in 0..steps {
            last = Some(engine.step(&mut state, &inputs, &self.mode)?);
        }
        Ok(Warm {
            state,
            last: last.expect("at least one warm-up step"),
            step: steps,
        })
    }

    fn run_request(&self, warm: &Warm, request: &GssRequest) -> Result<GssOutcome> {
        let mut state = warm.state.clone();
        let engine = self.exp.engine(&state.fleet);
        let coordinated = engine.coordinated().to_vec();
        let autonomous = state.fleet.indices(InverterKind::Autonomous);
        let inputs = self.inputs(&state.fleet);
        let before = &warm.last.outputs;
        let prior_total: f64 = coordinated.iter().map(|&k| before[k].0).sum();
        let prior_q: Vec<f64> = coordinated.iter().map(|&k| before[k].1).collect();
        let prior_curtail: f64 = autonomous
            .iter()
            .map(|&k| (warm.last.p_av[k] - before[k].0).max(0.0))
            .sum();

        let mut outcome = GssOutcome {
            status: OutcomeStatus::Fulfilled,
            delivered: Vec::with_capacity(request.hold_steps),
            autonomous_offset: Vec::with_capacity(request.hold_steps),
            net_seen_by_operator: Vec::with_capacity(request.hold_steps),
            per_inverter_gss: vec![0.0; coordinated.len()],
            prior_autonomous_curtailment: prior_curtail,
            trips: 0,
        };
        let target = delivery_target(request, prior_total);
        let mode = CicMode::Dispatch {
            total_injection: (target, target),
            fixed_q: prior_q.clone(),
        };
        let snapshot = warm.state.ami.as_ref().expect("warm-up recorded metering");
        let (check, _) = engine.solve_cic(snapshot, &state.fleet, &mode)?;
        if !is_deliverable(&check, &engine.cic) {
            let max_feasible = self.max_feasible(warm, request, prior_total, &prior_q)?;
            outcome.status = OutcomeStatus::Rejected {
                max_feasible_kw: max_feasible,
            };
            return Ok(outcome);
        }
        for _ in 0..request.hold_steps {
            let rec = engine.step(&mut state, &inputs, &mode)?;
            let sol = rec
                .cic
                .as_ref()
                .expect("the GSS fleet has coordinated units");
            if !is_deliverable(sol, &engine.cic) {
                let max_feasible = self.max_feasible(warm, request, prior_total, &prior_q)?;
                outcome.status = OutcomeStatus::Rejected {
                    max_feasible_kw: max_feasible,
                };
                return Ok(outcome);
            }
            let total: f64 = coordinated.iter().map(|&k| rec.outputs[k].0).sum();
            let delivered = total - prior_total;
            let offset = measure_autonomous_response(before, &rec.outputs, &autonomous);
            outcome.delivered.push(delivered);
            outcome.autonomous_offset.push(offset);
            outcome.net_seen_by_operator.push(delivered + offset);
            outcome.per_inverter_gss = coordinated
                .iter()
                .map(|&k| rec.outputs[k].0 - before[k].0)
                .collect();
            outcome.trips += rec.instant_trips.len() + usize::from(rec.average_trip.is_some());
        }
        Ok(outcome)
    }

    /// Largest magnitude the fleet could deliver from the pre-request state.
    fn max_feasible(
        &self,
        warm: &Warm,
        request: &GssRequest,
        prior_total: f64,
        prior_q: &[f64],
    ) -> Result<f64> {
        match request.direction {
            Direction::Down => Ok(prior_total.max(0.0)),
            Direction::Up => {
                let engine = self.exp.engine(&warm.state.fleet);
                let snapshot = warm.state.ami.as_ref().expect("warm-up recorded metering");
                let mode = CicMode::Dispatch {
                    total_injection: (0.0, f64::INFINITY),
                    fixed_q: prior_q.to_vec(),
                };
                let (sol, _) = engine.solve_cic(snapshot, &warm.state.fleet, &mode)?;
                Ok((sol.p_inj.iter().sum::<f64>() - prior_total).max(0.0))
            }
        }
    }
}

/// Response-rate table over all levels and requests. Each level is warmed
/// up once in reserve mode; every request then starts from a copy of that
/// state, so rows are independent and deterministic.
pub fn response_sweep(exp: &Experiment) -> Result<Vec<ResponseRow>> {
    let g = &exp.config.gss;
    g.validate()?;
    let fleet = gss_fleet(exp)?;
    if fleet.count(InverterKind::Coordinated) == 0 {
        return param("the GSS fleet has no coordinated inverters");
    }
    let step_s = exp.config.profiles.step_seconds;
    let hold_steps = ((g.hold_minutes * 60.0 / step_s).round() as usize).max(1);
    let load_step = (0..exp.inputs.steps())
        .min_by(|&a, &b| {
            let t = g.load_time_h * 3600.0;
            (exp.inputs.time(a) - t)
                .abs()
                .total_cmp(&(exp.inputs.time(b) - t).abs())
        })
        .expect("day has steps");
    let demand = exp.inputs.demand(load_step);
    let counts = g.requests_per_level();

    let per_level: Vec<Vec<ResponseRow>> = g
        .levels
        .par_iter()
        .enumerate()
        .map(|(li, &level)| {
            let runner = LevelRunner {
                exp,
                demand: demand.clone(),
                pv: level * exp.config.fleet.p_ac_max_kw,
                mode: CicMode::Reserve { gamma: g.gamma },
            };
            let warm = runner.warm_up(fleet.clone(), li)?;
            let coordinated = fleet.indices(InverterKind::Coordinated);
            let total: f64 = coordinated.iter().map(|&k| warm.last.outputs[k].0).sum();
            let (ur, dr) = offer_bounds(total, g.gamma);
            let k = counts[li];
            let n_up = k.div_ceil(2);
            let n_down = k / 2;
            let mut requests = Vec::with_capacity(k);
            for (direction, n, offer) in [(Direction::Up, n_up, ur), (Direction::Down, n_down, dr)]
            {
                for j in 1..=n {
                    let magnitude = offer * j as f64 / n as f64;
                    requests.push((
                        GssRequest {
                            direction,
                            magnitude,
                            issue_step: warm.step,
                            hold_steps,
                        },
                        offer,
                    ));
                }
            }
            requests
                .par_iter()
                .map(|(req, offer)| {
                    let outcome = runner.run_request(&warm, req)?;
                    let delivered = outcome.delivered.last().copied().unwrap_or(0.0);
                    let offset = outcome.autonomous_offset.last().copied().unwrap_or(0.0);
                    let rate = if delivered.abs() > 1e-9 {
                        -offset / delivered
                    } else {
                        0.0
                    };
                    Ok(ResponseRow {
                        level,
                        direction: req.direction,
                        request_kw: req.magnitude,
                        offer_kw: *offer,
                        delivered_kw: delivered,
                        autonomous_offset_kw: offset,
                        rate_per_unit: rate,
                        outcome,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_level.into_iter().flatten().collect())
}

/// Six decimals without a negative zero.
fn fixed6(x: f64) -> String {
    let s = format!("{x:.6}");
    if s.trim_start_matches('-')
        .bytes()
        .all(|b| b == b'0' || b == b'.')
    {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

pub fn write_response_csv<W: std::io::Write>(rows: &[ResponseRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "level",
        "direction",
        "request_kw",
        "offer_kw",
        "delivered_kw",
        "autonomous_offset_kw",
        "rate_per_unit",
        "outcome",
        "max_feasible_kw",
    ])?;
    for r in rows {
        let (outcome, max_feasible) = match r.outcome.status {
            OutcomeStatus::Fulfilled => ("fulfilled", String::new()),
            OutcomeStatus::Rejected { max_feasible_kw } => ("rejected", fixed6(max_feasible_kw)),
        };
        w.write_record([
            format!("{:.2}", r.level),
            r.direction.as_str().to_string(),
            fixed6(r.request_kw),
            fixed6(r.offer_kw),
            fixed6(r.delivered_kw),
            fixed6(r.autonomous_offset_kw),
            fixed6(r.rate_per_unit),
            outcome.to_string(),
            max_feasible,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offers_split_the_total() {
        assert_eq!(offer_bounds(40.0, 0.2), (8.0, 32.0));
        assert_eq!(offer_bounds(0.0, 0.2), (0.0, 0.0));
        assert_eq!(offer_bounds(10.0, 0.5), (5.0, 5.0));
    }

    #[test]
    fn default_grid() {
        let g = GssSettings::default();
        g.validate().unwrap();
        assert_eq!(g.levels.len(), 13);
        assert!((g.levels[0] - 0.4).abs() < 1e-12 && (g.levels[12] - 1.0).abs() < 1e-12);
        let per = g.requests_per_level();
        assert_eq!(per.iter().sum::<usize>(), 320);
        assert!(per.iter().all(|&n| n == 24 || n == 25));
    }

    #[test]
    fn delivery_target_follows_direction() {
        let up = GssRequest {
            direction: Direction::Up,
            magnitude: 3.0,
            issue_step: 0,
            hold_steps: 10,
        };
        assert_eq!(delivery_target(&up, 40.0), 43.0);
        let down = GssRequest {
            direction: Direction::Down,
            magnitude: 10.0,
            ..up
        };
        assert_eq!(delivery_target(&down, 40.0), 30.0);
    }

    #[test]
    fn invalid_settings_rejected() {
        let g = GssSettings {
            gamma: 1.0,
            ..GssSettings::default()
        };
        assert!(g.validate().is_err());
        let g = GssSettings {
            levels: vec![1.2],
            ..GssSettings::default()
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn autonomous_response_sums_changes() {
        let before = [(1.0, 0.0), (2.0, -1.0), (3.0, 0.0)];
        let after = [(1.5, 0.0), (9.0, -1.0), (2.0, 0.0)];
        assert_eq!(measure_autonomous_response(&before, &after, &[0, 2]), -0.5);
    }
}
