//! Full-day experiments: PV placement, fleet construction, the per-step
//! simulation pipeline and the performance metrics of each cell.

use std::collections::BTreeSet;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cic::{
    self, CicProblem, CicSettings, CicSolution, CicStatus, CoordinatedUnit, DispatchLimits,
};
use crate::config::ScenarioConfig;
use crate::error::{param, Result};
use crate::inverters::{
    autonomous_output, legacy_output, non_exporting_output, pu, reconnect_step, trip_step,
    trip_window_steps, update_droop, DroopSettings, InverterKind, InverterState, InverterUnit,
    PassiveView,
};
use crate::network::{NetworkModel, NOMINAL_VOLTAGE_V};
use crate::powerflow::{self, InjectionSet, LossFormula, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};
use crate::profiles::{
    allocate_households, load_ami_csv, load_day_at, reactive_demand, synth_pv_day, TimeSeries,
    BASE_PROFILE_COUNT, LOAD_POWER_FACTOR,
};
use crate::rng::{self, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Household {
    pub bus: usize,
    pub reduced: usize,
    pub profile: usize,
}

/// Exogenous inputs of one simulated day.
#[derive(Debug, Clone)]
pub struct DayInputs {
    pub households: Vec<Household>,
    pub loads: Vec<TimeSeries>,
    pub pv: TimeSeries,
}

impl DayInputs {
    pub fn build(
        config: &ScenarioConfig,
        network: &NetworkModel,
        base_dir: Option<&Path>,
    ) -> Result<Self> {
        let spec = config.profiles.day_spec();
        let step = config.profiles.step_seconds;
        let loads: Vec<TimeSeries> = match &config.profiles.ami_csv {
            Some(path) => {
                let path = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                load_ami_csv(path, step)?.into_values().collect()
            }
            None => (0..BASE_PROFILE_COUNT)
                .map(|i| load_day_at(&spec, i as u64, config.run.seed, step))
                .collect::<Result<_>>()?,
        };
        let buses = network.household_buses();
        if buses.is_empty() {
            return param("the network has no household buses");
        }
        let households = allocate_households(loads.len(), &buses)?
            .into_iter()
            .map(|(bus, profile)| Household {
                bus,
                reduced: network
                    .reduced_index(bus)
                    .expect("household is not the slack"),
                profile,
            })
            .collect();
        let pv = synth_pv_day(&spec, step)?;
        Ok(Self {
            households,
            loads,
            pv,
        })
    }

    pub fn steps(&self) -> usize {
        self.pv.len()
    }

    pub fn time(&self, step: usize) -> f64 {
        self.pv.time(step)
    }

    pub fn demand(&self, step: usize) -> Vec<f64> {
        let t = self.time(step);
        self.households
            .iter()
            .map(|h| self.loads[h.profile].at(t).max(0.0))
            .collect()
    }

    pub fn pv_available(&self, step: usize) -> f64 {
        self.pv.values[step].max(0.0)
    }
}

/// Household orderings from which PV sets are taken as prefixes, so larger
/// penetrations always contain the smaller ones. The first ordering is by
/// increasing electric distance, the last by decreasing distance, the rest
/// are seeded shuffles.
pub fn placement_orderings(network: &NetworkModel, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return param("at least one placement is required");
    }
    let households = network.household_buses();
    if households.is_empty() {
        return param("the network has no household buses");
    }
    let mut near = households.clone();
    near.sort_by(|&a, &b| {
        network
            .electric_distance(a)
            .total_cmp(&network.electric_distance(b))
            .then(a.cmp(&b))
    });
    let mut far = households.clone();
    far.sort_by(|&a, &b| {
        network
            .electric_distance(b)
            .total_cmp(&network.electric_distance(a))
            .then(a.cmp(&b))
    });
    let mut out = vec![near];
    if n >= 2 {
        for i in 1..n - 1 {
            let mut order = households.clone();
            order.shuffle(&mut rng::stream(seed, "placement", i as u64));
            out.push(order);
        }
        out.push(far);
    }
    Ok(out)
}

/// Number of PV systems for a penetration level.
pub fn penetration_count(households: usize, penetration: f64) -> Result<usize> {
    let x = penetration * households as f64;
    if !(penetration > 0.0 && penetration <= 1.0) || x < 1.0 - 1e-9 {
        return param(format!(
            "penetration {penetration} gives fewer than one PV system on {households} households"
        ));
    }
    Ok((x.round() as usize).clamp(1, households))
}

pub fn sample_placements(
    network: &NetworkModel,
    penetration: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let k = penetration_count(network.household_buses().len(), penetration)?;
    Ok(placement_orderings(network, n, seed)?
        .into_iter()
        .map(|o| o[..k].to_vec())
        .collect())
}

/// PV buses with their kinds: the base-case prefix split by the mix (fixed
/// per placement), then growth units of `growth_kind` up to `penetration`.
pub fn assign_kinds(
    ordering: &[usize],
    config: &ScenarioConfig,
    growth_kind: InverterKind,
    penetration: f64,
    placement: usize,
) -> Result<Vec<(usize, InverterKind)>> {
    let n = ordering.len();
    let n_base = penetration_count(n, config.fleet.base_penetration)?;
    let n_total = penetration_count(n, penetration)?.max(n_base);
    let counts = config.fleet.base_mix.counts(n_base);
    let mut kinds: Vec<InverterKind> = InverterKind::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&k, c)| std::iter::repeat_n(k, c))
        .collect();
    kinds.shuffle(&mut rng::stream(
        config.fleet.placement_seed,
        "mix",
        placement as u64,
    ));
    let mut out: Vec<(usize, InverterKind)> =
        ordering[..n_base].iter().copied().zip(kinds).collect();
    out.extend(ordering[n_base..n_total].iter().map(|&b| (b, growth_kind)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PvUnit {
    pub unit: InverterUnit,
    pub household: usize,
    pub reduced: usize,
    pub state: InverterState,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fleet {
    pub units: Vec<PvUnit>,
}

impl Fleet {
    pub fn new(
        assignments: &[(usize, InverterKind)],
        households: &[Household],
        s_rating: f64,
        p_ac_max: f64,
        window_len: usize,
    ) -> Result<Self> {
        let mut units = Vec::with_capacity(assignments.len());
        for &(bus, kind) in assignments {
            let Some(h) = households.iter().position(|h| h.bus == bus) else {
                return param(format!("bus {bus} is not a household"));
            };
            let unit = InverterUnit {
                node: bus,
                kind,
                s_rating,
                p_ac_max,
            };
            unit.validate()?;
            units.push(PvUnit {
                unit,
                household: h,
                reduced: households[h].reduced,
                state: InverterState::new(window_len),
            });
        }
        Ok(Self { units })
    }

    pub fn count(&self, kind: InverterKind) -> usize {
        self.units.iter().filter(|u| u.unit.kind == kind).count()
    }

    pub fn indices(&self, kind: InverterKind) -> Vec<usize> {
        (0..self.units.len())
            .filter(|&k| self.units[k].unit.kind == kind)
            .collect()
    }
}

/// How the coordinated fleet is dispatched in a step.
#[derive(Debug, Clone, PartialEq)]
pub enum CicMode {
    /// Maximum feasible output.
    Normal,
    /// Maximum feasible output, then re-optimized under the cap
    /// `Σ p_inj ≤ (1 - γ)·Σ p_inj_max`.
    Reserve { gamma: f64 },
    /// Aggregate output bounds with reactive setpoints held fixed.
    Dispatch {
        total_injection: (f64, f64),
        fixed_q: Vec<f64>,
    },
}

/// Metered state the controller sees, one step old.
#[derive(Debug, Clone, PartialEq)]
pub struct AmiSnapshot {
    /// Loads and passive PV per reduced bus, kW/kvar.
    pub net: InjectionSet,
    /// Per coordinated unit, in fleet order.
    pub p_av: Vec<f64>,
    pub p_demand: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub fleet: Fleet,
    /// Truth voltages per bus from the last solved step.
    pub voltages: Vec<Complex64>,
    pub ami: Option<AmiSnapshot>,
    pub rng: SimRng,
}

#[derive(Debug, Clone)]
pub struct StepInputs {
    /// Per household, kW.
    pub demand: Vec<f64>,
    /// Per unit, kW before the AC limit.
    pub pv: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    /// Per bus, per-unit.
    pub magnitudes: Vec<f64>,
    /// Per unit `(p_inj kW, q kvar)`.
    pub outputs: Vec<(f64, f64)>,
    pub p_av: Vec<f64>,
    pub instant_trips: Vec<usize>,
    pub average_trip: Option<usize>,
    pub reconnect: Option<usize>,
    pub cic: Option<CicSolution>,
    /// Uncapped coordinated total in reserve mode.
    pub cic_max_total: Option<f64>,
    pub losses_kw: f64,
    pub head: Complex64,
}

/// Runs steps for one network and fleet layout.
#[derive(Debug, Clone)]
pub struct Engine<'a> {
    pub network: &'a NetworkModel,
    pub households: &'a [Household],
    pub droop: DroopSettings,
    pub cic: CicSettings,
    pub dt_minutes: f64,
    pub min_offline_steps: usize,
    pub loss_formula: LossFormula,
    coordinated: Vec<usize>,
    passive: Vec<usize>,
    monitored: Vec<usize>,
}

impl<'a> Engine<'a> {
    pub fn new(
        network: &'a NetworkModel,
        households: &'a [Household],
        fleet: &Fleet,
        droop: DroopSettings,
        cic: CicSettings,
        step_seconds: f64,
        min_offline_steps: usize,
    ) -> Self {
        let coordinated = fleet.indices(InverterKind::Coordinated);
        let passive: Vec<usize> = (0..fleet.units.len())
            .filter(|&k| fleet.units[k].unit.kind.is_passive())
            .collect();
        let monitored: BTreeSet<usize> = fleet.units.iter().map(|u| u.reduced).collect();
        Self {
            network,
            households,
            droop,
            cic,
            dt_minutes: step_seconds / 60.0,
            min_offline_steps,
            loss_formula: LossFormula::default(),
            coordinated,
            passive,
            monitored: monitored.into_iter().collect(),
        }
    }

    pub fn coordinated(&self) -> &[usize] {
        &self.coordinated
    }

    pub fn passive(&self) -> &[usize] {
        &self.passive
    }

    /// Reduced-bus indices bounded by the controller.
    pub fn monitored(&self) -> &[usize] {
        &self.monitored
    }

    pub fn initial_state(&self, fleet: Fleet, rng: SimRng) -> SimState {
        SimState {
            fleet,
            voltages: vec![Complex64::new(1.0, 0.0); self.network.bus_count()],
            ami: None,
            rng,
        }
    }

    fn cic_problem(&self, snapshot: &AmiSnapshot, fleet: &Fleet) -> CicProblem<'a> {
        let units = self
            .coordinated
            .iter()
            .enumerate()
            .map(|(j, &k)| CoordinatedUnit {
                bus: fleet.units[k].reduced,
                p_av: snapshot.p_av[j],
                p_demand: snapshot.p_demand[j],
                s_rating: fleet.units[k].unit.s_rating,
            })
            .collect();
        CicProblem {
            network: self.network,
            net: snapshot.net.clone(),
            units,
            monitored: self.monitored.clone(),
            settings: self.cic.clone(),
            limits: DispatchLimits::default(),
        }
    }

    /// Solves the controller program for a snapshot. Returns the solution
    /// and, in reserve mode, the uncapped total.
    pub fn solve_cic(
        &self,
        snapshot: &AmiSnapshot,
        fleet: &Fleet,
        mode: &CicMode,
    ) -> Result<(CicSolution, Option<f64>)> {
        let mut problem = self.cic_problem(snapshot, fleet);
        let (tol, iters) = (self.cic.tolerance, self.cic.max_iter);
        match mode {
            CicMode::Normal => Ok((cic::solve(&cic::assemble(&problem)?, tol, iters), None)),
            CicMode::Reserve { gamma } => {
                let first = cic::solve(&cic::assemble(&problem)?, tol, iters);
                let max_total: f64 = first.p_inj.iter().sum();
                Ok((
                    crate::gss::reserve_setpoints(&problem, &first, *gamma)?,
                    Some(max_total),
                ))
            }
            CicMode::Dispatch {
                total_injection,
                fixed_q,
            } => {
                problem.limits.total_injection = Some(*total_injection);
                problem.limits.fixed_q = Some(fixed_q.clone());
                Ok((cic::solve(&cic::assemble(&problem)?, tol, iters), None))
            }
        }
    }

    /// One timestep: profiles, passive droop from last step's voltages,
    /// controller from last step's metering, AC power flow, protection.
    pub fn step(
        &self,
        state: &mut SimState,
        inputs: &StepInputs,
        mode: &CicMode,
    ) -> Result<StepRecord> {
        let n = self.network.reduced_buses().len();
        let units = &mut state.fleet.units;
        if inputs.pv.len() != units.len() || inputs.demand.len() != self.households.len() {
            return param("step inputs do not match the fleet or household count");
        }
        let p_av: Vec<f64> = units
            .iter()
            .zip(&inputs.pv)
            .map(|(u, &p)| p.clamp(0.0, u.unit.p_ac_max))
            .collect();

        let mut outputs = vec![(0.0, 0.0); units.len()];
        for &k in &self.passive {
            let u = &mut units[k];
            outputs[k] = match u.unit.kind {
                InverterKind::Legacy => legacy_output(&u.state, p_av[k]),
                InverterKind::Autonomous => {
                    if u.state.online {
                        let v = state.voltages[u.unit.node].norm();
                        update_droop(&mut u.state, v, &self.droop, self.dt_minutes)?;
                    }
                    autonomous_output(&u.state, p_av[k], &u.unit)
                }
                InverterKind::NonExporting => {
                    non_exporting_output(&u.state, p_av[k], inputs.demand[u.household])
                }
                InverterKind::Coordinated => unreachable!("coordinated units are not passive"),
            };
        }

        let mut base = InjectionSet::zeros(n);
        for (h, hh) in self.households.iter().enumerate() {
            base.p[hh.reduced] -= inputs.demand[h];
            base.q[hh.reduced] -= reactive_demand(inputs.demand[h], LOAD_POWER_FACTOR);
        }
        for &k in &self.passive {
            base.p[units[k].reduced] += outputs[k].0;
            base.q[units[k].reduced] += outputs[k].1;
        }
        let now = AmiSnapshot {
            net: base.clone(),
            p_av: self.coordinated.iter().map(|&k| p_av[k]).collect(),
            p_demand: self
                .coordinated
                .iter()
                .map(|&k| inputs.demand[units[k].household])
                .collect(),
        };

        let mut injections = base;
        let mut cic_solution = None;
        let mut cic_max_total = None;
        if !self.coordinated.is_empty() {
            let snapshot = state.ami.as_ref().unwrap_or(&now);
            let (sol, max_total) = self.solve_cic(snapshot, &state.fleet, mode)?;
            let units = &state.fleet.units;
            for (j, &k) in self.coordinated.iter().enumerate() {
                let s = units[k].unit.s_rating;
                let q = sol.q[j];
                let headroom = (s * s - q * q).max(0.0).sqrt();
                // an uncurtailed inverter tracks its present maximum power
                let p = if sol.curtail[j] <= 1e-9 {
                    p_av[k]
                } else {
                    sol.p_inj[j].min(p_av[k])
                };
                outputs[k] = (p.min(headroom), q);
                injections.p[units[k].reduced] += outputs[k].0;
                injections.q[units[k].reduced] += q;
            }
            cic_solution = Some(sol);
            cic_max_total = max_total;
        }

        let pf = powerflow::solve_ac_from(
            self.network,
            &injections,
            &state.voltages,
            DEFAULT_TOLERANCE,
            DEFAULT_MAX_ITER,
        )?
        .into_result()?;
        let magnitudes: Vec<f64> = pf.v.iter().map(|v| v.norm()).collect();

        let local: Vec<f64> = self
            .passive
            .iter()
            .map(|&k| magnitudes[state.fleet.units[k].unit.node])
            .collect();
        let mut views: Vec<PassiveView<'_>> = state
            .fleet
            .units
            .iter_mut()
            .filter(|u| u.unit.kind.is_passive())
            .map(|u| PassiveView {
                kind: u.unit.kind,
                state: &mut u.state,
            })
            .collect();
        let events = trip_step(&mut views, &local, &self.droop, &mut state.rng);
        let reconnect = reconnect_step(
            &mut views,
            &local,
            &self.droop,
            self.min_offline_steps,
            &mut state.rng,
        );
        drop(views);

        let losses_kw = powerflow::line_losses_with(self.network, &pf.v, self.loss_formula);
        let head = powerflow::slack_power(self.network, &pf.v);
        state.voltages = pf.v;
        state.ami = Some(now);
        Ok(StepRecord {
            magnitudes,
            outputs,
            p_av,
            instant_trips: events.instant.iter().map(|&i| self.passive[i]).collect(),
            average_trip: events.average.map(|i| self.passive[i]),
            reconnect: reconnect.map(|i| self.passive[i]),
            cic: cic_solution,
            cic_max_total,
            losses_kw,
            head,
        })
    }
}

fn kind_index(kind: InverterKind) -> usize {
    InverterKind::ALL
        .iter()
        .position(|&k| k == kind)
        .expect("kind listed")
}

/// Per-kind values in `InverterKind::ALL` order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ByKind {
    pub legacy: f64,
    pub autonomous: f64,
    pub non_exporting: f64,
    pub coordinated: f64,
}

impl ByKind {
    fn from_array(a: [f64; 4]) -> Self {
        Self {
            legacy: a[0],
            autonomous: a[1],
            non_exporting: a[2],
            coordinated: a[3],
        }
    }

    pub fn get(&self, kind: InverterKind) -> f64 {
        match kind {
            InverterKind::Legacy => self.legacy,
            InverterKind::Autonomous => self.autonomous,
            InverterKind::NonExporting => self.non_exporting,
            InverterKind::Coordinated => self.coordinated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub customers_overvoltage: usize,
    pub customers_overvoltage_pv: usize,
    pub customers_overvoltage_non_pv: usize,
    pub overvoltage_duration_min: f64,
    pub max_voltage_v: f64,
    pub max_step_voltage_delta_v: f64,
    pub max_voltage_spread_v: f64,
    pub pv_utilization: f64,
    pub disconnections: ByKind,
    pub disconnections_per_inverter: ByKind,
    pub curtailment_kwh: ByKind,
    pub total_line_losses_kwh: f64,
    pub head_reactive_demand_kvarh: f64,
    pub pv_available_kwh: f64,
    pub pv_injected_kwh: f64,
    pub cic_not_converged_steps: usize,
    pub cic_infeasible_steps: usize,
}

/// Accumulates the day metrics step by step.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    threshold_pu: f64,
    step_hours: f64,
    customers: Vec<usize>,
    pv_buses: BTreeSet<usize>,
    kinds: Vec<InverterKind>,
    over: BTreeSet<usize>,
    over_steps: usize,
    max_v: f64,
    max_delta: f64,
    max_spread: f64,
    prev: Option<Vec<f64>>,
    pv_av: f64,
    pv_inj: f64,
    trips: [f64; 4],
    curtail: [f64; 4],
    losses: f64,
    head_q: f64,
    cic_not_converged: usize,
    cic_infeasible: usize,
}

impl MetricsAccumulator {
    pub fn new(network: &NetworkModel, fleet: &Fleet, threshold_v: f64, step_seconds: f64) -> Self {
        Self {
            threshold_pu: threshold_v / NOMINAL_VOLTAGE_V,
            step_hours: step_seconds / 3600.0,
            customers: network.household_buses(),
            pv_buses: fleet.units.iter().map(|u| u.unit.node).collect(),
            kinds: fleet.units.iter().map(|u| u.unit.kind).collect(),
            over: BTreeSet::new(),
            over_steps: 0,
            max_v: 0.0,
            max_delta: 0.0,
            max_spread: 0.0,
            prev: None,
            pv_av: 0.0,
            pv_inj: 0.0,
            trips: [0.0; 4],
            curtail: [0.0; 4],
            losses: 0.0,
            head_q: 0.0,
            cic_not_converged: 0,
            cic_infeasible: 0,
        }
    }

    pub fn record(&mut self, rec: &StepRecord) {
        let v: Vec<f64> = self.customers.iter().map(|&b| rec.magnitudes[b]).collect();
        let mut any_over = false;
        for (&b, &m) in self.customers.iter().zip(&v) {
            if m > self.threshold_pu {
                self.over.insert(b);
                any_over = true;
            }
        }
        if any_over {
            self.over_steps += 1;
        }
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        self.max_v = self.max_v.max(hi);
        self.max_spread = self.max_spread.max(hi - lo);
        if let Some(prev) = &self.prev {
            let d = v
                .iter()
                .zip(prev)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            self.max_delta = self.max_delta.max(d);
        }
        self.prev = Some(v);
        for (k, (&(p, _), &av)) in rec.outputs.iter().zip(&rec.p_av).enumerate() {
            let i = kind_index(self.kinds[k]);
            self.pv_av += av * self.step_hours;
            self.pv_inj += p * self.step_hours;
            self.curtail[i] += (av - p).max(0.0) * self.step_hours;
        }
        for &k in rec.instant_trips.iter().chain(rec.average_trip.iter()) {
            self.trips[kind_index(self.kinds[k])] += 1.0;
        }
        self.losses += rec.losses_kw * self.step_hours;
        self.head_q += rec.head.im * self.step_hours;
        if let Some(sol) = &rec.cic {
            match sol.status {
                CicStatus::NotConverged => self.cic_not_converged += 1,
                CicStatus::Infeasible => self.cic_infeasible += 1,
                CicStatus::Optimal => {}
            }
        }
    }

    pub fn finish(&self) -> MetricsReport {
        let volts = NOMINAL_VOLTAGE_V;
        let pv_over = self
            .over
            .iter()
            .filter(|b| self.pv_buses.contains(b))
            .count();
        let mut per_unit = [0.0; 4];
        for (i, kind) in InverterKind::ALL.iter().enumerate() {
            let n = self.kinds.iter().filter(|k| *k == kind).count();
            per_unit[i] = if n > 0 { self.trips[i] / n as f64 } else { 0.0 };
        }
        MetricsReport {
            customers_overvoltage: self.over.len(),
            customers_overvoltage_pv: pv_over,
            customers_overvoltage_non_pv: self.over.len() - pv_over,
            overvoltage_duration_min: self.over_steps as f64 * self.step_hours * 60.0,
            max_voltage_v: self.max_v * volts,
            max_step_voltage_delta_v: self.max_delta * volts,
            max_voltage_spread_v: self.max_spread * volts,
            pv_utilization: if self.pv_av > 0.0 {
                (self.pv_inj / self.pv_av).min(1.0)
            } else {
                1.0
            },
            disconnections: ByKind::from_array(self.trips),
            disconnections_per_inverter: ByKind::from_array(per_unit),
            curtailment_kwh: ByKind::from_array(self.curtail),
            total_line_losses_kwh: self.losses,
            head_reactive_demand_kvarh: self.head_q,
            pv_available_kwh: self.pv_av,
            pv_injected_kwh: self.pv_inj,
            cic_not_converged_steps: self.cic_not_converged,
            cic_infeasible_steps: self.cic_infeasible,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub growth_kind: InverterKind,
    pub penetration: f64,
    pub placement: usize,
}

impl CellKey {
    fn stream_index(&self) -> u64 {
        let pen = (self.penetration * 1000.0).round() as u64;
        (self.placement as u64) << 24 | pen << 4 | kind_index(self.growth_kind) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub time_s: f64,
    pub v_max_v: f64,
    pub v_min_v: f64,
    pub p_av_kw: f64,
    pub p_inj_kw: f64,
    pub q_kvar: f64,
    pub losses_kw: f64,
    pub head_p_kw: f64,
    pub head_q_kvar: f64,
    pub online: usize,
    pub instant_trips: usize,
    pub average_trips: usize,
    pub reconnects: usize,
    pub cic_status: Option<CicStatus>,
    pub cic_objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointDump {
    pub bus: usize,
    pub p_av_kw: f64,
    pub p_inj_kw: f64,
    pub q_kvar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageDump {
    pub bus: usize,
    pub predicted_v: f64,
    pub truth_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CicDumpRow {
    pub step: usize,
    pub time_s: f64,
    pub status: CicStatus,
    pub iterations: usize,
    pub phi: f64,
    pub rho: f64,
    pub kappa: f64,
    pub nu: f64,
    pub objective: f64,
    pub setpoints: Vec<SetpointDump>,
    pub voltages: Vec<VoltageDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub metrics: MetricsReport,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
    #[serde(skip)]
    pub cic_dump: Vec<CicDumpRow>,
}

/// A network, its day inputs and placement orderings, shared by all cells.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ScenarioConfig,
    pub network: NetworkModel,
    pub inputs: DayInputs,
    pub orderings: Vec<Vec<usize>>,
}

impl Experiment {
    pub fn new(config: ScenarioConfig, base_dir: Option<&Path>) -> Result<Self> {
        let network = config.network.build(base_dir)?;
        Self::with_network(config, network, base_dir)
    }

    pub fn with_network(
        config: ScenarioConfig,
        network: NetworkModel,
        base_dir: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        let inputs = DayInputs::build(&config, &network, base_dir)?;
        let orderings = placement_orderings(
            &network,
            config.fleet.n_placements,
            config.fleet.placement_seed,
        )?;
        Ok(Self {
            config,
            network,
            inputs,
            orderings,
        })
    }

    pub fn step_inputs(&self, step: usize, fleet: &Fleet) -> StepInputs {
        let pv = self.inputs.pv_available(step);
        StepInputs {
            demand: self.inputs.demand(step),
            pv: vec![pv; fleet.units.len()],
        }
    }

    pub fn fleet(&self, key: &CellKey) -> Result<Fleet> {
        let Some(ordering) = self.orderings.get(key.placement) else {
            return param(format!("placement {} out of range", key.placement));
        };
        let assignments = assign_kinds(
            ordering,
            &self.config,
            key.growth_kind,
            key.penetration,
            key.placement,
        )?;
        let f = &self.config.fleet;
        Fleet::new(
            &assignments,
            &self.inputs.households,
            f.s_rating_kva,
            f.p_ac_max_kw,
            trip_window_steps(self.config.profiles.step_seconds),
        )
    }

    pub fn engine<'a>(&'a self, fleet: &Fleet) -> Engine<'a> {
        let mut engine = Engine::new(
            &self.network,
            &self.inputs.households,
            fleet,
            self.config.droop.clone(),
            self.config.cic.clone(),
            self.config.profiles.step_seconds,
            self.config.min_offline_steps(),
        );
        engine.loss_formula = self.config.run.loss_formula;
        engine
    }

    /// Simulates the day for a fleet, handing every step to `observe`.
    pub fn simulate_day<F>(&self, fleet: Fleet, rng: SimRng, mut observe: F) -> Result<()>
    where
        F: FnMut(usize, &StepRecord, &SimState) -> Result<()>,
    {
        let engine = self.engine(&fleet);
        let mut state = engine.initial_state(fleet, rng);
        for step in 0..self.inputs.steps() {
            let inputs = self.step_inputs(step, &state.fleet);
            let rec = engine.step(&mut state, &inputs, &CicMode::Normal)?;
            observe(step, &rec, &state)?;
        }
        Ok(())
    }

    pub fn cell_rng(&self, key: &CellKey) -> SimRng {
        rng::stream(self.config.run.seed, "protection", key.stream_index())
    }

    pub fn run_cell(&self, key: CellKey, traces: bool, dump: bool) -> Result<CellResult> {
        let fleet = self.fleet(&key)?;
        let step_s = self.config.profiles.step_seconds;
        let mut acc = MetricsAccumulator::new(
            &self.network,
            &fleet,
            self.config.run.overvoltage_threshold_v,
            step_s,
        );
        let monitored_buses: Vec<usize> = {
            let engine = self.engine(&fleet);
            engine
                .monitored()
                .iter()
                .map(|&r| self.network.reduced_buses()[r])
                .collect()
        };
        let mut trace = Vec::new();
        let mut cic_dump = Vec::new();
        self.simulate_day(fleet, self.cell_rng(&key), |step, rec, state| {
            acc.record(rec);
            let time_s = self.inputs.time(step);
            if traces {
                let hh = self.network.household_buses();
                let v: Vec<f64> = hh
                    .iter()
                    .map(|&b| rec.magnitudes[b] * NOMINAL_VOLTAGE_V)
                    .collect();
                trace.push(TraceRow {
                    step,
                    time_s,
                    v_max_v: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    v_min_v: v.iter().copied().fold(f64::INFINITY, f64::min),
                    p_av_kw: rec.p_av.iter().sum(),
                    p_inj_kw: rec.outputs.iter().map(|o| o.0).sum(),
                    q_kvar: rec.outputs.iter().map(|o| o.1).sum(),
                    losses_kw: rec.losses_kw,
                    head_p_kw: rec.head.re,
                    head_q_kvar: rec.head.im,
                    online: state.fleet.units.iter().filter(|u| u.state.online).count(),
                    instant_trips: rec.instant_trips.len(),
                    average_trips: rec.average_trip.iter().count(),
                    reconnects: rec.reconnect.iter().count(),
                    cic_status: rec.cic.as_ref().map(|s| s.status),
                    cic_objective: rec.cic.as_ref().map(|s| s.objective),
                });
            }
            if dump {
                if let Some(sol) = &rec.cic {
                    let coordinated = state.fleet.indices(InverterKind::Coordinated);
                    cic_dump.push(CicDumpRow {
                        step,
                        time_s,
                        status: sol.status,
                        iterations: sol.iterations,
                        phi: sol.phi,
                        rho: sol.rho,
                        kappa: sol.kappa,
                        nu: sol.nu,
                        objective: sol.objective,
                        setpoints: coordinated
                            .iter()
                            .map(|&k| SetpointDump {
                                bus: state.fleet.units[k].unit.node,
                                p_av_kw: rec.p_av[k],
                                p_inj_kw: rec.outputs[k].0,
                                q_kvar: rec.outputs[k].1,
                            })
                            .collect(),
                        voltages: monitored_buses
                            .iter()
                            .map(|&b| {
                                let r = self
                                    .network
                                    .reduced_index(b)
                                    .expect("monitored bus is reduced");
                                VoltageDump {
                                    bus: b,
                                    predicted_v: Complex64::new(
                                        sol.predicted_re[r],
                                        sol.predicted_im[r],
                                    )
                                    .norm()
                                        * NOMINAL_VOLTAGE_V,
                                    truth_v: rec.magnitudes[b] * NOMINAL_VOLTAGE_V,
                                }
                            })
                            .collect(),
                    });
                }
            }
            Ok(())
        })?;
        Ok(CellResult {
            key,
            metrics: acc.finish(),
            trace,
            cic_dump,
        })
    }

    /// Cells for the given growth kinds over the configured penetrations
    /// and placements.
    pub fn cells(&self, kinds: &[InverterKind]) -> Vec<CellKey> {
        let placements: Vec<usize> = self
            .config
            .run
            .placements
            .clone()
            .unwrap_or_else(|| (0..self.config.fleet.n_placements).collect());
        let mut out = Vec::new();
        for &growth_kind in kinds {
            for &penetration in &self.config.fleet.penetration_steps {
                for &placement in &placements {
                    out.push(CellKey {
                        growth_kind,
                        penetration,
                        placement,
                    });
                }
            }
        }
        out
    }

    /// Runs cells in parallel on the current rayon pool; results keep the
    /// order of `keys`.
    pub fn run_cells(&self, keys: &[CellKey]) -> Result<Vec<CellResult>> {
        let (traces, dump) = (self.config.run.traces, self.config.run.cic_dump);
        keys.par_iter()
            .map(|&k| self.run_cell(k, traces, dump))
            .collect()
    }
}

/// Every (penetration, placement) cell of the configured growth kind.
pub fn run_scenario(config: &ScenarioConfig) -> Result<Vec<CellResult>> {
    let exp = Experiment::new(config.clone(), None)?;
    let keys = exp.cells(&[config.fleet.growth_kind]);
    exp.run_cells(&keys)
}

/// Per-unit voltage threshold used by the metrics for a volt value.
pub fn threshold_pu(volts: f64) -> f64 {
    pu(volts)
}
