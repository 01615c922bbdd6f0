//! Inverter output models, droop curves with first-order filters, and the
//! passive-fleet trip/reconnect protocol.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::network::NOMINAL_VOLTAGE_V;
use crate::rng::weighted_pick;

/// Volts to per-unit on the 230 V base.
pub fn pu(volts: f64) -> f64 {
    volts / NOMINAL_VOLTAGE_V
}

/// Droop and protection setpoints. Voltages in per-unit, time constants in
/// minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DroopSettings {
    pub v_db: f64,
    pub v_qmin: f64,
    pub v_max_a: f64,
    pub v_max_l: f64,
    pub v_trip: f64,
    pub q_min_pu: f64,
    pub p_min_pu: f64,
    pub tau_v: f64,
    pub tau_w: f64,
}

impl Default for DroopSettings {
    fn default() -> Self {
        Self {
            v_db: pu(248.0),
            v_qmin: pu(253.0),
            v_max_a: pu(265.0),
            v_max_l: pu(260.0),
            v_trip: pu(257.0),
            q_min_pu: 0.44,
            p_min_pu: 0.2,
            tau_v: 1.5,
            tau_w: 3.5,
        }
    }
}

impl DroopSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_db < self.v_qmin
            && self.v_qmin < self.v_trip
            && self.v_trip < self.v_max_l
            && self.v_max_l <= self.v_max_a)
        {
            return param(
                "droop voltages must satisfy v_db < v_qmin < v_trip < v_max_l <= v_max_a",
            );
        }
        if !(self.q_min_pu > 0.0 && self.q_min_pu < 1.0) {
            return param("q_min_pu must lie in (0,1)");
        }
        if !(self.p_min_pu >= 0.0 && self.p_min_pu < 1.0) {
            return param("p_min_pu must lie in [0,1)");
        }
        if !(self.tau_v > 0.0 && self.tau_w > 0.0) {
            return param("filter time constants must be positive");
        }
        Ok(())
    }

    /// Instantaneous disconnection voltage for an inverter kind.
    pub fn v_max(&self, kind: InverterKind) -> f64 {
        match kind {
            InverterKind::Autonomous => self.v_max_a,
            _ => self.v_max_l,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverterKind {
    Legacy,
    Autonomous,
    NonExporting,
    Coordinated,
}

impl InverterKind {
    pub const ALL: [InverterKind; 4] = [
        InverterKind::Legacy,
        InverterKind::Autonomous,
        InverterKind::NonExporting,
        InverterKind::Coordinated,
    ];

    pub fn is_passive(self) -> bool {
        self != InverterKind::Coordinated
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InverterKind::Legacy => "legacy",
            InverterKind::Autonomous => "autonomous",
            InverterKind::NonExporting => "non_exporting",
            InverterKind::Coordinated => "coordinated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverterUnit {
    pub node: usize,
    pub kind: InverterKind,
    /// Apparent power rating, kVA.
    pub s_rating: f64,
    /// AC output limit, kW.
    pub p_ac_max: f64,
}

impl InverterUnit {
    pub fn new(node: usize, kind: InverterKind) -> Self {
        Self {
            node,
            kind,
            s_rating: 6.0,
            p_ac_max: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_rating > 0.0 && self.p_ac_max > 0.0 && self.p_ac_max <= self.s_rating) {
            return param(format!(
                "inverter at node {}: need 0 < p_ac_max <= s_rating",
                self.node
            ));
        }
        Ok(())
    }
}

/// Per-step dynamic state of one inverter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverterState {
    pub online: bool,
    pub q_pu_filtered: f64,
    pub p_pu_filtered: f64,
    pub voltage_window: VecDeque<f64>,
    pub window_len: usize,
    pub periods_offline: usize,
}

impl InverterState {
    pub fn new(window_len: usize) -> Self {
        Self {
            online: true,
            q_pu_filtered: 0.0,
            p_pu_filtered: 1.0,
            voltage_window: VecDeque::with_capacity(window_len.max(1)),
            window_len: window_len.max(1),
            periods_offline: 0,
        }
    }

    pub fn u(&self) -> f64 {
        if self.online {
            1.0
        } else {
            0.0
        }
    }

    pub fn push_voltage(&mut self, v: f64) {
        if self.voltage_window.len() == self.window_len {
            self.voltage_window.pop_front();
        }
        self.voltage_window.push_back(v);
    }

    pub fn rolling_average(&self) -> f64 {
        if self.voltage_window.is_empty() {
            return 0.0;
        }
        self.voltage_window.iter().sum::<f64>() / self.voltage_window.len() as f64
    }

    pub fn latest_voltage(&self) -> f64 {
        self.voltage_window.back().copied().unwrap_or(1.0)
    }

    fn reset_filters(&mut self) {
        self.q_pu_filtered = 0.0;
        self.p_pu_filtered = 1.0;
    }
}

/// Rolling-average window length in steps for a 10-minute window.
pub fn trip_window_steps(step_seconds: f64) -> usize {
    (600.0 / step_seconds).ceil().max(1.0) as usize
}

/// Volt/VAr target in per-unit of S (non-positive: absorption).
pub fn volt_var_target(v: f64, s: &DroopSettings) -> f64 {
    if v <= s.v_db {
        0.0
    } else if v >= s.v_qmin {
        -s.q_min_pu
    } else {
        let slope = -s.q_min_pu / (s.v_qmin - s.v_db);
        // point-slope through (v_qmin, -q_min_pu)
        slope * (v - s.v_qmin) - s.q_min_pu
    }
}

/// Volt/Watt target as a fraction of available power.
pub fn volt_watt_target(v: f64, s: &DroopSettings) -> f64 {
    if v <= s.v_qmin {
        return 1.0;
    }
    let slope = (s.p_min_pu - 1.0) / (s.v_max_a - s.v_qmin);
    (1.0 + slope * (v - s.v_qmin)).max(s.p_min_pu)
}

/// First-order low-pass update.
pub fn apply_filter(prev: f64, target: f64, dt_minutes: f64, tau_minutes: f64) -> Result<f64> {
    if !(dt_minutes > 0.0) || dt_minutes > tau_minutes {
        return param(format!(
            "filter needs 0 < dt <= tau, got dt={dt_minutes} tau={tau_minutes}"
        ));
    }
    let a = dt_minutes / tau_minutes;
    Ok((1.0 - a) * prev + a * target)
}

/// Advances the droop filters of an autonomous inverter from the local
/// voltage seen at the previous step.
pub fn update_droop(
    state: &mut InverterState,
    v_prev: f64,
    settings: &DroopSettings,
    dt_minutes: f64,
) -> Result<()> {
    let q_target = volt_var_target(v_prev, settings);
    // reactive priority: the Volt/Watt curve is flat at 1 below v_qmin
    let p_target = volt_watt_target(v_prev, settings);
    state.q_pu_filtered = apply_filter(state.q_pu_filtered, q_target, dt_minutes, settings.tau_v)?;
    state.p_pu_filtered = apply_filter(state.p_pu_filtered, p_target, dt_minutes, settings.tau_w)?;
    Ok(())
}

/// `(p_inj kW, q kvar)` of an autonomous inverter from its filtered state.
pub fn autonomous_output(state: &InverterState, p_av: f64, unit: &InverterUnit) -> (f64, f64) {
    let u = state.u();
    if u == 0.0 {
        return (0.0, 0.0);
    }
    let s = unit.s_rating;
    let q = s * state.q_pu_filtered;
    let headroom = (s * s - q * q).max(0.0).sqrt();
    let p = headroom
        .min(p_av.max(0.0) * state.p_pu_filtered)
        .min(unit.p_ac_max);
    (p, q)
}

pub fn legacy_output(state: &InverterState, p_av: f64) -> (f64, f64) {
    (p_av.max(0.0) * state.u(), 0.0)
}

pub fn non_exporting_output(state: &InverterState, p_av: f64, p_demand: f64) -> (f64, f64) {
    (p_av.max(0.0).min(p_demand.max(0.0)) * state.u(), 0.0)
}

/// One passive inverter as seen by the protection logic.
#[derive(Debug)]
pub struct PassiveView<'a> {
    pub kind: InverterKind,
    pub state: &'a mut InverterState,
}

/// Outcome of a protection step, as indices into the passive slice.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripEvents {
    pub instant: Vec<usize>,
    pub average: Option<usize>,
}

/// Applies the disconnection rules. `voltages[i]` is the present local
/// voltage of inverter `i`; it is appended to the inverter's window first.
pub fn trip_step<R: Rng + ?Sized>(
    fleet: &mut [PassiveView<'_>],
    voltages: &[f64],
    settings: &DroopSettings,
    rng: &mut R,
) -> TripEvents {
    assert_eq!(
        fleet.len(),
        voltages.len(),
        "one voltage per passive inverter"
    );
    for (inv, &v) in fleet.iter_mut().zip(voltages) {
        inv.state.push_voltage(v);
    }
    let mut events = TripEvents::default();
    for (i, (inv, &v)) in fleet.iter_mut().zip(voltages).enumerate() {
        if inv.state.online && v > settings.v_max(inv.kind) {
            inv.state.online = false;
            inv.state.periods_offline = 0;
            events.instant.push(i);
        }
    }
    let mut candidates = Vec::new();
    let mut weights = Vec::new();
    for (i, inv) in fleet.iter().enumerate() {
        let avg = inv.state.rolling_average();
        if inv.state.online && avg > settings.v_trip {
            candidates.push(i);
            weights.push(trip_weight(avg, settings.v_max(inv.kind)));
        }
    }
    if let Some(k) = weighted_pick(rng, &weights) {
        let i = candidates[k];
        fleet[i].state.online = false;
        fleet[i].state.periods_offline = 0;
        events.average = Some(i);
    }
    events
}

/// Sampling weight `(v_max - v)^-2` for average-voltage disconnection.
pub fn trip_weight(v: f64, v_max: f64) -> f64 {
    (v_max - v).max(1e-9).powi(-2)
}

/// Sampling weight `(v - v_nom)^-2` for reconnection.
pub fn reconnect_weight(v: f64) -> f64 {
    (v - 1.0).abs().max(1e-9).powi(-2)
}

/// Reconnects at most one eligible offline inverter. Offline counters of
/// all other offline inverters advance by one period. Returns the index of
/// the reconnected inverter.
pub fn reconnect_step<R: Rng + ?Sized>(
    fleet: &mut [PassiveView<'_>],
    voltages: &[f64],
    settings: &DroopSettings,
    min_offline_periods: usize,
    rng: &mut R,
) -> Option<usize> {
    assert_eq!(
        fleet.len(),
        voltages.len(),
        "one voltage per passive inverter"
    );
    let mut candidates = Vec::new();
    let mut weights = Vec::new();
    for (i, (inv, &v)) in fleet.iter().zip(voltages).enumerate() {
        if !inv.state.online
            && inv.state.periods_offline >= min_offline_periods
            && v < settings.v_trip
        {
            candidates.push(i);
            weights.push(reconnect_weight(v));
        }
    }
    let chosen = weighted_pick(rng, &weights).map(|k| candidates[k]);
    for (i, inv) in fleet.iter_mut().enumerate() {
        if Some(i) == chosen {
            inv.state.online = true;
            inv.state.periods_offline = 0;
            inv.state.reset_filters();
        } else if !inv.state.online {
            inv.state.periods_offline += 1;
        }
    }
    chosen
}
