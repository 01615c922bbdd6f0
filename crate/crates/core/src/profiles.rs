//! Household load and PV availability time series.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::rng;

pub const KNOT_STEP_S: f64 = 1800.0;
pub const DAY_START_S: f64 = 8.0 * 3600.0;
pub const DAY_END_S: f64 = 19.5 * 3600.0;
pub const LOAD_POWER_FACTOR: f64 = 0.95;
pub const BASE_PROFILE_COUNT: usize = 30;
const INVERTER_AC_LIMIT_KW: f64 = 5.0;
/// Share of the load variance carried by the deterministic diurnal shape;
/// the remainder is multiplicative noise.
const SHAPE_VARIANCE_SHARE: f64 = 0.3;

/// A uniformly sampled series. `start` is seconds after midnight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub start: f64,
    pub step: f64,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(start: f64, step: f64, values: Vec<f64>) -> Result<Self> {
        if !(step > 0.0) {
            return param("time series step must be positive");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return param("time series values must be finite");
        }
        Ok(Self {
            start,
            step,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    /// Sample at time `t`, holding the nearest earlier sample and clamping at
    /// the ends.
    pub fn at(&self, t: f64) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let k = ((t - self.start) / self.step + 1e-9).floor();
        let k = k.clamp(0.0, (self.values.len() - 1) as f64) as usize;
        self.values[k]
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Season {
    #[default]
    Summer,
    Winter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DayProfileSpec {
    pub season: Season,
    pub mean_load_kw: f64,
    pub std_load_kw: f64,
    pub pv_peak_kw: f64,
    pub window_start_s: f64,
    pub window_end_s: f64,
}

impl Default for DayProfileSpec {
    fn default() -> Self {
        Self::summer()
    }
}

impl DayProfileSpec {
    pub fn summer() -> Self {
        Self {
            season: Season::Summer,
            mean_load_kw: 0.77,
            std_load_kw: 0.27,
            pv_peak_kw: 5.0,
            window_start_s: DAY_START_S,
            window_end_s: DAY_END_S,
        }
    }

    pub fn winter() -> Self {
        Self {
            season: Season::Winter,
            mean_load_kw: 0.83,
            std_load_kw: 0.53,
            pv_peak_kw: 3.5,
            ..Self::summer()
        }
    }

    pub fn for_season(season: Season) -> Self {
        match season {
            Season::Summer => Self::summer(),
            Season::Winter => Self::winter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pv_peak_kw >= 0.0 && self.pv_peak_kw <= INVERTER_AC_LIMIT_KW) {
            return param(format!(
                "pv_peak_kw must lie in [0, {INVERTER_AC_LIMIT_KW}], got {}",
                self.pv_peak_kw
            ));
        }
        if !(self.mean_load_kw >= 0.0 && self.std_load_kw >= 0.0) {
            return param("load mean and std must be non-negative");
        }
        if self.window_start_s < DAY_START_S - 1e-9
            || self.window_end_s > DAY_END_S + 1e-9
            || self.window_end_s - self.window_start_s < 3.0 * KNOT_STEP_S
        {
            return param(
                "daylight window must lie within 08:00-19:30 and span at least 4 half-hour knots",
            );
        }
        Ok(())
    }
}

/// Natural cubic spline through the samples of `series`, evaluated every
/// `target_step` seconds. Negative interpolants are clamped to zero.
pub fn upsample_spline(series: &TimeSeries, target_step: f64) -> Result<TimeSeries> {
    let n = series.values.len();
    if n < 4 {
        return param(format!(
            "spline upsampling needs at least 4 samples, got {n}"
        ));
    }
    let ratio = series.step / target_step;
    if !(target_step > 0.0) || (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
        return param(format!(
            "target step {target_step} s must divide the input step {} s",
            series.step
        ));
    }
    let ratio = ratio.round() as usize;
    let y = &series.values;
    let h = series.step;

    // second derivatives; natural boundary m[0] = m[n-1] = 0
    let mut m = vec![0.0; n];
    let inner = n - 2;
    let mut diag = vec![4.0 * h; inner];
    let mut rhs: Vec<f64> = (1..n - 1)
        .map(|i| 6.0 * (y[i + 1] - 2.0 * y[i] + y[i - 1]) / h)
        .collect();
    for i in 1..inner {
        let w = h / diag[i - 1];
        diag[i] -= w * h;
        rhs[i] -= w * rhs[i - 1];
    }
    for i in (0..inner).rev() {
        let next = if i + 1 < inner { m[i + 2] } else { 0.0 };
        m[i + 1] = (rhs[i] - h * next) / diag[i];
    }

    let mut out = Vec::with_capacity((n - 1) * ratio + 1);
    for seg in 0..n - 1 {
        for k in 0..ratio {
            if k == 0 {
                out.push(y[seg].max(0.0));
                continue;
            }
            let a = (ratio - k) as f64 / ratio as f64;
            let b = k as f64 / ratio as f64;
            let v = a * y[seg]
                + b * y[seg + 1]
                + ((a * a * a - a) * m[seg] + (b * b * b - b) * m[seg + 1]) * h * h / 6.0;
            out.push(v.max(0.0));
        }
    }
    out.push(y[n - 1].max(0.0));
    TimeSeries::new(series.start, target_step, out)
}

fn knot_count(spec: &DayProfileSpec) -> usize {
    ((spec.window_end_s - spec.window_start_s) / KNOT_STEP_S).round() as usize + 1
}

/// Half-hourly load for one household: a midday-trough diurnal shape times
/// lognormal noise, scaled so pooled statistics match the configured mean and std.
pub fn synth_load_day(
    spec: &DayProfileSpec,
    household_index: u64,
    seed: u64,
) -> Result<TimeSeries> {
    spec.validate()?;
    let k = knot_count(spec);
    let mean = spec.mean_load_kw;
    let cv2 = if mean > 0.0 {
        (spec.std_load_kw / mean).powi(2)
    } else {
        0.0
    };
    let span = spec.window_end_s - spec.window_start_s;
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let x = i as f64 * KNOT_STEP_S / span;
            (2.0 * std::f64::consts::PI * x).cos()
        })
        .collect();
    let raw_mean = raw.iter().sum::<f64>() / k as f64;
    let centered: Vec<f64> = raw.iter().map(|v| v - raw_mean).collect();
    let rms = (centered.iter().map(|v| v * v).sum::<f64>() / k as f64).sqrt();
    let peak = centered.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    // keep the shape at or above 10% of the mean
    let amp = (SHAPE_VARIANCE_SHARE * cv2).sqrt().min(0.9 * rms / peak);
    let shape: Vec<f64> = centered.iter().map(|v| 1.0 + amp * v / rms).collect();
    let shape_var = amp * amp;
    let noise_cv2 = ((1.0 + cv2) / (1.0 + shape_var) - 1.0).max(0.0);

    let values = if noise_cv2 > 0.0 {
        let sigma = (1.0 + noise_cv2).ln().sqrt();
        let dist = LogNormal::new(-0.5 * sigma * sigma, sigma)
            .map_err(|e| Error::Parameter(e.to_string()))?;
        let mut rng = rng::stream(seed, "load", household_index);
        shape
            .iter()
            .map(|s| mean * s * dist.sample(&mut rng))
            .collect()
    } else {
        shape.iter().map(|s| mean * s).collect()
    };
    TimeSeries::new(spec.window_start_s, KNOT_STEP_S, values)
}

/// Load profile for one household at the simulation step.
pub fn load_day_at(
    spec: &DayProfileSpec,
    household_index: u64,
    seed: u64,
    step: f64,
) -> Result<TimeSeries> {
    upsample_spline(&synth_load_day(spec, household_index, seed)?, step)
}

/// Clear-sky PV availability: a half-sine over the daylight window peaking
/// at `pv_peak_kw`, zero at both window edges.
pub fn synth_pv_day(spec: &DayProfileSpec, step: f64) -> Result<TimeSeries> {
    spec.validate()?;
    if !(step > 0.0) {
        return param("step must be positive");
    }
    let span = spec.window_end_s - spec.window_start_s;
    let n = (span / step).round() as usize + 1;
    let values = (0..n)
        .map(|i| {
            let x = (i as f64 * step / span).clamp(0.0, 1.0);
            let v = spec.pv_peak_kw * (std::f64::consts::PI * x).sin();
            if i == 0 || i == n - 1 {
                0.0
            } else {
                v.max(0.0)
            }
        })
        .collect();
    TimeSeries::new(spec.window_start_s, step, values)
}

/// Node `n` receives base profile `n mod n_profiles`.
pub fn allocate_households(n_profiles: usize, node_ids: &[usize]) -> Result<Vec<(usize, usize)>> {
    if n_profiles == 0 {
        return param("at least one base profile is required");
    }
    Ok(node_ids.iter().map(|&n| (n, n % n_profiles)).collect())
}

/// Reactive demand for active demand `p_kw` at the given power factor.
pub fn reactive_demand(p_kw: f64, power_factor: f64) -> f64 {
    p_kw * (1.0 - power_factor * power_factor).sqrt() / power_factor
}

fn parse_seconds_of_day(stamp: &str) -> Option<f64> {
    let time = stamp.trim().rsplit(['T', ' ']).next()?;
    let time = time.trim_end_matches('Z');
    let mut parts = time.split(':');
    let h: f64 = parts.next()?.parse().ok()?;
    let m: f64 = parts.next()?.parse().ok()?;
    let s: f64 = parts.next().map_or(Some(0.0), |s| s.parse().ok())?;
    Some(h * 3600.0 + m * 60.0 + s)
}

/// Reads metered half-hourly demand (`timestamp,household_id,kw`) and
/// upsamples each household to `target_step`.
pub fn load_ami_csv(
    path: impl AsRef<Path>,
    target_step: f64,
) -> Result<BTreeMap<String, TimeSeries>> {
    #[derive(Deserialize)]
    struct Row {
        timestamp: String,
        household_id: String,
        kw: f64,
    }
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let mut grouped: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let row = row?;
        let t = parse_seconds_of_day(&row.timestamp).ok_or_else(|| {
            Error::Parameter(format!(
                "row {}: unparseable timestamp '{}'",
                line + 2,
                row.timestamp
            ))
        })?;
        if !row.kw.is_finite() || row.kw < 0.0 {
            return param(format!(
                "row {}: kw must be finite and non-negative",
                line + 2
            ));
        }
        grouped
            .entry(row.household_id)
            .or_default()
            .push((t, row.kw));
    }
    let mut out = BTreeMap::new();
    for (id, mut rows) in grouped {
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in rows.windows(2) {
            if ((w[1].0 - w[0].0) - KNOT_STEP_S).abs() > 1e-6 {
                return param(format!(
                    "household {id}: samples must be on a 30-minute cadence"
                ));
            }
        }
        let series = TimeSeries::new(rows[0].0, KNOT_STEP_S, rows.iter().map(|r| r.1).collect())?;
        out.insert(id, upsample_spline(&series, target_step)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn knots(values: Vec<f64>) -> TimeSeries {
        TimeSeries::new(DAY_START_S, KNOT_STEP_S, values).unwrap()
    }

    #[test]
    fn constant_stays_constant() {
        let up = upsample_spline(&knots(vec![1.0; 6]), 30.0).unwrap();
        assert_eq!(up.len(), 5 * 60 + 1);
        assert!(up.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn knots_reproduced() {
        let vals = vec![0.3, 1.2, 0.8, 2.0, 0.5, 0.9];
        let up = upsample_spline(&knots(vals.clone()), 30.0).unwrap();
        for (i, v) in vals.iter().enumerate() {
            assert!((up.values[i * 60] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_stays_linear() {
        let vals: Vec<f64> = (0..8).map(|i| 0.5 + 0.25 * i as f64).collect();
        let up = upsample_spline(&knots(vals), 60.0).unwrap();
        for (i, v) in up.values.iter().enumerate() {
            let expected = 0.5 + 0.25 * (i as f64 / 30.0);
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_rejects_bad_input() {
        assert!(upsample_spline(&knots(vec![1.0; 3]), 30.0).is_err());
        assert!(upsample_spline(&knots(vec![1.0; 5]), 7.0).is_err());
    }

    #[test]
    fn negative_interpolants_clamped() {
        let up = upsample_spline(&knots(vec![0.0, 0.0, 3.0, 0.0, 0.0, 0.0]), 30.0).unwrap();
        assert!(up.values.iter().all(|&v| v >= 0.0));
    }

    fn pooled(spec: &DayProfileSpec, n: u64) -> (f64, f64) {
        let all: Vec<f64> = (0..n)
            .flat_map(|i| synth_load_day(spec, i, 42).unwrap().values)
            .collect();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let s = (all.iter().map(|v| (v - m).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
        (m, s)
    }

    #[test]
    fn summer_statistics() {
        let (m, s) = pooled(&DayProfileSpec::summer(), 1000);
        assert!((0.69..=0.85).contains(&m), "{m}");
        assert!((s - 0.27).abs() <= 0.027, "{s}");
    }

    #[test]
    fn winter_statistics() {
        let (m, s) = pooled(&DayProfileSpec::winter(), 1000);
        assert!((0.75..=0.91).contains(&m), "{m}");
        assert!((s - 0.53).abs() <= 0.053, "{s}");
    }

    #[test]
    fn zero_std_is_constant() {
        let spec = DayProfileSpec {
            std_load_kw: 0.0,
            ..DayProfileSpec::summer()
        };
        let day = synth_load_day(&spec, 3, 9).unwrap();
        assert!(day.values.iter().all(|v| (v - 0.77).abs() < 1e-12));
    }

    #[test]
    fn load_is_pure_in_inputs() {
        let spec = DayProfileSpec::summer();
        assert_eq!(
            synth_load_day(&spec, 5, 1).unwrap(),
            synth_load_day(&spec, 5, 1).unwrap()
        );
        assert_ne!(
            synth_load_day(&spec, 5, 1).unwrap(),
            synth_load_day(&spec, 6, 1).unwrap()
        );
    }

    #[test]
    fn pv_peaks_and_window_edges() {
        let summer = synth_pv_day(&DayProfileSpec::summer(), 30.0).unwrap();
        let winter = synth_pv_day(&DayProfileSpec::winter(), 30.0).unwrap();
        let max = |s: &TimeSeries| s.values.iter().cloned().fold(0.0, f64::max);
        assert!((max(&summer) - 5.0).abs() < 1e-9);
        assert!((max(&winter) - 3.5).abs() < 1e-9);
        assert_eq!(summer.values[0], 0.0);
        assert_eq!(*summer.values.last().unwrap(), 0.0);
        assert_eq!(summer.at(DAY_END_S), 0.0);
    }

    #[test]
    fn pv_peak_limit_enforced() {
        let spec = DayProfileSpec {
            pv_peak_kw: 5.5,
            ..DayProfileSpec::summer()
        };
        assert!(synth_pv_day(&spec, 30.0).is_err());
    }

    #[test]
    fn modular_allocation() {
        let ids: Vec<usize> = (0..114).collect();
        let map = allocate_households(30, &ids).unwrap();
        assert_eq!(map[0].1, 0);
        assert_eq!(map[30].1, 0);
        assert_eq!(map[31].1, 1);
        let mut counts = [0usize; 30];
        for (_, p) in &map {
            counts[*p] += 1;
        }
        assert!(counts.iter().all(|&c| c == 3 || c == 4));
        assert_eq!(counts.iter().sum::<usize>(), 114);
    }

    #[test]
    fn reactive_at_095() {
        assert!((reactive_demand(1.0, 0.95) - 0.328_684_105_6).abs() < 1e-9);
    }

    #[test]
    fn ami_csv_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ami.csv");
        let mut text = String::from("timestamp,household_id,kw\n");
        for i in 0..5 {
            let t = 8.0 + 0.5 * i as f64;
            text.push_str(&format!(
                "2012-01-01T{:02}:{:02}:00,h1,{}\n",
                t as u32,
                ((t.fract()) * 60.0) as u32,
                0.5 + i as f64 * 0.1
            ));
        }
        std::fs::write(&path, text).unwrap();
        let data = load_ami_csv(&path, 30.0).unwrap();
        let h1 = &data["h1"];
        assert_eq!(h1.start, DAY_START_S);
        assert_eq!(h1.len(), 4 * 60 + 1);
        assert!((h1.values[60] - 0.6).abs() < 1e-12);
    }
}
