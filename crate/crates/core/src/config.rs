//! Run configuration: a single JSON document with the sections `network`,
//! `profiles`, `fleet`, `droop`, `cic`, `gss` and `run`. Every field has a
//! default, so `{}` is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cic::CicSettings;
use crate::error::{Error, Result};
use crate::gss::GssSettings;
use crate::inverters::{DroopSettings, InverterKind};
use crate::network::{generate_synthetic_feeder, scale_feeder, FeederSpec, NetworkModel};
use crate::powerflow::LossFormula;
use crate::profiles::{DayProfileSpec, Season};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Network JSON file; relative paths resolve against the config file.
    /// When absent the synthetic feeder is generated.
    pub file: Option<PathBuf>,
    pub synthetic: FeederSpec,
    /// Impedance multiplier applied to a network read from `file`.
    pub file_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            file: None,
            synthetic: FeederSpec::default(),
            file_scale: 1.0,
        }
    }
}

impl NetworkConfig {
    pub fn build(&self, base_dir: Option<&Path>) -> Result<NetworkModel> {
        match &self.file {
            Some(path) => {
                let path = resolve(base_dir, path);
                let net = NetworkModel::load_json(&path)?;
                if self.file_scale != 1.0 {
                    scale_feeder(&net, self.file_scale)
                } else {
                    Ok(net)
                }
            }
            None => generate_synthetic_feeder(&self.synthetic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub season: Season,
    /// Overrides the season's load statistics and PV peak.
    pub day: Option<DayProfileSpec>,
    pub step_seconds: f64,
    /// Metered demand (`timestamp,household_id,kw`) replacing the synthetic
    /// load profiles.
    pub ami_csv: Option<PathBuf>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            season: Season::Summer,
            day: None,
            step_seconds: 30.0,
            ami_csv: None,
        }
    }
}

impl ProfileConfig {
    pub fn day_spec(&self) -> DayProfileSpec {
        self.day
            .clone()
            .unwrap_or_else(|| DayProfileSpec::for_season(self.season))
    }
}

/// Shares of the base-case fleet by inverter kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mix {
    pub legacy: f64,
    pub autonomous: f64,
    pub non_exporting: f64,
    pub coordinated: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Self {
            legacy: 0.5,
            autonomous: 0.5,
            non_exporting: 0.0,
            coordinated: 0.0,
        }
    }
}

impl Mix {
    pub fn share(&self, kind: InverterKind) -> f64 {
        match kind {
            InverterKind::Legacy => self.legacy,
            InverterKind::Autonomous => self.autonomous,
            InverterKind::NonExporting => self.non_exporting,
            InverterKind::Coordinated => self.coordinated,
        }
    }

    /// Splits `n` units by largest remainder, in `InverterKind::ALL` order.
    pub fn counts(&self, n: usize) -> [usize; 4] {
        let raw: Vec<f64> = InverterKind::ALL
            .iter()
            .map(|&k| self.share(k) * n as f64)
            .collect();
        let mut counts = [0usize; 4];
        for (c, r) in counts.iter_mut().zip(&raw) {
            *c = r.floor() as usize;
        }
        let mut left = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            (raw[b] - raw[b].floor())
                .total_cmp(&(raw[a] - raw[a].floor()))
                .then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if self.share(InverterKind::ALL[i]) > 0.0 {
                counts[i] += 1;
                left -= 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetConfig {
    pub base_penetration: f64,
    pub base_mix: Mix,
    /// Kind of the inverters added beyond the base case.
    pub growth_kind: InverterKind,
    /// Growth kinds covered by a sweep.
    pub sweep_growth_kinds: Vec<InverterKind>,
    pub penetration_steps: Vec<f64>,
    pub n_placements: usize,
    pub placement_seed: u64,
    pub s_rating_kva: f64,
    pub p_ac_max_kw: f64,
    pub min_offline_minutes: f64,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            base_penetration: 0.3,
            base_mix: Mix::default(),
            growth_kind: InverterKind::Coordinated,
            sweep_growth_kinds: vec![
                InverterKind::Autonomous,
                InverterKind::NonExporting,
                InverterKind::Coordinated,
            ],
            penetration_steps: (3..=10).map(|k| k as f64 / 10.0).collect(),
            n_placements: 40,
            placement_seed: 1,
            s_rating_kva: 6.0,
            p_ac_max_kw: 5.0,
            min_offline_minutes: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub overvoltage_threshold_v: f64,
    /// Write per-step JSONL traces for every cell.
    pub traces: bool,
    /// Write the per-step controller dump for every cell.
    pub cic_dump: bool,
    /// Restrict a run to these placement indices.
    pub placements: Option<Vec<usize>>,
    /// Line-loss expression used for the loss metric.
    pub loss_formula: LossFormula,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            overvoltage_threshold_v: 253.0,
            traces: false,
            cic_dump: false,
            placements: None,
            loss_formula: LossFormula::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub network: NetworkConfig,
    pub profiles: ProfileConfig,
    pub fleet: FleetConfig,
    pub droop: DroopSettings,
    pub cic: CicSettings,
    pub gss: GssSettings,
    pub run: RunConfig,
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

fn resolve(base_dir: Option<&Path>, path: &Path) -> PathBuf {
    match base_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn inner(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Parameter(m) => m.clone(),
        other => other.to_string(),
    }
}

impl ScenarioConfig {
    /// Reads and validates a config file. Errors carry the file name and,
    /// for syntax or schema problems, the line and column.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), inner(&e))))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>, section: &str| {
            r.map_err(|e| Error::Config(format!("{section}: {}", inner(&e))))
        };
        wrap(self.droop.validate(), "droop")?;
        wrap(self.cic.validate_against(&self.droop), "cic")?;
        wrap(self.profiles.day_spec().validate(), "profiles")?;
        wrap(self.gss.validate(), "gss")?;
        let step = self.profiles.step_seconds;
        if !(step > 0.0) || step / 60.0 > self.droop.tau_v.min(self.droop.tau_w) {
            return config_err(format!("profiles.step_seconds must be positive and at most the shortest filter constant, got {step}"));
        }
        if (1800.0 / step).fract().abs() > 1e-9 {
            return config_err("profiles.step_seconds must divide 1800");
        }
        let f = &self.fleet;
        if !(f.base_penetration > 0.0 && f.base_penetration <= 1.0) {
            return config_err("fleet.base_penetration must lie in (0,1]");
        }
        if f.penetration_steps.is_empty() {
            return config_err("fleet.penetration_steps must not be empty");
        }
        for &p in &f.penetration_steps {
            if !(p > 0.0 && p <= 1.0) || p < f.base_penetration - 1e-12 {
                return config_err(format!("penetration {p} must lie in [base_penetration, 1]"));
            }
        }
        let m = &f.base_mix;
        let shares = [m.legacy, m.autonomous, m.non_exporting, m.coordinated];
        if shares.iter().any(|s| !(*s >= 0.0)) || (shares.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return config_err("fleet.base_mix shares must be non-negative and sum to 1");
        }
        if f.n_placements == 0 {
            return config_err("fleet.n_placements must be at least 1");
        }
        if !(f.p_ac_max_kw > 0.0 && f.p_ac_max_kw <= f.s_rating_kva) {
            return config_err("fleet.p_ac_max_kw must lie in (0, s_rating_kva]");
        }
        if !(f.min_offline_minutes >= 0.0) {
            return config_err("fleet.min_offline_minutes must be non-negative");
        }
        if f.sweep_growth_kinds.is_empty() {
            return config_err("fleet.sweep_growth_kinds must not be empty");
        }
        if let Some(p) = &self.run.placements {
            if p.iter().any(|&i| i >= f.n_placements) {
                return config_err("run.placements must index into 0..n_placements");
            }
        }
        if !(self.run.overvoltage_threshold_v > 0.0) {
            return config_err("run.overvoltage_threshold_v must be positive");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn min_offline_steps(&self) -> usize {
        (self.fleet.min_offline_minutes * 60.0 / self.profiles.step_seconds).ceil() as usize
    }
}
