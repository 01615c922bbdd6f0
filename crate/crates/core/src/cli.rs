//! Command-line front end: `simulate`, `sweep` and `gss`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::gss::{response_sweep, write_response_csv};
use crate::inverters::InverterKind;
use crate::scenario::{CellKey, CellResult, Experiment};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "feedersim",
    version,
    about = "LV feeder time-series simulation with passive and coordinated PV inverters"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full-day runs for the configured growth kind over all penetrations and placements.
    Simulate(RunArgs),
    /// Like `simulate` for every sweep growth kind, plus figure tables.
    Sweep(RunArgs),
    /// Grid-support response sweep over PV output levels.
    Gss(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON configuration file.
    pub config: PathBuf,
    /// Output directory; results go to a subdirectory named by the config hash.
    #[arg(short, long, default_value = "runs")]
    pub out: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for independent cells.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Overrides `profiles.step_seconds`.
    #[arg(long)]
    pub step_seconds: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_path: String,
    config_hash: String,
    seed: u64,
    placement_seed: u64,
    network_seed: u64,
    cells: usize,
    config: &'a ScenarioConfig,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Loads the config named by `args` and applies the command-line overrides.
pub fn load_config(args: &RunArgs) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(step) = args.step_seconds {
        cfg.profiles.step_seconds = step;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a command and returns the run directory.
pub fn execute(command: &Command) -> Result<PathBuf> {
    let (name, args) = match command {
        Command::Simulate(a) => ("simulate", a),
        Command::Sweep(a) => ("sweep", a),
        Command::Gss(a) => ("gss", a),
    };
    let cfg = load_config(args)?;
    if args.jobs == Some(0) {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = args.jobs {
            b = b.num_threads(n);
        }
        b.build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?
    };
    pool.install(|| match name {
        "simulate" => cmd_simulate(&cfg, args),
        "sweep" => cmd_sweep(&cfg, args),
        _ => cmd_gss(&cfg, args),
    })
}

fn base_dir(config_path: &Path) -> Option<&Path> {
    config_path.parent().filter(|p| !p.as_os_str().is_empty())
}

fn run_dir(out: &Path, cfg: &ScenarioConfig) -> Result<PathBuf> {
    let dir = out.join(&cfg.hash()[..16]);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_manifest(
    dir: &Path,
    command: &str,
    args: &RunArgs,
    cfg: &ScenarioConfig,
    cells: usize,
) -> Result<()> {
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_path: args.config.display().to_string(),
        config_hash: cfg.hash(),
        seed: cfg.run.seed,
        placement_seed: cfg.fleet.placement_seed,
        network_seed: cfg.network.synthetic.seed,
        cells,
        config: cfg,
    };
    let mut f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    Ok(())
}

pub fn cmd_simulate(cfg: &ScenarioConfig, args: &RunArgs) -> Result<PathBuf> {
    let exp = Experiment::new(cfg.clone(), base_dir(&args.config))?;
    let keys = exp.cells(&[cfg.fleet.growth_kind]);
    let results = exp.run_cells(&keys)?;
    let dir = run_dir(&args.out, cfg)?;
    write_cells(&dir, &results)?;
    write_manifest(&dir, "simulate", args, cfg, results.len())?;
    Ok(dir)
}

pub fn cmd_sweep(cfg: &ScenarioConfig, args: &RunArgs) -> Result<PathBuf> {
    let exp = Experiment::new(cfg.clone(), base_dir(&args.config))?;
    let keys = exp.cells(&cfg.fleet.sweep_growth_kinds);
    let results = exp.run_cells(&keys)?;
    let dir = run_dir(&args.out, cfg)?;
    write_cells(&dir, &results)?;
    write_figures(&dir, &results)?;
    write_manifest(&dir, "sweep", args, cfg, results.len())?;
    Ok(dir)
}

pub fn cmd_gss(cfg: &ScenarioConfig, args: &RunArgs) -> Result<PathBuf> {
    let exp = Experiment::new(cfg.clone(), base_dir(&args.config))?;
    let rows = response_sweep(&exp)?;
    let dir = run_dir(&args.out, cfg)?;
    write_response_csv(
        &rows,
        BufWriter::new(File::create(dir.join("gss_response.csv"))?),
    )?;
    write_manifest(&dir, "gss", args, cfg, rows.len())?;
    Ok(dir)
}

fn cell_label(key: &CellKey) -> String {
    format!(
        "{}_p{:03}_{:03}",
        key.growth_kind.as_str(),
        (key.penetration * 100.0).round() as u32,
        key.placement
    )
}

fn key_fields(key: &CellKey) -> [String; 3] {
    [
        key.growth_kind.as_str().to_string(),
        format!("{:.2}", key.penetration),
        key.placement.to_string(),
    ]
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

pub const METRICS_HEADER: [&str; 26] = [
    "growth_kind",
    "penetration",
    "placement",
    "customers_overvoltage",
    "customers_overvoltage_pv",
    "customers_overvoltage_non_pv",
    "overvoltage_duration_min",
    "max_voltage_v",
    "max_step_voltage_delta_v",
    "max_voltage_spread_v",
    "pv_utilization",
    "disconnections_legacy",
    "disconnections_autonomous",
    "disconnections_non_exporting",
    "disconnections_per_inverter_legacy",
    "disconnections_per_inverter_autonomous",
    "disconnections_per_inverter_non_exporting",
    "curtailment_kwh_autonomous",
    "curtailment_kwh_non_exporting",
    "curtailment_kwh_coordinated",
    "total_line_losses_kwh",
    "head_reactive_demand_kvarh",
    "pv_available_kwh",
    "pv_injected_kwh",
    "cic_not_converged_steps",
    "cic_infeasible_steps",
];

/// Writes `metrics.csv` and, when the cells carry them, per-cell traces
/// and controller dumps.
pub fn write_cells(dir: &Path, results: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record(METRICS_HEADER)?;
    for r in results {
        let m = &r.metrics;
        let mut row: Vec<String> = key_fields(&r.key).into();
        row.extend([
            m.customers_overvoltage.to_string(),
            m.customers_overvoltage_pv.to_string(),
            m.customers_overvoltage_non_pv.to_string(),
            f6(m.overvoltage_duration_min),
            f6(m.max_voltage_v),
            f6(m.max_step_voltage_delta_v),
            f6(m.max_voltage_spread_v),
            f6(m.pv_utilization),
            f6(m.disconnections.legacy),
            f6(m.disconnections.autonomous),
            f6(m.disconnections.non_exporting),
            f6(m.disconnections_per_inverter.legacy),
            f6(m.disconnections_per_inverter.autonomous),
            f6(m.disconnections_per_inverter.non_exporting),
            f6(m.curtailment_kwh.autonomous),
            f6(m.curtailment_kwh.non_exporting),
            f6(m.curtailment_kwh.coordinated),
            f6(m.total_line_losses_kwh),
            f6(m.head_reactive_demand_kvarh),
            f6(m.pv_available_kwh),
            f6(m.pv_injected_kwh),
            m.cic_not_converged_steps.to_string(),
            m.cic_infeasible_steps.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;

    for r in results {
        if !r.trace.is_empty() {
            let sub = dir.join("traces");
            fs::create_dir_all(&sub)?;
            write_jsonl(&sub.join(format!("{}.jsonl", cell_label(&r.key))), &r.trace)?;
        }
        if !r.cic_dump.is_empty() {
            let sub = dir.join("cic_dump");
            fs::create_dir_all(&sub)?;
            write_jsonl(
                &sub.join(format!("{}.jsonl", cell_label(&r.key))),
                &r.cic_dump,
            )?;
        }
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut f, row)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Plot-ready tables, one row per cell (and per inverter kind where the
/// figure splits by kind).
pub fn write_figures(dir: &Path, results: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("fig_max_voltage.csv"))?;
    w.write_record(["growth_kind", "penetration", "placement", "max_voltage_v"])?;
    for r in results {
        let mut row: Vec<String> = key_fields(&r.key).into();
        row.push(f6(r.metrics.max_voltage_v));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("fig_overvoltage_extent.csv"))?;
    w.write_record([
        "growth_kind",
        "penetration",
        "placement",
        "customers_overvoltage",
        "overvoltage_duration_min",
    ])?;
    for r in results {
        let mut row: Vec<String> = key_fields(&r.key).into();
        row.extend([
            r.metrics.customers_overvoltage.to_string(),
            f6(r.metrics.overvoltage_duration_min),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("fig_disconnections_curtailment.csv"))?;
    w.write_record([
        "growth_kind",
        "penetration",
        "placement",
        "inverter_kind",
        "disconnections_per_inverter",
        "curtailment_kwh",
    ])?;
    for r in results {
        for kind in InverterKind::ALL {
            let mut row: Vec<String> = key_fields(&r.key).into();
            row.extend([
                kind.as_str().to_string(),
                f6(r.metrics.disconnections_per_inverter.get(kind)),
                f6(r.metrics.curtailment_kwh.get(kind)),
            ]);
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("fig_reactive_utilization.csv"))?;
    w.write_record([
        "growth_kind",
        "penetration",
        "placement",
        "head_reactive_demand_kvarh",
        "pv_utilization",
    ])?;
    for r in results {
        let mut row: Vec<String> = key_fields(&r.key).into();
        row.extend([
            f6(r.metrics.head_reactive_demand_kvarh),
            f6(r.metrics.pv_utilization),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from([
            "feedersim",
            "sweep",
            "c.json",
            "--out",
            "o",
            "--seed",
            "7",
            "--jobs",
            "2",
        ])
        .unwrap();
        match cli.command {
            Command::Sweep(a) => {
                assert_eq!(a.seed, Some(7));
                assert_eq!(a.jobs, Some(2));
                assert_eq!(a.out, PathBuf::from("o"));
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(
            exit_code(&Error::Divergence {
                iterations: 3,
                residual: 1.0
            }),
            EXIT_RUNTIME
        );
        assert_eq!(run_from(["feedersim", "bogus"]), EXIT_CONFIG);
    }

    #[test]
    fn missing_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = run_from([
            "feedersim".into(),
            "simulate".into(),
            dir.path().join("nope.json").into_os_string(),
            "--out".into(),
            dir.path().as_os_str().to_owned(),
        ]);
        assert_eq!(code, EXIT_CONFIG);
    }
}
