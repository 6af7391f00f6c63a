//! `clusterfusion run | eval | plot | demo`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use clusterfusion_core::metrics::cloud_accuracy;
use clusterfusion_core::scenario::{EvalConfig, ScenarioConfig};
use serde::Serialize;

use crate::backend::{write_manifest, DirBackend};
use crate::harness::{run_scenario_with, ScenarioReport};
use crate::io::{read_json, read_ply, write_csv, write_json, write_ply, PlyFormat};
use crate::{plot, Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "clusterfusion",
    version,
    about = "Simulated multi-UAV localization and map fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write its report, map and traces.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Point-to-plane accuracy of one cloud against another.
    Eval {
        map: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Comma-separated thresholds in metres.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// SVG charts of a report.
    Plot {
        report: PathBuf,
        /// Defaults to the report path with an `.svg` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in three-agent scenario.
    Demo {
        #[arg(long, default_value = "demo-out")]
        out: PathBuf,
        /// Print the demo config as JSON and exit.
        #[arg(long)]
        print_config: bool,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 for bad input, 2 when a run breaks an
/// invariant.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, out } => {
            let cfg: ScenarioConfig = read_json(&config)?;
            run(&cfg, &out)
        }
        Command::Eval {
            map,
            reference,
            k,
            thresholds,
        } => {
            let thresholds = thresholds.unwrap_or_else(|| EvalConfig::default().thresholds_m);
            let (q, r) = (read_ply(&map)?, read_ply(&reference)?);
            let cdf = cloud_accuracy(&q, &r, k, &thresholds).map_err(|e| match e {
                clusterfusion_core::Error::Domain(m) => clusterfusion_core::Error::Config(m),
                other => other,
            })?;
            let summary = EvalSummary {
                queries: q.len(),
                reference: r.len(),
                k,
                fallbacks: cdf.fallbacks,
                thresholds_m: cdf.thresholds.clone(),
                fractions: cdf.fractions.clone(),
                mean_m: cdf.mean(),
                median_m: cdf.median(),
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("plain data serializes")
            );
            Ok(())
        }
        Command::Plot { report, out } => {
            let r: ScenarioReport = read_json(&report)?;
            let out = out.unwrap_or_else(|| report.with_extension("svg"));
            fs::write(&out, plot::report_svg(&r)).map_err(|e| Error::io(&out, e))?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Demo { out, print_config } => {
            let cfg = ScenarioConfig::default();
            if print_config {
                println!("{}", serde_json::to_string_pretty(&cfg).expect("plain data serializes"));
                return Ok(());
            }
            run(&cfg, &out)
        }
    }
}

#[derive(Serialize)]
struct EvalSummary {
    queries: usize,
    reference: usize,
    k: usize,
    fallbacks: usize,
    thresholds_m: Vec<f64>,
    fractions: Vec<f64>,
    mean_m: f64,
    median_m: Option<f64>,
}

/// Runs `cfg` with tiles under `out/tiles`; nothing is created before the
/// config passes validation.
pub fn run(cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let mut backend = DirBackend::create(out.join("tiles"))?;
    let run = run_scenario_with(cfg, &mut backend)?;
    write_manifest(&backend, cfg.fusion.d_c, cfg.fusion.voxel, &run.tiles)?;
    write_json(&out.join("report.json"), &run.report)?;
    write_json(&out.join("timings.json"), &run.timings)?;
    write_ply(&out.join("map.ply"), &run.map, PlyFormat::BinaryLittleEndian)?;
    write_csv(&out.join("trajectories.csv"), &run.traces)?;
    let f = &run.report.fusion;
    println!(
        "{}: {} points in {} tiles, voxel set {}, {:.1} s",
        out.display(),
        f.fused_points,
        f.tiles,
        if f.voxel_set_equal { "exact" } else { "differs" },
        run.timings.total_s
    );
    Ok(())
}
