//! Command-line front end. Every subcommand builds its outputs in memory
//! and writes them only once all of them exist.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use super::*;

#[derive(Debug, Parser)]
#[command(name = "chartless", version, about = "Two-observer stimulus map experiment")]
pub struct Cli {
    /// Configuration file, or `default` for the built-in configuration.
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true, env = "CHARTLESS_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MachineArg {
    A,
    B,
}

impl From<MachineArg> for Machine {
    fn from(m: MachineArg) -> Self {
        match m {
            MachineArg::A => Machine::A,
            MachineArg::B => Machine::B,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample both training trajectories and measure them through each
    /// machine's sensors.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one machine on a measured trajectory.
    Fit {
        #[arg(long, value_enum)]
        machine: MachineArg,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Locate the configured test points with a trained machine.
    Locate {
        #[arg(long, value_enum)]
        machine: MachineArg,
        #[arg(long)]
        model: PathBuf,
        /// Sensor suite; defaults to the one the configuration realizes.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole two-machine experiment.
    Experiment {
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two map files.
    Compare {
        map1: PathBuf,
        map2: PathBuf,
        /// Directory for `report.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn summary(report: &AgreementReport) -> String {
    let rel = report.relative_rms();
    format!(
        "common {}/{} (failures a={} b={})\nrms ds1={} ds2={} ({:.2}% and {:.2}% of span)\nmax ds1={} ds2={}\n",
        report.common,
        report.points.len(),
        report.failures_a,
        report.failures_b,
        report.rms[0],
        report.rms[1],
        100.0 * rel[0],
        100.0 * rel[1],
        report.max[0],
        report.max[1],
    )
}

/// Executes a parsed command line; returns the text for stdout.
pub fn execute(cli: &Cli) -> Result<String> {
    let strategy = if cli.sequential {
        Strategy::Sequential
    } else {
        Strategy::Parallel
    };
    let config = || -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(cli.config.as_deref().unwrap_or("default"))?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    };
    let mut out = String::new();
    let (dir, files) = match &cli.command {
        Command::Simulate { out: dir } => {
            let cfg = config()?;
            let mut files = Vec::new();
            for m in [Machine::A, Machine::B] {
                let suite = realize_suite(&cfg, m)?;
                let traj = simulate(&cfg, m, strategy)?;
                let (series, truncation) = measure_trajectory(&suite, &traj, strategy);
                let l = m.label();
                out += &format!(
                    "machine {l}: {} segments, {} measured pieces\n",
                    traj.segments.len(),
                    series.segments.len()
                );
                files.push(OutputFile::new(format!("world_{l}.csv"), world_csv(&traj)));
                files.push(OutputFile::new(format!("trajectory_{l}.csv"), trajectory_csv(&series, &truncation)));
                files.push(suite_file(m, &suite)?);
            }
            files.push(io::probes_file(&cfg)?);
            (dir, files)
        }
        Command::Fit {
            machine,
            trajectory,
            out: dir,
        } => {
            let cfg = config()?;
            let m = Machine::from(*machine);
            let (series, truncation) = parse_trajectory_csv(&read(trajectory)?)?;
            let art = train(cfg.machine(m), &series, truncation, strategy)?;
            let d = &art.diagnostics;
            out += &format!(
                "machine {}: d = {}, {} of {} visited cells supported\n",
                m.label(),
                d.dimension,
                d.supported_visited,
                d.visited_cells
            );
            (dir, vec![model_file(m, &art)?])
        }
        Command::Locate {
            machine,
            model,
            suite,
            out: dir,
        } => {
            let cfg = config()?;
            let m = Machine::from(*machine);
            let art = parse_model(&read(model)?)?;
            let suite = match suite {
                Some(path) => parse_suite(&read(path)?, &cfg)?,
                None => realize_suite(&cfg, m)?,
            };
            let (anchors, tests) = probe_points(&cfg)?;
            let map = locate_tests(&art, &cfg.machine(m).geometry, &suite, &anchors, &tests, strategy)?;
            let converged = map.iter().filter(|e| e.converged).count();
            out += &format!("machine {}: {converged}/{} test points converged\n", m.label(), map.len());
            (dir, vec![OutputFile::new(format!("map_{}.csv", m.label()), map_csv(&map))])
        }
        Command::Experiment { out: dir } => {
            let cfg = config()?;
            let result = experiment(&cfg, strategy)?;
            out += &summary(&result.report);
            (dir, result.files)
        }
        Command::Compare { map1, map2, out: dir } => {
            let cfg = match &cli.config {
                Some(_) => Some(config()?),
                None => None,
            };
            let a = parse_map_csv(&read(map1)?)?;
            let b = parse_map_csv(&read(map2)?)?;
            let report = compare_entries(&a, &b)?;
            out += &summary(&report);
            let Some(dir) = dir else { return Ok(out) };
            (dir, vec![OutputFile::new("report.csv", report_csv(&report, cfg.as_ref()))])
        }
    };
    write_files(dir, &files)?;
    for f in &files {
        out += &format!("wrote {}\n", dir.join(&f.name).display());
    }
    Ok(out)
}

/// Parses `args` and runs them. Exit status 0 on success, 1 on a failed
/// stage, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
