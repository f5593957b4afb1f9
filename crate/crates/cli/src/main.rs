//! `mpsim`: runs max-pressure signal control experiments and writes CSV
//! tables plus a manifest per command.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maxpressure::demand::{scenario_matrix, SubScenario};
use maxpressure::experiment::*;
use maxpressure::Error;

#[derive(Parser)]
#[command(
    name = "mpsim",
    version,
    about = "Max-pressure signal control experiments on a mesoscopic grid simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Every controller on every seed of one scenario.
    Run {
        #[command(flatten)]
        common: Common,
        /// Sub-scenario row (1-8) to apply on top of the config.
        #[arg(long, value_name = "ROW")]
        sub_scenario: Option<u8>,
    },
    /// The sub-scenario table: every listed row, controller and seed.
    Matrix {
        #[command(flatten)]
        common: Common,
        /// Rows to run.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
        rows: Vec<u8>,
    },
    /// APC error sweep over bus occupancy measurements.
    ApcSweep {
        #[command(flatten)]
        common: Common,
        /// Rows to run.
        #[arg(long, value_delimiter = ',', default_value = "1,3")]
        rows: Vec<u8>,
        /// Error standard deviations, percent of true occupancy per crossing.
        #[arg(long, value_delimiter = ',', default_value = "0,10,20,30,40")]
        sigmas: Vec<f64>,
    },
    /// Connected-vehicle penetration sweep. Private occupancies are sampled
    /// and known to controllers for visible vehicles.
    CvSweep {
        #[command(flatten)]
        common: Common,
        /// Sub-scenario row to run.
        #[arg(long, value_name = "ROW", default_value_t = 1)]
        sub_scenario: u8,
        /// Penetration rates in (0, 1].
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
        penetrations: Vec<f64>,
    },
    /// Isolated-intersection stability trials around the feasibility boundary.
    Stability {
        #[command(flatten)]
        common: Common,
        /// Demand multiples of the boundary.
        #[arg(long, value_delimiter = ',')]
        kappas: Option<Vec<f64>>,
        /// Steps per trial (at least 5000).
        #[arg(long)]
        horizon_steps: Option<u64>,
    },
    /// Check a scenario file and print its resolved form.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file. Without one the desk preset is used.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Start from the 8x8 full-scale preset instead of the 4x4 desk preset.
    #[arg(long, conflicts_with = "config")]
    full: bool,
    /// Occupancy scenario: 1 = fixed 1.5 persons per car, 2 = sampled and
    /// known to controllers. Defaults to 1 (2 for cv-sweep), or to the
    /// config file's setting.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    scenario: Option<u8>,
    /// Seeds, e.g. `1-10` or `1,4,7-9`. Defaults to 1-10.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    /// Worker threads. Defaults to the available parallelism.
    #[arg(short, long)]
    workers: Option<usize>,
    /// Base output directory. Defaults to the config's `output_dir`, else
    /// `results`.
    #[arg(short, long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Record every controller decision in decisions.csv.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Debug, Clone)]
struct SeedList(Vec<u64>);

fn parse_seeds(text: &str) -> Result<SeedList, String> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|e| format!("`{part}`: {e}"))?;
                let b: u64 = b.trim().parse().map_err(|e| format!("`{part}`: {e}"))?;
                if a > b {
                    return Err(format!("`{part}`: empty range"));
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|e| format!("`{part}`: {e}"))?),
        }
    }
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(SeedList(seeds))
}

impl Common {
    fn resolve(&self, default_scenario: u8) -> Result<ScenarioConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None if self.full => ScenarioConfig::full(),
            None => ScenarioConfig::desk(),
        };
        let scenario = self.scenario.or((self.config.is_none()).then_some(default_scenario));
        cfg = match scenario {
            Some(1) => cfg.with_fixed_occupancy(),
            Some(2) => cfg.with_sampled_occupancy(),
            _ => cfg,
        };
        if let Some(SeedList(seeds)) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        if self.verbose {
            cfg.log_decisions = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn base(&self) -> Option<&Path> {
        self.output_dir.as_deref()
    }
}

fn rows(indices: &[u8]) -> Result<Vec<SubScenario>, Error> {
    let table = scenario_matrix();
    indices
        .iter()
        .map(|&i| {
            table
                .iter()
                .find(|r| r.index == i)
                .copied()
                .ok_or_else(|| Error::config("rows", format!("no sub-scenario {i}; rows are 1-8")))
        })
        .collect()
}

fn report(w: &Written) {
    let m = &w.manifest;
    println!(
        "{} {} ({} runs, config {})",
        m.command,
        w.dir.display(),
        m.runs,
        m.config_hash
    );
    for f in &m.files {
        println!("  {f}");
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { common, sub_scenario } => {
            let mut cfg = common.resolve(1)?;
            if let Some(i) = sub_scenario {
                cfg = cfg.apply(rows(&[i])?[0]);
            }
            report(&write_scenario(&cfg, common.base())?);
        }
        Command::Matrix { common, rows: r } => {
            let cfg = common.resolve(1)?;
            report(&write_matrix(&cfg, &rows(&r)?, common.base())?);
        }
        Command::ApcSweep {
            common,
            rows: r,
            sigmas,
        } => {
            let cfg = common.resolve(1)?;
            report(&write_apc_sweep(&cfg, &rows(&r)?, &sigmas, common.base())?);
        }
        Command::CvSweep {
            common,
            sub_scenario,
            penetrations,
        } => {
            let cfg = common.resolve(2)?.apply(rows(&[sub_scenario])?[0]);
            report(&write_cv_sweep(&cfg, &penetrations, common.base())?);
        }
        Command::Stability {
            common,
            kappas,
            horizon_steps,
        } => {
            let mut cfg = common.resolve(1)?;
            if let Some(k) = kappas {
                cfg.stability.kappas = k;
            }
            if let Some(h) = horizon_steps {
                cfg.stability.horizon_steps = h;
            }
            report(&write_stability(&cfg, common.base())?);
        }
        Command::Validate { common } => {
            let cfg = common.resolve(1)?;
            println!(
                "# valid: {} seeds, {} controllers, {} s horizon",
                cfg.seeds.len(),
                cfg.controllers.len(),
                cfg.horizon_s()
            );
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

/// 2 for configuration problems, 3 for a simulation invariant violation,
/// 1 for anything else.
fn exit_status(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else if e.is_invariant() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_status(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1-3,7").unwrap().0, vec![1, 2, 3, 7]);
        assert_eq!(parse_seeds("5").unwrap().0, vec![5]);
        assert!(parse_seeds("3-1").is_err());
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn exit_statuses() {
        assert_eq!(exit_status(&Error::config("seeds", "empty")), 2);
        let inv = Error::Invariant {
            step: 4,
            message: "entered 3 != accumulation 1 + exited 1".into(),
        };
        assert_eq!(exit_status(&inv), 3);
        assert_eq!(exit_status(&Error::Io(std::io::Error::other("disk"))), 1);
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
