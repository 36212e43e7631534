//! Config-driven experiment runner for the collapse-model core.
//!
//! One invocation reads one config, runs one experiment and writes
//! `summary.json` plus a time series (`timeseries.csv` or `timeseries.json`)
//! into one output directory.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{Config, Format, LoadedConfig};
pub use error::{LabError, LabResult};
pub use experiments::{execute, Artifacts, CreationMode, Experiment, Report, RunControl};
pub use output::{emit_csv, emit_json, parse_csv, parse_json, OutputDir, Table};

pub const GIT_REVISION: &str = env!("CSL_LAB_GIT_REVISION");

#[derive(Debug, Parser)]
#[command(name = "csl-lab", version, about = "Collapse-model simulation lab")]
pub struct Cli {
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `run.out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Trajectory ensemble: outcome histogram and branch weights.
    Collapse,
    /// Master-equation evolution of the branch density matrix.
    Lindblad,
    /// Particle creation from the vacuum.
    Creation {
        #[arg(long, value_enum, default_value = "ode")]
        mode: CreationMode,
    },
    /// Collapse on proper-time hypersurfaces.
    Gravity,
    /// Spatial-integral check of the W-field form factor.
    Formfactor,
    /// Particle tensor continuity and momentum balance.
    Tensors,
}

impl Command {
    pub fn experiment(self) -> Experiment {
        match self {
            Command::Collapse => Experiment::Collapse,
            Command::Lindblad => Experiment::Lindblad,
            Command::Creation { mode } => Experiment::Creation(mode),
            Command::Gravity => Experiment::Gravity,
            Command::Formfactor => Experiment::FormFactor,
            Command::Tensors => Experiment::Tensors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub git_revision: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub meta: Meta,
    pub report: Report,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolved settings for one run: CLI flags take precedence over the config.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub experiment: Experiment,
    pub loaded: LoadedConfig,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub threads: Option<usize>,
}

impl Invocation {
    pub fn from_cli(cli: &Cli) -> LabResult<Self> {
        let path = cli.config.as_deref().ok_or_else(|| LabError::Config("--config is required".into()))?;
        Ok(Invocation {
            experiment: cli.command.experiment(),
            loaded: config::load(path)?,
            seed: cli.seed,
            out: cli.out.clone(),
            format: cli.format,
            threads: cli.threads,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.loaded.config.run.seed)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().or_else(|| self.loaded.config.run.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn format(&self) -> Format {
        self.format.or(self.loaded.config.run.format).unwrap_or(Format::Csv)
    }

    pub fn threads(&self) -> LabResult<Option<usize>> {
        match self.threads.or(self.loaded.config.run.threads) {
            Some(0) => Err(LabError::Config("threads must be >= 1".into())),
            t => Ok(t),
        }
    }
}

/// Serialized outputs of a run, keyed by file name.
pub fn render(inv: &Invocation, artifacts: &Artifacts) -> LabResult<Vec<(String, String)>> {
    let summary = Summary {
        meta: Meta {
            tool: "csl-lab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: inv.experiment.name().into(),
            config_sha256: sha256_hex(inv.loaded.text.as_bytes()),
            git_revision: GIT_REVISION.into(),
            seed: inv.seed(),
        },
        report: artifacts.report.clone(),
    };
    let series = match inv.format() {
        Format::Csv => ("timeseries.csv".to_string(), emit_csv(&artifacts.series)?),
        Format::Json => ("timeseries.json".to_string(), emit_json(&artifacts.series)?),
    };
    Ok(vec![("summary.json".to_string(), emit_json(&summary)?), series])
}

/// Run the experiment and write its outputs; returns the written paths.
pub fn run(inv: &Invocation) -> LabResult<Vec<PathBuf>> {
    let ctl = RunControl { seed: inv.seed(), threads: inv.threads()? };
    let artifacts = execute(inv.experiment, &inv.loaded.config, ctl)?;
    let files = render(inv, &artifacts)?;
    write_all(&inv.out_dir(), &files)
}

pub fn write_all(dir: &Path, files: &[(String, String)]) -> LabResult<Vec<PathBuf>> {
    let mut out = OutputDir::create(dir)?;
    for (name, text) in files {
        out.write(name, text)?;
    }
    Ok(out.commit())
}
