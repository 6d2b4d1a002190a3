//! Command-line front end of the `atphonon` simulator: configuration,
//! subcommands and output files.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use toml::Value;

pub use config::{LoadedConfig, OutputFormat};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "atphonon", version, about = "Autler–Townes phonon-number spectroscopy of a trapped ion")]
pub struct Cli {
    /// TOML run configuration; frequencies in Hz.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `system.omega_c=0`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    pub out: PathBuf,
    /// Format of tabular outputs.
    #[arg(long, global = true, value_enum)]
    pub format: Option<OutputFormat>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Probe-detuning scan of one initial state, with a peak fit.
    Spectrum {
        #[arg(long)]
        fock: Option<usize>,
        #[arg(long)]
        n_bar: Option<f64>,
    },
    /// Response matrix P(positive | prepared n, probed m).
    Detect {
        /// Prepared Fock levels: `0..=8`, `0..9` or `0,2,4`.
        #[arg(long)]
        prepared: Option<String>,
        #[arg(long)]
        probed: Option<String>,
        /// `destructive` or `qnd`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Thermal-state scan and phonon-number reconstruction.
    Thermal {
        #[arg(long)]
        n_bar: Option<f64>,
        #[arg(long)]
        n_max: Option<usize>,
    },
    /// Splitting versus phonon number.
    Scaling {
        /// Fock levels, same syntax as `--prepared`.
        #[arg(long)]
        n: Option<String>,
        /// `bsb` or `rsb`.
        #[arg(long)]
        regime: Option<String>,
    },
    /// Run the pulse list of the `[sequence]` section.
    RunSequence,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Spectrum { .. } => "spectrum",
            Self::Detect { .. } => "detect",
            Self::Thermal { .. } => "thermal",
            Self::Scaling { .. } => "scaling",
            Self::RunSequence => "run-sequence",
        }
    }

    /// Subcommand flags as configuration overrides.
    fn overrides(&self) -> Result<Vec<(&'static str, Value)>, CliError> {
        let mut out = Vec::new();
        let int = |n: usize| Value::Integer(n as i64);
        let list =
            |s: &str| -> Result<Value, CliError> { Ok(Value::Array(parse_levels(s)?.into_iter().map(int).collect())) };
        match self {
            Self::Spectrum { fock, n_bar } => {
                if let Some(n) = fock {
                    out.push(("scan.fock", int(*n)));
                }
                if let Some(v) = n_bar {
                    out.push(("scan.n_bar", Value::Float(*v)));
                }
            }
            Self::Detect { prepared, probed, variant } => {
                if let Some(s) = prepared {
                    out.push(("detect.prepared", list(s)?));
                }
                if let Some(s) = probed {
                    out.push(("detect.probed", list(s)?));
                }
                if let Some(v) = variant {
                    out.push(("detect.variant", Value::String(v.clone())));
                }
            }
            Self::Thermal { n_bar, n_max } => {
                if let Some(v) = n_bar {
                    out.push(("thermal.n_bar", Value::Float(*v)));
                }
                if let Some(n) = n_max {
                    out.push(("thermal.n_max", int(*n)));
                }
            }
            Self::Scaling { n, regime } => {
                if let Some(s) = n {
                    out.push(("scaling.n", list(s)?));
                }
                if let Some(r) = regime {
                    out.push(("scaling.regime", Value::String(r.clone())));
                }
            }
            Self::RunSequence => {}
        }
        Ok(out)
    }
}

/// Parse `a..=b`, `a..b` or a comma-separated list; empty input gives an
/// empty list.
pub fn parse_levels(s: &str) -> Result<Vec<usize>, CliError> {
    let s = s.trim();
    let bad = || CliError::Config(format!("cannot read level list '{s}'"));
    let int = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    if s.is_empty() {
        return Ok(Vec::new());
    }
    if let Some((a, b)) = s.split_once("..=") {
        return Ok((int(a)?..=int(b)?).collect());
    }
    if let Some((a, b)) = s.split_once("..") {
        return Ok((int(a)?..int(b)?).collect());
    }
    s.split(',').map(int).collect()
}

/// Load the configuration implied by `cli`, with flags applied.
pub fn load_config(cli: &Cli) -> Result<LoadedConfig, CliError> {
    let mut loaded = LoadedConfig::load(cli.config.as_deref(), &cli.sets)?;
    for (key, value) in cli.command.overrides()? {
        loaded.set(key, value)?;
    }
    if let Some(seed) = cli.seed {
        let seed =
            i64::try_from(seed).map_err(|_| CliError::Config(format!("seed {seed} exceeds the TOML integer range")))?;
        loaded.set("seed", Value::Integer(seed))?;
    }
    if let Some(format) = cli.format {
        let name = match format {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        };
        loaded.set("output.format", Value::String(name.into()))?;
    }
    Ok(loaded)
}

/// Run one invocation on a dedicated thread pool.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let loaded = load_config(cli)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Io(format!("thread pool: {e}")))?;
    pool.install(|| commands::execute(&cli.command, loaded, &cli.out))
}
