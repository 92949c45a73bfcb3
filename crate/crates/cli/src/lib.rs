//! Command-line driver for the `a2fpn` crate.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, format or
//! runtime error, 3 self-test property failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod train;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use a2fpn::Error;
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "a2fpn", version, about = "Attention-aggregation FPN segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its manifest
    Gen(Flags),
    /// Train one variant and save the best-validation checkpoint
    Train(Flags),
    /// Evaluate a checkpoint on a corpus split
    Eval(Flags),
    /// Time dot-product vs. linear attention over growing N
    BenchAttention(Flags),
    /// Run the oracle property suite
    Selftest(Flags),
}

#[derive(Debug, Default, Args)]
pub struct Flags {
    /// Flat `key = value` configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// baseline | fpn | a2fpn
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Test-time augmentation (on/off)
    #[arg(long, num_args = 0..=1, default_missing_value = "on")]
    pub tta: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corpus directory
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Any other configuration key, as `key=value` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Flags {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("variant", self.variant.clone());
        push("lr", self.lr.map(|v| v.to_string()));
        push("tta", self.tta.clone());
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        push("corpus", self.corpus.as_ref().map(|p| p.display().to_string()));
        push("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        for s in &self.set {
            match s.split_once('=') {
                Some((k, v)) => kv.push((k.trim().to_string(), v.trim().to_string())),
                None => kv.push((s.clone(), String::new())),
            }
        }
        kv
    }

    /// Defaults, then the config file, then explicit flags.
    pub fn resolve(&self) -> a2fpn::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for (k, v) in self.overrides() {
            if v.is_empty() && k != "checkpoint" {
                return Err(Error::Usage(format!("--set {k}: expected KEY=VALUE")));
            }
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{failed} of {total} properties failed")]
    PropertyFailure { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Usage(_) | Error::Config(_)) => 1,
            CliError::Core(_) => 2,
            CliError::PropertyFailure { .. } => 3,
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Gen(f) => commands::cmd_gen(&f.resolve()?).map(drop)?,
        Command::Train(f) => commands::cmd_train(&f.resolve()?).map(drop)?,
        Command::Eval(f) => commands::cmd_eval(&f.resolve()?).map(drop)?,
        Command::BenchAttention(f) => commands::cmd_bench(&f.resolve()?).map(drop)?,
        Command::Selftest(f) => {
            let results = commands::cmd_selftest(&f.resolve()?)?;
            let failed = results.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(CliError::PropertyFailure {
                    failed,
                    total: results.len(),
                });
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
