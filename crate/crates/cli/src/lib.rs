//! The `dalip` command line: data generation, training, evaluation,
//! gradient checks, pooling inspection, mixing-law fitting and reports.
//!
//! Every subcommand reads the same [`config::RunConfig`]. Fields come from
//! `--config`, then `DALIP_SEED`, then `--<section>-<field>` flags, then
//! `--seed`; later sources win. Results go under `output.dir` (`--out`)
//! together with `run.json`; diagnostics go to standard error.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 numeric
//! failure (gradient check, divergence, degenerate fit).

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use dalip_core::bdc::DEFAULT_BDC_EPS;
use dalip_core::numcore::{DEFAULT_STEP, DEFAULT_TOL};

mod commands;
pub mod config;
pub mod report;

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or flag value.
    Config(String),
    Core(dalip_core::Error),
    /// Finite differences disagreed with the tape.
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numeric() => 2,
            CliError::GradCheck(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::GradCheck(m) => write!(f, "gradient check failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dalip_core::Error> for CliError {
    fn from(e: dalip_core::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dalip",
    version,
    about = "Distribution-aligned contrastive training on synthetic token data",
    after_help = "Seed precedence: --seed > DALIP_SEED > --data-seed/--train-seed > config file."
)]
pub struct Cli {
    /// JSON run configuration with sections data, model, objective, train, mixlaw, output.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for both data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset into <out>/data.
    GenData,
    /// Train the two-tower model; writes a checkpoint, metrics CSVs and eval.json.
    Train {
        /// Dataset directory from gen-data; generated from the data section when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split; writes eval.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory from gen-data; generated from the data section when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare tape gradients of the full loss with finite differences.
    Gradcheck {
        /// Tokens per sample.
        #[arg(long, default_value_t = 6)]
        tokens: usize,
        /// Pairs in the batch.
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
    /// BDC matrix of a tensor blob; writes bdc.blob.
    Bdc {
        #[arg(long = "in", value_name = "BLOB")]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BDC_EPS)]
        eps: f64,
    },
    /// MBDC embedding of a tensor blob; writes mbdc.blob.
    Mbdc {
        #[arg(long = "in", value_name = "BLOB")]
        input: PathBuf,
        /// MBDC parameter directory; initialized from the model section when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit the two-domain mixing law to a domain,ratio,accuracy CSV; writes mixlaw.json.
    FitMixlaw {
        #[arg(long = "in", value_name = "CSV")]
        input: PathBuf,
    },
    /// Optimal mixing ratio for two laws given as "alpha,beta,gamma"; writes solve.json.
    SolveMix {
        /// Law of the first domain, in r.
        #[arg(long, allow_hyphen_values = true)]
        fit1: String,
        /// Law of the second domain, in 1 - r.
        #[arg(long, allow_hyphen_values = true)]
        fit2: String,
    },
    /// SVG charts and summary.json from metrics or mixing CSVs.
    Report {
        #[arg(required = true, value_name = "CSV")]
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Bdc { .. } => "bdc",
            Command::Mbdc { .. } => "mbdc",
            Command::FitMixlaw { .. } => "fit-mixlaw",
            Command::SolveMix { .. } => "solve-mix",
            Command::Report { .. } => "report",
        }
    }
}

fn arg_id(section: &str, field: &str) -> String {
    format!("cfg.{section}.{field}")
}

/// The full command with one global flag per config leaf.
pub fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for (section, field, default) in config::schema_leaves() {
        let mut arg = Arg::new(arg_id(&section, &field))
            .long(config::flag_name(&section, &field))
            .value_name("VALUE")
            .action(ArgAction::Set)
            .global(true)
            .allow_hyphen_values(true)
            .help(format!("{section}.{field} [default: {default}]"))
            .help_heading("Config overrides");
        if section == "output" && field == "dir" {
            arg = arg.visible_alias("out");
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn field_overrides(matches: &ArgMatches) -> Vec<(String, String, serde_json::Value)> {
    let sub = matches.subcommand().map(|(_, m)| m).unwrap_or(matches);
    config::schema_leaves()
        .into_iter()
        .filter_map(|(section, field, default)| {
            let raw = sub
                .get_one::<String>(&arg_id(&section, &field))
                .or_else(|| matches.get_one::<String>(&arg_id(&section, &field)))?;
            let value = match default {
                serde_json::Value::String(_) => serde_json::Value::String(raw.clone()),
                _ => config::flag_value(raw),
            };
            Some((section, field, value))
        })
        .collect()
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let overrides = config::Overrides {
        fields: field_overrides(&matches),
        seed_flag: cli.seed,
        seed_env: std::env::var(config::SEED_ENV).ok(),
    };
    let result = config::resolve(cli.config.as_deref(), &overrides).and_then(|cfg| commands::dispatch(&cli.command, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_flags_match_the_schema() {
        let cmd = command();
        let mut flags: Vec<String> = cmd
            .get_arguments()
            .filter(|a| a.get_id().as_str().starts_with("cfg."))
            .map(|a| a.get_long().expect("long flag").to_string())
            .collect();
        let mut schema: Vec<String> = config::schema_leaves()
            .iter()
            .map(|(s, f, _)| config::flag_name(s, f))
            .collect();
        flags.sort();
        schema.sort();
        assert_eq!(flags, schema);
        // Each schema leaf appears in the serialized default config exactly once.
        let defaults = serde_json::to_value(config::RunConfig::default()).unwrap();
        let total: usize = defaults.as_object().unwrap().values().map(|v| v.as_object().unwrap().len()).sum();
        assert_eq!(schema.len(), total);
    }

    #[test]
    fn every_subcommand_help_lists_overrides_and_defaults() {
        let mut cmd = command();
        cmd.build();
        for sub in cmd.get_subcommands().filter(|s| s.get_name() != "help") {
            let help = sub.clone().render_long_help().to_string();
            assert!(help.contains("--train-batch-size"), "{}", sub.get_name());
            assert!(help.contains("[default: 32]"), "{}", sub.get_name());
            assert!(help.contains("--out"), "{}", sub.get_name());
        }
    }

    #[test]
    fn flags_reach_the_config() {
        let m = command()
            .try_get_matches_from(["dalip", "train", "--train-epochs", "3", "--out", "x", "--model-pooling", "cov"])
            .unwrap();
        let got = field_overrides(&m);
        assert!(got.contains(&("train".into(), "epochs".into(), 3.into())));
        assert!(got.contains(&("output".into(), "dir".into(), "x".into())));
        assert!(got.contains(&("model".into(), "pooling".into(), "cov".into())));
    }

    #[test]
    fn bad_usage_exits_with_one() {
        assert_eq!(run(["dalip", "no-such-command"]), 1);
        assert_eq!(run(["dalip", "train", "--train-batch-size", "1", "--train-epochs", "0"]), 1);
    }
}
