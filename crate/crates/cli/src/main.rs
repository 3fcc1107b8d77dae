//! `moltx`: data generation, codebook fitting, training, evaluation,
//! analysis and molecular dynamics from one binary.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "MOLTX_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "moltx", version, about = "Graph-free molecular transformer toolkit", after_help = OVERRIDE_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML or JSON config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory (default: $MOLTX_OUT_ROOT/<command>, or runs/<command>).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for encoding and analysis.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// `--key=value` config overrides, collected before clap parsing.
    #[arg(skip)]
    pub overrides: Vec<String>,
}

const OVERRIDE_HELP: &str = "Any other --key=value flag overrides a config key, \
e.g. --model.hidden_dim=32 --training.epochs=5. Unknown keys are rejected.";

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a labelled Lennard-Jones argon dataset and split it.
    GenData(RunArgs),
    /// Fit quantile codebooks on frames.
    FitCodebook(RunArgs),
    /// Encode frames into token records.
    Tokenize(RunArgs),
    /// Causal next-token pre-training.
    Pretrain(RunArgs),
    /// Energy/force fine-tuning.
    Finetune(RunArgs),
    /// Energy and force errors of a checkpoint or of given predictions.
    Eval(RunArgs),
    /// Attention statistics by token type, distance and local density.
    AttnAnalyze(RunArgs),
    /// Fit power-law or joint scaling laws to a loss table.
    ScalingFit(RunArgs),
    /// Compute-optimal model sizes from a joint scaling fit.
    Isoflop(RunArgs),
    /// Sequence log-probabilities under a pre-trained model.
    Logprob(RunArgs),
    /// Molecular dynamics with analytic or learned forces.
    Md(RunArgs),
    /// Rotational equivariance of predicted forces.
    Equivariance(RunArgs),
}

/// Separate `--key=value` overrides from the options clap knows about.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    const OWN: [&str; 3] = ["--config", "--out-dir", "--workers"];
    let mut parsed = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|b| b.split_once('=')) {
            Some((key, _)) if !key.is_empty() && !OWN.contains(&format!("--{key}").as_str()) => {
                overrides.push(a)
            }
            _ => parsed.push(a),
        }
    }
    (parsed, overrides)
}

impl Command {
    pub fn args_mut(&mut self) -> &mut RunArgs {
        match self {
            Command::GenData(a)
            | Command::FitCodebook(a)
            | Command::Tokenize(a)
            | Command::Pretrain(a)
            | Command::Finetune(a)
            | Command::Eval(a)
            | Command::AttnAnalyze(a)
            | Command::ScalingFit(a)
            | Command::Isoflop(a)
            | Command::Logprob(a)
            | Command::Md(a)
            | Command::Equivariance(a) => a,
        }
    }

    pub fn parts(&self) -> (&'static str, &RunArgs) {
        match self {
            Command::GenData(a) => ("gen-data", a),
            Command::FitCodebook(a) => ("fit-codebook", a),
            Command::Tokenize(a) => ("tokenize", a),
            Command::Pretrain(a) => ("pretrain", a),
            Command::Finetune(a) => ("finetune", a),
            Command::Eval(a) => ("eval", a),
            Command::AttnAnalyze(a) => ("attn-analyze", a),
            Command::ScalingFit(a) => ("scaling-fit", a),
            Command::Isoflop(a) => ("isoflop", a),
            Command::Logprob(a) => ("logprob", a),
            Command::Md(a) => ("md", a),
            Command::Equivariance(a) => ("equivariance", a),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn overrides_split_from_own_options() {
        let (p, o) = split_overrides(v(&["moltx", "md", "--workers=2", "--dt_fs=0.5", "--out-dir", "x", "--help"]));
        assert_eq!(p, v(&["moltx", "md", "--workers=2", "--out-dir", "x", "--help"]));
        assert_eq!(o, v(&["--dt_fs=0.5"]));
    }

    #[test]
    fn clap_definition_is_valid() {
        Cli::command().debug_assert();
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let parsed = Cli::command()
        .mut_subcommands(|s| s.after_help(OVERRIDE_HELP))
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m));
    let mut cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    cli.command.args_mut().overrides = overrides;
    commands::execute(&cli.command)
}
