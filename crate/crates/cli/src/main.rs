mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Usage;

/// Reward transformer workbench: pretrain, collect, train, decode, eval and
/// bench over the synthetic tasks.
#[derive(Debug, Parser)]
#[command(name = "rtsla", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configuration and the environment.
    #[arg(long, global = true, env = "RTSLA_OUTPUT_DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Task by name, replacing the configured task with its defaults.
    #[arg(long, global = true)]
    task: Option<String>,
    /// Override any configuration field, e.g. `decode.sla.depth=3`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    sets: Vec<String>,
}

/// Decoder overrides shared by `decode` and `eval`.
#[derive(Debug, Args)]
pub struct DecodeFlags {
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
    #[arg(long)]
    sampled_children: bool,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Number of evaluation prompts.
    #[arg(long)]
    prompts: Option<usize>,
    /// Model checkpoint; defaults to the trained model, else the policy.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Name used in artifact file names; defaults to the algorithm.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the policy channel on the task corpus.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        examples: Option<usize>,
    },
    /// Sample preference pairs from the pretrained policy.
    Collect {
        #[arg(long)]
        prompts: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the reward channel, optionally after DPO, and the adapter
    /// baseline.
    Train {
        /// `freeze_policy` or `dpo_then_freeze`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Also train the adapter reward head.
        #[arg(long)]
        adapter: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Decode the evaluation prompts and write the responses.
    Decode {
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Tournament against a baseline decoder plus the AuTRC curves.
    Eval {
        #[command(flatten)]
        decode: DecodeFlags,
        #[arg(long, default_value = "greedy")]
        baseline_algorithm: String,
        /// Model for the baseline side; defaults to the candidate's.
        #[arg(long)]
        baseline_checkpoint: Option<PathBuf>,
        #[arg(long)]
        skip_autrc: bool,
    },
    /// Wall-clock and forward-count benchmark of greedy against the
    /// configured decoder.
    Bench {
        #[command(flatten)]
        decode: DecodeFlags,
        #[arg(long)]
        warmup: Option<usize>,
    },
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let message = message.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            return fail("usage", first, 2);
        }
    };
    match commands::run(&cli.common, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<Usage>() {
                fail("usage", &u.0, 2)
            } else if let Some(core) = e.downcast_ref::<rtsla::Error>() {
                fail(core.kind(), &format!("{e:#}"), 1)
            } else {
                fail("runtime", &format!("{e:#}"), 1)
            }
        }
    }
}
