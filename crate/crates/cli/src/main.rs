use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use respcl::experiment::{
    cmd_benchmark, cmd_evaluate, cmd_finetune, cmd_grid, cmd_pretrain, cmd_synth, ExperimentConfig, RunContext,
};

#[derive(Parser)]
#[command(name = "respcl", version, about = "Contrastive pre-training and fine-tuning of masked audio encoders")]
struct Cli {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace `run.seeds` with this single seed (and the corpus seed for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; `runs/<command>` when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// No progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus (WAV files and manifest.tsv).
    Synth,
    /// Contrastive pre-training; writes encoder and projection-head weights.
    Pretrain,
    /// Supervised fine-tuning, from `run.pretrained` when set.
    Finetune,
    /// Score `run.model` on `run.eval_split`.
    Evaluate,
    /// Single-clip inference latency per architecture and masking rate.
    Benchmark,
    /// Every cell of the `[grid]` cross product for every seed, then a summary.
    Grid {
        /// Worker threads for independent cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::Benchmark => "benchmark",
            Command::Grid { .. } => "grid",
        }
    }
}

fn run(cli: &Cli) -> respcl::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seeds = vec![s];
        if matches!(cli.command, Command::Synth) {
            cfg.corpus.seed = s;
        }
    }
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    let ctx = RunContext::new(out, cli.quiet);
    match cli.command {
        Command::Synth => cmd_synth(&cfg, &ctx),
        Command::Pretrain => cmd_pretrain(&cfg, &ctx),
        Command::Finetune => cmd_finetune(&cfg, &ctx),
        Command::Evaluate => cmd_evaluate(&cfg, &ctx),
        Command::Benchmark => cmd_benchmark(&cfg, &ctx),
        Command::Grid { jobs } => cmd_grid(&cfg, &ctx, jobs).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}
