use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::pipeline::{encoder_similarity_gap, evaluate_model, finetune_run, pretrain_run, Corpus, Prediction};
use super::ExperimentConfig;
use crate::diffcore::{ConfigHash, ParameterStore};
use crate::downstream::{DownstreamConfig, DownstreamModel};
use crate::error::{Error, Result};
use crate::evalbench::{benchmark_inference, generate_synthetic_corpus, latency_table, EvalReport, LatencyRow};
use crate::features::{MelClip, Split};

/// Where a command writes and how chatty it is.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out: PathBuf,
    pub quiet: bool,
}

impl RunContext {
    pub fn new(out: impl Into<PathBuf>, quiet: bool) -> Self {
        RunContext { out: out.into(), quiet }
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    phase: &'a str,
    config_hash: String,
    seed: Option<u64>,
    artifacts: Vec<&'a str>,
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // write then rename, so a killed run never leaves a partial file behind
    let tmp = path.with_extension("partial");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Create the run directory and snapshot the config; returns its hash.
fn begin(ctx: &RunContext, cfg: &ExperimentConfig) -> Result<ConfigHash> {
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let text = cfg.to_toml()?;
    write_file(&ctx.path("config.toml"), text.as_bytes())?;
    Ok(ConfigHash::of(&text))
}

fn finish(ctx: &RunContext, phase: &str, hash: ConfigHash, seed: Option<u64>, artifacts: Vec<&str>) -> Result<()> {
    let rec = RunRecord {
        phase,
        config_hash: hash.hex(),
        seed,
        artifacts,
    };
    write_file(&ctx.path("run.json"), serde_json::to_string_pretty(&rec)?.as_bytes())
}

fn require_path(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    let p = p
        .clone()
        .ok_or_else(|| Error::InvalidConfig(format!("{key} must be set for this command")))?;
    if !p.exists() {
        return Err(Error::InvalidConfig(format!("{key} `{}` does not exist", p.display())));
    }
    Ok(p)
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.run.seeds[0]
}

fn eval_split(cfg: &ExperimentConfig) -> Result<Split> {
    cfg.run.eval_split.parse().map_err(Error::InvalidConfig)
}

fn log_header(hash: ConfigHash, columns: &str) -> Vec<u8> {
    format!("# config_hash={}\n{columns}\n", hash.hex()).into_bytes()
}

pub(crate) fn report_files(ctx: &RunContext, report: &EvalReport) -> Result<()> {
    write_file(&ctx.path("report.txt"), report.to_text().as_bytes())?;
    write_file(&ctx.path("report.json"), report.to_json()?.as_bytes())
}

fn predictions_tsv(preds: &[Prediction], hash: ConfigHash) -> Vec<u8> {
    let mut out = log_header(hash, "source_id\tprobability\tdecision");
    for p in preds {
        out.extend(format!("{}\t{}\t{}\n", p.source_id, p.probability, p.decision as u8).into_bytes());
    }
    out
}

/// Write the synthetic corpus (WAVs and `manifest.tsv`) into the run directory.
pub fn cmd_synth(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<()> {
    cfg.validate()?;
    let hash = begin(ctx, cfg)?;
    ctx.say(format!("synthesizing corpus into {}", ctx.out.display()));
    let manifest = generate_synthetic_corpus(&cfg.corpus, &cfg.features, &ctx.out)?;
    ctx.say(format!(
        "{} recordings from {} participants",
        manifest.len(),
        manifest.participants().len()
    ));
    finish(ctx, "synth", hash, Some(cfg.corpus.seed), vec!["manifest.tsv", "wav/"])
}

#[derive(Debug, Serialize)]
struct PretrainSummary {
    config_hash: String,
    seed: u64,
    steps: usize,
    initial_loss: f64,
    final_loss: f64,
    chance_loss: f64,
    heldout_similarity_gap: Option<f64>,
    excluded_participants: Vec<String>,
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<()> {
    cfg.validate()?;
    let hash = begin(ctx, cfg)?;
    let seed = first_seed(cfg);
    let corpus = Corpus::for_config(cfg)?;
    ctx.say(format!("pre-training on {} clips, seed {seed}", corpus.pretraining_clips().len()));
    let mut log = log_header(hash, "step\tloss\tlr");
    let result = pretrain_run(cfg, &corpus, seed, Some(&mut log))?;
    result.encoder.save(ctx.path("encoder.bin"))?;
    result.head.save(ctx.path("head.bin"))?;
    write_file(&ctx.path("pretrain_log.tsv"), &log)?;

    let held: Vec<&MelClip> = corpus.split(Split::Test);
    let gap = if held.is_empty() {
        None
    } else {
        Some(encoder_similarity_gap(cfg, &result.encoder, &held)?)
    };
    let b = cfg.contrastive.batch_size as f64;
    let summary = PretrainSummary {
        config_hash: hash.hex(),
        seed,
        steps: result.log.len(),
        initial_loss: result.log.first().map_or(f64::NAN, |r| r.loss),
        final_loss: result.log.last().map_or(f64::NAN, |r| r.loss),
        chance_loss: (2.0 * b - 1.0).ln(),
        heldout_similarity_gap: gap,
        excluded_participants: result.excluded,
    };
    ctx.say(format!(
        "loss {:.4} -> {:.4} over {} steps",
        summary.initial_loss, summary.final_loss, summary.steps
    ));
    write_file(&ctx.path("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    finish(
        ctx,
        "pretrain",
        hash,
        Some(seed),
        vec!["encoder.bin", "head.bin", "pretrain_log.tsv", "summary.json"],
    )
}

pub fn cmd_finetune(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<()> {
    cfg.validate()?;
    let pretrained = match &cfg.run.pretrained {
        Some(_) => {
            let p = require_path(&cfg.run.pretrained, "run.pretrained")?;
            Some(ParameterStore::load_checked(&p, cfg.encoder.config_hash())?)
        }
        None => None,
    };
    let hash = begin(ctx, cfg)?;
    let seed = first_seed(cfg);
    let corpus = Corpus::for_config(cfg)?;
    ctx.say(format!(
        "fine-tuning {} encoder, seed {seed}",
        if pretrained.is_some() { "pre-trained" } else { "randomly initialised" }
    ));
    let mut log = log_header(hash, "epoch\ttrain_loss\tval_loss\tlr");
    let result = finetune_run(cfg, &corpus, seed, pretrained.as_ref(), Some(&mut log))?;
    result.model.save(&ctx.path("model.bin"))?;
    write_file(&ctx.path("finetune_log.tsv"), &log)?;
    let (mut report, preds) = evaluate_model(&result.model, &corpus.split(eval_split(cfg)?), seed)?;
    report.config_hash = hash.hex();
    report_files(ctx, &report)?;
    write_file(&ctx.path("predictions.tsv"), &predictions_tsv(&preds, hash))?;
    ctx.say(format!(
        "best epoch {} of {}; {} roc_auc {}",
        result.best_epoch,
        result.history.len(),
        cfg.run.eval_split,
        report.roc_auc.map_or("absent".into(), |v| format!("{v:.4}"))
    ));
    finish(
        ctx,
        "finetune",
        hash,
        Some(seed),
        vec!["model.bin", "finetune_log.tsv", "report.txt", "report.json", "predictions.tsv"],
    )
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<()> {
    cfg.validate()?;
    let path = require_path(&cfg.run.model, "run.model")?;
    let model = DownstreamModel::load(&path, cfg.encoder.clone(), cfg.downstream.clone())?;
    let hash = begin(ctx, cfg)?;
    let seed = first_seed(cfg);
    let corpus = Corpus::for_config(cfg)?;
    let (mut report, preds) = evaluate_model(&model, &corpus.split(eval_split(cfg)?), seed)?;
    report.config_hash = hash.hex();
    report_files(ctx, &report)?;
    write_file(&ctx.path("predictions.tsv"), &predictions_tsv(&preds, hash))?;
    if !ctx.quiet {
        eprint!("{}", report.to_text());
    }
    finish(ctx, "evaluate", hash, Some(seed), vec!["report.txt", "report.json", "predictions.tsv"])
}

/// Single-clip latency of freshly initialised models over the configured
/// architectures and masking rates.
pub fn cmd_benchmark(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<()> {
    cfg.validate()?;
    let hash = begin(ctx, cfg)?;
    let seed = first_seed(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, t) = (cfg.features.n_bins, cfg.features.clip_frames);
    let clip = MelClip::new((0..n * t).map(|_| rng.random_range(-12.0..0.0)).collect(), n, t)?;
    let mut rows = Vec::new();
    for &arch in &cfg.benchmark.archs {
        for &mask_rate in &cfg.benchmark.mask_rates {
            let dcfg = DownstreamConfig {
                arch,
                mask_rate,
                ..cfg.downstream.clone()
            };
            let model = DownstreamModel::new(cfg.encoder.clone(), dcfg, seed)?;
            let stats = benchmark_inference(&model, &clip, cfg.benchmark.warmup, cfg.benchmark.trials, seed)?;
            ctx.say(format!("{arch} mask {mask_rate}: p50 {:.1} us", stats.p50 * 1e6));
            rows.push(LatencyRow {
                arch: arch.to_string(),
                mask_rate,
                stats,
            });
        }
    }
    let mut out = format!("# config_hash={}\n", hash.hex()).into_bytes();
    out.extend(latency_table(&rows).into_bytes());
    write_file(&ctx.path("latency.tsv"), &out)?;
    finish(ctx, "benchmark", hash, Some(seed), vec!["latency.tsv"])
}
