use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::commands::{write_file, RunContext};
use super::pipeline::{full_run, Corpus};
use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evalbench::{average_f1, mean_std, EvalReport};

/// One point of the grid's cross product.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub index: usize,
    /// `(axis, value)` in axis order.
    pub settings: Vec<(String, toml::Value)>,
    /// The base config with the settings applied and the grid removed.
    pub cfg: ExperimentConfig,
}

impl GridCell {
    pub fn label(&self) -> String {
        self.settings
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn dir_name(&self) -> String {
        format!("cell_{:03}", self.index)
    }
}

/// Cross product of the grid axes, last axis varying fastest. A config
/// without a grid is a single cell.
pub fn grid_cells(cfg: &ExperimentConfig) -> Result<Vec<GridCell>> {
    let base = ExperimentConfig {
        grid: BTreeMap::new(),
        ..cfg.clone()
    };
    let axes: Vec<(&String, &Vec<toml::Value>)> = cfg.grid.iter().collect();
    let total: usize = axes.iter().map(|(_, v)| v.len()).product();
    let mut cells = Vec::with_capacity(total);
    for index in 0..total {
        let mut rem = index;
        let mut settings = Vec::with_capacity(axes.len());
        for (name, values) in axes.iter().rev() {
            settings.push(((*name).clone(), values[rem % values.len()].clone()));
            rem /= values.len();
        }
        settings.reverse();
        let mut cell_cfg = base.clone();
        for (k, v) in &settings {
            cell_cfg = cell_cfg.with_override(k, v)?;
        }
        cells.push(GridCell {
            index,
            settings,
            cfg: cell_cfg,
        });
    }
    Ok(cells)
}

/// Mean and sample standard deviation of each metric over a cell's seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub index: usize,
    pub label: String,
    pub runs: usize,
    pub roc_auc: (f64, f64),
    pub precision: (f64, f64),
    pub recall: (f64, f64),
    pub accuracy: (f64, f64),
    /// Harmonic mean of the mean precision and mean recall.
    pub average_f1: f64,
}

pub fn summarize(index: usize, label: String, reports: &[EvalReport]) -> Result<CellSummary> {
    let col = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Vec<f64> { reports.iter().filter_map(f).collect() };
    let precision = col(&|r| Some(r.precision));
    let recall = col(&|r| Some(r.recall));
    Ok(CellSummary {
        index,
        label,
        runs: reports.len(),
        roc_auc: mean_std(&col(&|r| r.roc_auc)),
        precision: mean_std(&precision),
        recall: mean_std(&recall),
        accuracy: mean_std(&col(&|r| Some(r.accuracy))),
        average_f1: average_f1(&precision, &recall)?,
    })
}

fn run_dir(out: &Path, cell: &GridCell, seed: u64) -> PathBuf {
    out.join(cell.dir_name()).join(format!("seed_{seed}"))
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// A finished run whose report carries the expected config hash.
fn completed(dir: &Path, hash: &str) -> bool {
    read_report(&dir.join("report.json")).is_ok_and(|r| r.config_hash == hash)
}

fn run_one(cell: &GridCell, seed: u64, corpus: &Corpus, dir: &Path) -> Result<EvalReport> {
    let mut cfg = cell.cfg.clone();
    cfg.run.seeds = vec![seed];
    if cfg.run.resample_corpus && cfg.run.data_dir.is_none() {
        cfg.corpus.seed = seed;
    }
    let text = cfg.to_toml()?;
    let hash = crate::diffcore::ConfigHash::of(&text).hex();
    write_file(&dir.join("config.toml"), text.as_bytes())?;
    let outcome = full_run(&cfg, corpus, seed, cfg.run.use_pretraining)?;
    if let Some(pre) = &outcome.pretrain {
        pre.encoder.save(dir.join("encoder.bin"))?;
    }
    outcome.finetune.model.save(&dir.join("model.bin"))?;
    let mut report = outcome.report;
    report.config_hash = hash;
    // the report marks the run complete, so it is written last
    write_file(&dir.join("report.json"), report.to_json()?.as_bytes())?;
    Ok(report)
}

fn expected_hash(cell: &GridCell, seed: u64) -> Result<String> {
    let mut cfg = cell.cfg.clone();
    cfg.run.seeds = vec![seed];
    if cfg.run.resample_corpus && cfg.run.data_dir.is_none() {
        cfg.corpus.seed = seed;
    }
    Ok(cfg.hash()?.hex())
}

/// Run every (cell, seed) pair not already completed under `ctx.out`, on up
/// to `jobs` worker threads, then summarize each cell from the stored
/// reports. Writes `summary.tsv` and `summary.txt`.
pub fn cmd_grid(cfg: &ExperimentConfig, ctx: &RunContext, jobs: usize) -> Result<Vec<CellSummary>> {
    cfg.validate()?;
    let cells = grid_cells(cfg)?;
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    write_file(&ctx.out.join("config.toml"), cfg.to_toml()?.as_bytes())?;

    let mut todo = Vec::new();
    for cell in &cells {
        write_file(&ctx.out.join(cell.dir_name()).join("cell.txt"), format!("{}\n", cell.label()).as_bytes())?;
        for &seed in &cfg.run.seeds {
            let dir = run_dir(&ctx.out, cell, seed);
            if completed(&dir, &expected_hash(cell, seed)?) {
                continue;
            }
            todo.push((cell, seed, dir));
        }
    }
    if !ctx.quiet {
        eprintln!(
            "{} cells x {} seeds; {} runs to do",
            cells.len(),
            cfg.run.seeds.len(),
            todo.len()
        );
    }

    // corpora are shared read-only between workers
    let mut corpora: BTreeMap<Option<u64>, Corpus> = BTreeMap::new();
    for (cell, seed, _) in &todo {
        let key = corpus_key(&cell.cfg, *seed);
        if !corpora.contains_key(&key) {
            let mut c = cell.cfg.clone();
            if let Some(s) = key {
                c.corpus.seed = s;
            }
            corpora.insert(key, Corpus::for_config(&c)?);
        }
    }

    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((cell, seed, dir)) = todo.get(i) else { break };
        if failure.lock().unwrap().is_some() {
            break;
        }
        let corpus = &corpora[&corpus_key(&cell.cfg, *seed)];
        match run_one(cell, *seed, corpus, dir) {
            Ok(r) => {
                if !ctx.quiet {
                    let auc = r.roc_auc.map_or("absent".to_string(), |v| format!("{v:.4}"));
                    eprintln!("[{}] seed {seed}: roc_auc {auc}", cell.label());
                }
            }
            Err(e) => {
                failure.lock().unwrap().get_or_insert(e);
                break;
            }
        }
    };
    if jobs <= 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }

    let mut summaries = Vec::with_capacity(cells.len());
    for cell in &cells {
        let reports = cfg
            .run
            .seeds
            .iter()
            .map(|&s| read_report(&run_dir(&ctx.out, cell, s).join("report.json")))
            .collect::<Result<Vec<_>>>()?;
        summaries.push(summarize(cell.index, cell.label(), &reports)?);
    }
    let hash = cfg.hash()?.hex();
    write_file(&ctx.out.join("summary.tsv"), summary_tsv(&summaries, &hash).as_bytes())?;
    write_file(&ctx.out.join("summary.txt"), summary_table(&summaries).as_bytes())?;
    if !ctx.quiet {
        eprint!("{}", summary_table(&summaries));
    }
    Ok(summaries)
}

fn corpus_key(cfg: &ExperimentConfig, seed: u64) -> Option<u64> {
    (cfg.run.resample_corpus && cfg.run.data_dir.is_none()).then_some(seed)
}

pub fn summary_tsv(rows: &[CellSummary], hash: &str) -> String {
    let mut s = format!("# config_hash={hash}\n");
    s.push_str(
        "cell\tsettings\truns\troc_auc_mean\troc_auc_std\tprecision_mean\tprecision_std\trecall_mean\trecall_std\taccuracy_mean\taccuracy_std\taverage_f1\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.index,
            r.label,
            r.runs,
            r.roc_auc.0,
            r.roc_auc.1,
            r.precision.0,
            r.precision.1,
            r.recall.0,
            r.recall.1,
            r.accuracy.0,
            r.accuracy.1,
            r.average_f1
        );
    }
    s
}

/// Percentages as `mean (std)`, one row per cell.
pub fn summary_table(rows: &[CellSummary]) -> String {
    let pct = |(m, sd): (f64, f64)| format!("{:.2} ({:.2})", 100.0 * m, 100.0 * sd);
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
    let mut s = format!(
        "{:<width$}  {:>15}  {:>15}  {:>15}  {:>10}\n",
        "setting", "ROC-AUC", "Precision", "Recall", "Avg F1"
    );
    for r in rows {
        let label = if r.label.is_empty() { "(base)" } else { &r.label };
        let _ = writeln!(
            s,
            "{:<width$}  {:>15}  {:>15}  {:>15}  {:>10.2}",
            label,
            pct(r.roc_auc),
            pct(r.precision),
            pct(r.recall),
            100.0 * r.average_f1
        );
    }
    s
}
