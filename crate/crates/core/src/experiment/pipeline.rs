use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ExperimentConfig;
use crate::contrastive::{encode_clips, pretrain, similarity_gap, PretrainResult, SimilarityMetric, ENCODER_PREFIX};
use crate::diffcore::ParameterStore;
use crate::downstream::{finetune, DownstreamModel, FinetuneResult};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::evalbench::{compute_metrics, synthetic_clips, EvalReport};
use crate::features::{load_manifest, ClipSet, MelClip, Split};

/// Clips of a corpus tagged with their split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub clips: Vec<(Split, MelClip)>,
}

impl Corpus {
    /// The corpus in `run.data_dir`, or the configured synthetic corpus
    /// generated in memory.
    pub fn for_config(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.run.data_dir {
            Some(dir) => Self::load(dir, cfg),
            None => Ok(Corpus {
                clips: synthetic_clips(&cfg.corpus, &cfg.features)?,
            }),
        }
    }

    pub fn load(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let manifest = load_manifest(&dir.join("manifest.tsv"))?;
        let mut clips = Vec::new();
        for split in [Split::Train, Split::Val, Split::Test, Split::Unlabeled] {
            let set = ClipSet::load(&manifest, dir, &cfg.features, |e| e.split == split)?;
            clips.extend(set.clips.into_iter().map(|c| (split, c)));
        }
        Ok(Corpus { clips })
    }

    pub fn split(&self, split: Split) -> Vec<&MelClip> {
        self.clips.iter().filter(|(s, _)| *s == split).map(|(_, c)| c).collect()
    }

    /// Unlabeled and training clips with labels removed.
    pub fn pretraining_clips(&self) -> Vec<MelClip> {
        self.clips
            .iter()
            .filter(|(s, _)| matches!(s, Split::Unlabeled | Split::Train))
            .map(|(_, c)| {
                let mut c = c.clone();
                c.label = None;
                c
            })
            .collect()
    }
}

/// Clips of a stratified random `fraction` of the participants in `clips`,
/// at least one per class present.
pub fn labeled_subset(clips: &[&MelClip], fraction: f64, seed: u64) -> Result<Vec<MelClip>> {
    let mut by_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for c in clips {
        let y = c
            .label
            .ok_or_else(|| Error::InvalidConfig(format!("unlabelled clip from `{}`", c.participant_id)))?;
        let list = &mut by_class[y as usize];
        if !list.contains(&c.participant_id.as_str()) {
            list.push(&c.participant_id);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6275_6467);
    let mut keep: Vec<&str> = Vec::new();
    for mut ids in by_class {
        if ids.is_empty() {
            continue;
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len());
        keep.extend(&ids[..n]);
    }
    Ok(clips
        .iter()
        .filter(|c| keep.contains(&c.participant_id.as_str()))
        .map(|c| (*c).clone())
        .collect())
}

pub fn pretrain_run(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<PretrainResult> {
    let clips = corpus.pretraining_clips();
    pretrain(&clips, &cfg.encoder, &cfg.contrastive, &cfg.pretrain_optimizer, seed, log)
}

/// Fine-tune on the labeled budget of the training split, starting from
/// `pretrained` encoder weights or from scratch.
pub fn finetune_run(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    seed: u64,
    pretrained: Option<&ParameterStore<f32>>,
    log: Option<&mut dyn Write>,
) -> Result<FinetuneResult> {
    let train = labeled_subset(&corpus.split(Split::Train), cfg.run.labeled_fraction, seed)?;
    let val: Vec<MelClip> = corpus.split(Split::Val).into_iter().cloned().collect();
    let mut model = DownstreamModel::new(cfg.encoder.clone(), cfg.downstream.clone(), seed)?;
    if let Some(p) = pretrained {
        model.transfer(p)?;
    }
    finetune(model, &train, &val, &cfg.optimizer, seed, log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub source_id: String,
    pub participant_id: String,
    pub label: Option<bool>,
    pub probability: f64,
    pub decision: bool,
}

/// Clip-level predictions and metrics. Test-time masks come from `seed`.
pub fn evaluate_model(model: &DownstreamModel, clips: &[&MelClip], seed: u64) -> Result<(EvalReport, Vec<Prediction>)> {
    if clips.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7374);
    let probs = model.predict_batch(clips, &mut rng)?;
    let preds: Vec<Prediction> = clips
        .iter()
        .zip(&probs)
        .map(|(c, &p)| Prediction {
            source_id: format!("{}@{}", c.source_id, c.start_frame),
            participant_id: c.participant_id.clone(),
            label: c.label,
            probability: p,
            decision: model.decide(p),
        })
        .collect();
    let scored: Vec<(f64, bool)> = preds
        .iter()
        .map(|p| {
            p.label
                .map(|y| (p.probability, y))
                .ok_or_else(|| Error::InvalidConfig(format!("unlabelled clip `{}` in evaluation", p.source_id)))
        })
        .collect::<Result<_>>()?;
    let mut report = compute_metrics(&scored, model.cfg.threshold)?;
    report.run_seed = seed;
    report.config_hash = model.config_hash().hex();
    Ok((report, preds))
}

/// Cosine similarity gap (within minus between participant) of unmasked
/// encoder outputs on `clips`.
pub fn encoder_similarity_gap(
    cfg: &ExperimentConfig,
    encoder_store: &ParameterStore<f32>,
    clips: &[&MelClip],
) -> Result<f64> {
    let enc = Encoder::new(cfg.encoder.clone(), ENCODER_PREFIX)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = encode_clips(&enc, encoder_store, clips, 0.0, 128, &mut rng)?;
    let ids: Vec<&str> = clips.iter().map(|c| c.participant_id.as_str()).collect();
    similarity_gap(&h, &ids, &SimilarityMetric::Cosine)
}

/// One pre-train (optional) and fine-tune run scored on the test split.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub pretrain: Option<PretrainResult>,
    pub finetune: FinetuneResult,
}

pub fn full_run(cfg: &ExperimentConfig, corpus: &Corpus, seed: u64, use_pretraining: bool) -> Result<RunOutcome> {
    let pre = if use_pretraining {
        Some(pretrain_run(cfg, corpus, seed, None)?)
    } else {
        None
    };
    let ft = finetune_run(cfg, corpus, seed, pre.as_ref().map(|p| &p.encoder), None)?;
    let (report, _) = evaluate_model(&ft.model, &corpus.split(Split::Test), seed)?;
    Ok(RunOutcome {
        report,
        pretrain: pre,
        finetune: ft,
    })
}
