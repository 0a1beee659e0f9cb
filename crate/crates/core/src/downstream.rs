//! Supervised classification on top of one encoder or a two-branch ensemble,
//! with optional transfer of pre-trained encoder weights.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{draw_masks, ENCODER_PREFIX};
use crate::diffcore::{sigmoid, ConfigHash, Graph, OptimizerConfig, OptimizerState, ParameterStore, Tensor, Var};
use crate::encoder::{clip_batch, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::features::MelClip;
use crate::masking::check_rate;

pub const BRANCH_PREFIXES: [&str; 2] = ["branch1.", "branch2."];
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    #[default]
    Single,
    Ensemble,
}

impl Arch {
    pub fn branches(self) -> usize {
        match self {
            Arch::Single => 1,
            Arch::Ensemble => 2,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Single => "single",
            Arch::Ensemble => "ensemble",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub arch: Arch,
    /// Masking rate applied inside each branch, in training and at test time.
    pub mask_rate: f64,
    pub freeze_encoder: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a lower validation loss.
    pub early_stop_patience: usize,
    /// Weight positive clips by `n_negative / n_positive` in the loss.
    pub class_weighting: bool,
    pub threshold: f64,
    pub aggregation: Aggregation,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            arch: Arch::Single,
            mask_rate: 0.0,
            freeze_encoder: false,
            batch_size: 128,
            max_epochs: 100,
            early_stop_patience: 15,
            class_weighting: false,
            threshold: 0.5,
            aggregation: Aggregation::Mean,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        check_rate(self.mask_rate)?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!("threshold {} not in (0, 1)", self.threshold)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Classifier: one or two encoders and a sigmoid output over their
/// concatenated representations.
#[derive(Debug, Clone)]
pub struct DownstreamModel {
    pub encoder_cfg: EncoderConfig,
    pub cfg: DownstreamConfig,
    pub store: ParameterStore<f32>,
}

impl DownstreamModel {
    /// Randomly initialised model; ensemble branches get independent weights.
    pub fn new(encoder_cfg: EncoderConfig, cfg: DownstreamConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for prefix in &BRANCH_PREFIXES[..cfg.arch.branches()] {
            Encoder::new(encoder_cfg.clone(), *prefix)?.init_params(&mut store, &mut rng)?;
        }
        let width = encoder_cfg.d_model * cfg.arch.branches();
        let a = (6.0 / (width + 1) as f64).sqrt();
        let w = (0..width).map(|_| rng.random_range(-a..a) as f32).collect();
        store.insert(HEAD_W, Tensor::new(&[width, 1], w)?)?;
        store.insert(HEAD_B, Tensor::zeros(&[1]))?;
        let mut m = DownstreamModel { encoder_cfg, cfg, store };
        m.store.set_config_hash(m.config_hash());
        m.store.set_phase("finetune");
        Ok(m)
    }

    /// Architecture hash: encoder config plus branch count, masking and threshold.
    pub fn config_hash(&self) -> ConfigHash {
        ConfigHash::of(&format!(
            "{}\ndownstream/v1 arch={} mask_rate={} threshold={}",
            self.encoder_cfg.canonical(),
            self.cfg.arch,
            self.cfg.mask_rate,
            self.cfg.threshold
        ))
    }

    pub fn encoder(&self, branch: usize) -> Result<Encoder> {
        Encoder::new(self.encoder_cfg.clone(), BRANCH_PREFIXES[branch])
    }

    /// Copy pre-trained encoder weights into every branch. Fails with
    /// `ConfigMismatch` unless the file was written for this encoder config.
    pub fn transfer(&mut self, pretrained: &ParameterStore<f32>) -> Result<()> {
        let expected = self.encoder_cfg.config_hash();
        if pretrained.config_hash() != expected {
            return Err(Error::ConfigMismatch(format!(
                "pre-trained weights have config hash {}, encoder config gives {}",
                pretrained.config_hash().short(),
                expected.short()
            )));
        }
        for prefix in &BRANCH_PREFIXES[..self.cfg.arch.branches()] {
            let renamed = pretrained.extract_prefix(ENCODER_PREFIX, prefix);
            self.encoder_store_check(&renamed, prefix)?;
            self.store.copy_values_from(&renamed)?;
        }
        Ok(())
    }

    fn encoder_store_check(&self, s: &ParameterStore<f32>, prefix: &str) -> Result<()> {
        Encoder::new(self.encoder_cfg.clone(), prefix)?.check(s)
    }

    pub fn transfer_from_file(&mut self, path: &Path) -> Result<()> {
        let pre = ParameterStore::load_checked(path, self.encoder_cfg.config_hash())?;
        self.transfer(&pre)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load(path: &Path, encoder_cfg: EncoderConfig, cfg: DownstreamConfig) -> Result<Self> {
        cfg.validate()?;
        let probe = DownstreamModel {
            encoder_cfg,
            cfg,
            store: ParameterStore::new(),
        };
        let store = ParameterStore::load_checked(path, probe.config_hash())?;
        let m = DownstreamModel { store, ..probe };
        for b in 0..m.cfg.arch.branches() {
            m.encoder(b)?.check(&m.store)?;
        }
        Ok(m)
    }

    /// Per-branch representations `[B, d]` for a batch input.
    pub fn branch_outputs<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<f32>,
        x: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        let shape = g.shape(x).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(2);
        for branch in 0..self.cfg.arch.branches() {
            let masks = draw_masks(b, t, self.cfg.mask_rate, rng)?;
            out.push(self.encoder(branch)?.forward(g, &self.store, x, &masks, train, rng)?);
        }
        Ok(out)
    }

    /// Logits `[B]` from branch representations, concatenated branch 1 first.
    pub fn head_logits(&self, g: &mut Graph<f32>, reps: &[Var]) -> Result<Var> {
        let h = if reps.len() == 1 { reps[0] } else { g.concat(reps, 1)? };
        let w = g.param(&self.store, HEAD_W)?;
        let bias = g.param(&self.store, HEAD_B)?;
        let l = g.matmul(h, w)?;
        let l = g.add(l, bias)?;
        let n = g.shape(l)[0];
        g.reshape(l, &[n])
    }

    /// Probabilities for a batch of clips.
    pub fn predict_batch<R: Rng + ?Sized>(&self, clips: &[&MelClip], rng: &mut R) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(self.cfg.batch_size) {
            let mut g = Graph::<f32>::inference();
            let x = g.constant(clip_batch(chunk)?)?;
            let reps = self.branch_outputs(&mut g, x, false, rng)?;
            let l = self.head_logits(&mut g, &reps)?;
            out.extend(g.value(l).data().iter().map(|&v| sigmoid(v as f64)));
        }
        Ok(out)
    }

    pub fn predict<R: Rng + ?Sized>(&self, clip: &MelClip, rng: &mut R) -> Result<f64> {
        Ok(self.predict_batch(&[clip], rng)?[0])
    }

    pub fn decide(&self, probability: f64) -> bool {
        probability > self.cfg.threshold
    }

    /// Names of every encoder tensor in the store.
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.store
            .names()
            .filter(|n| BRANCH_PREFIXES.iter().any(|p| n.starts_with(p)))
            .map(String::from)
            .collect()
    }
}

pub fn aggregate_participant(probs: &[f64], method: Aggregation) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyList);
    }
    Ok(match method {
        Aggregation::Mean => probs.iter().sum::<f64>() / probs.len() as f64,
        Aggregation::Max => probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    /// Weights from the epoch with the lowest validation loss.
    pub model: DownstreamModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn targets(clips: &[&MelClip], split: &str) -> Result<Vec<f64>> {
    clips
        .iter()
        .map(|c| {
            c.label.map(|l| if l { 1.0 } else { 0.0 }).ok_or_else(|| {
                Error::InvalidConfig(format!("unlabelled clip from `{}` in {split} split", c.participant_id))
            })
        })
        .collect()
}

/// Where training batches come from: clips through the encoders, or fixed
/// representation rows fed straight to the head.
enum Source<'a> {
    Clips { train: Vec<&'a MelClip>, val: Vec<&'a MelClip> },
    Features { train: Tensor<f32>, val: Tensor<f32> },
}

/// Binary cross-entropy training with validation-driven plateau decay, early
/// stopping and best-checkpoint retention. `log` receives one
/// `epoch\ttrain_loss\tval_loss\tlr` line per epoch.
pub fn finetune(
    model: DownstreamModel,
    train: &[MelClip],
    val: &[MelClip],
    opt_cfg: &OptimizerConfig,
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<FinetuneResult> {
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    let train: Vec<&MelClip> = train.iter().collect();
    let val: Vec<&MelClip> = val.iter().collect();
    let y_train = targets(&train, "train")?;
    let y_val = targets(&val, "val")?;
    // a frozen encoder without masking is a fixed feature map
    let source = if model.cfg.freeze_encoder && model.cfg.mask_rate == 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Source::Features {
            train: representations(&model, &train, &mut rng)?,
            val: representations(&model, &val, &mut rng)?,
        }
    } else {
        Source::Clips { train, val }
    };
    run_training(model, source, &y_train, &y_val, opt_cfg, seed, log)
}

/// Train only the head on fixed `[n, width]` representations, as a frozen
/// encoder would produce them.
pub fn finetune_on_features(
    model: DownstreamModel,
    train: Tensor<f32>,
    y_train: &[bool],
    val: Tensor<f32>,
    y_val: &[bool],
    opt_cfg: &OptimizerConfig,
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<FinetuneResult> {
    let width = model.encoder_cfg.d_model * model.cfg.arch.branches();
    for (t, y, name) in [(&train, y_train, "train"), (&val, y_val, "val")] {
        if y.is_empty() {
            return Err(Error::EmptySplit(name.into()));
        }
        if t.shape() != [y.len(), width] {
            return Err(Error::shape(
                "finetune_on_features",
                format!("{name} features {:?} for {} labels of width {width}", t.shape(), y.len()),
            ));
        }
    }
    let model = DownstreamModel {
        cfg: DownstreamConfig {
            freeze_encoder: true,
            ..model.cfg
        },
        ..model
    };
    let to_f = |y: &[bool]| y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    run_training(model, Source::Features { train, val }, &to_f(y_train), &to_f(y_val), opt_cfg, seed, log)
}

/// Concatenated branch representations `[n, width]`, inference mode.
pub fn representations<R: Rng + ?Sized>(model: &DownstreamModel, clips: &[&MelClip], rng: &mut R) -> Result<Tensor<f32>> {
    let mut rows = Vec::new();
    for chunk in clips.chunks(model.cfg.batch_size) {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(clip_batch(chunk)?)?;
        let r = model.branch_outputs(&mut g, x, false, rng)?;
        let h = if r.len() == 1 { r[0] } else { g.concat(&r, 1)? };
        rows.extend_from_slice(g.value(h).data());
    }
    let width = model.encoder_cfg.d_model * model.cfg.arch.branches();
    Tensor::new(&[clips.len(), width], rows)
}

fn feature_rows(feats: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let width = feats.shape()[1];
    let mut rows = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        rows.extend_from_slice(&feats.data()[i * width..(i + 1) * width]);
    }
    Tensor::new(&[idx.len(), width], rows)
}

fn run_training(
    mut model: DownstreamModel,
    source: Source<'_>,
    y_train: &[f64],
    y_val: &[f64],
    opt_cfg: &OptimizerConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<FinetuneResult> {
    let pos_weight = if model.cfg.class_weighting {
        let pos = y_train.iter().filter(|&&y| y > 0.5).count();
        let neg = y_train.len() - pos;
        if pos == 0 {
            1.0
        } else {
            neg as f64 / pos as f64
        }
    } else {
        1.0
    };
    let freeze = model.cfg.freeze_encoder;
    let trainable: Vec<String> = if freeze {
        vec![HEAD_W.to_string(), HEAD_B.to_string()]
    } else {
        model.store.names().map(String::from).collect()
    };
    let mut opt = OptimizerState::for_params(&model.store, trainable, opt_cfg.clone())?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f72_6472);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);

    let logits = |m: &DownstreamModel, g: &mut Graph<f32>, idx: &[usize], train: bool, rng: &mut ChaCha8Rng| {
        match &source {
            Source::Features { train: ft, val: fv } => {
                let h = g.constant(feature_rows(if train { ft } else { fv }, idx)?)?;
                m.head_logits(g, &[h])
            }
            Source::Clips { train: ct, val: cv } => {
                let pool = if train { ct } else { cv };
                let chunk: Vec<&MelClip> = idx.iter().map(|&i| pool[i]).collect();
                let x = g.constant(clip_batch(&chunk)?)?;
                let reps = m.branch_outputs(g, x, train && !freeze, rng)?;
                m.head_logits(g, &reps)
            }
        }
    };

    let mut best = (f64::INFINITY, model.store.clone(), 0usize);
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..y_train.len()).collect();
    let val_idx: Vec<usize> = (0..y_val.len()).collect();
    for epoch in 1..=model.cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for idx in order.chunks(model.cfg.batch_size) {
            let mut g = Graph::<f32>::new();
            if freeze {
                for p in BRANCH_PREFIXES {
                    g.freeze_prefix(p);
                }
            }
            let l = logits(&model, &mut g, idx, true, &mut mask_rng)?;
            let y: Vec<f64> = idx.iter().map(|&i| y_train[i]).collect();
            let loss = g.bce_with_logits(l, &y, pos_weight)?;
            total += g.value(loss).item() as f64 * idx.len() as f64;
            g.backward(loss, &mut model.store)?;
            opt.adam_step(&mut model.store)?;
        }
        let train_loss = total / y_train.len() as f64;

        let mut val_total = 0.0;
        for idx in val_idx.chunks(model.cfg.batch_size) {
            let mut g = Graph::<f32>::inference();
            let l = logits(&model, &mut g, idx, false, &mut mask_rng)?;
            let y: Vec<f64> = idx.iter().map(|&i| y_val[i]).collect();
            let loss = g.bce_with_logits(l, &y, pos_weight)?;
            val_total += g.value(loss).item() as f64 * idx.len() as f64;
        }
        let val_loss = val_total / y_val.len() as f64;
        opt.plateau_decay(val_loss);
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: opt.lr(),
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}\t{}\t{}\t{}", rec.epoch, rec.train_loss, rec.val_loss, rec.lr)
                .map_err(|e| Error::io("<training log>", e))?;
        }
        history.push(rec);
        if val_loss < best.0 {
            best = (val_loss, model.store.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= model.cfg.early_stop_patience {
                break;
            }
        }
    }
    model.store = best.1;
    model.store.zero_grad();
    Ok(FinetuneResult {
        model,
        history,
        best_epoch: best.2,
    })
}
