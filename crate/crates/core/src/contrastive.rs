//! Participant-level contrastive pre-training: pair sampling, projection
//! head, cosine/bilinear similarity and the batch contrastive loss.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ConfigHash, Graph, OptimizerConfig, OptimizerState, ParameterStore, Real, Tensor, Var};
use crate::encoder::{clip_batch, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::features::MelClip;
use crate::masking::{check_rate, generate_mask, MaskMatrix};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const HEAD_PREFIX: &str = "proj.";
pub const BILINEAR_NAME: &str = "sim.ws";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Cosine,
    #[default]
    Bilinear,
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityKind::Cosine => "cosine",
            SimilarityKind::Bilinear => "bilinear",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub metric: SimilarityKind,
    pub temperature: f64,
    /// Pairs per batch. Full-scale runs use 1024; the synthetic corpus has
    /// far fewer participants.
    pub batch_size: usize,
    pub mask_rate: f64,
    pub epochs: usize,
    /// Batches per epoch; by default enough to visit every participant once
    /// in expectation.
    pub steps_per_epoch: Option<usize>,
    /// Scale of the projection head's output-layer init relative to Xavier.
    pub head_init_gain: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            metric: SimilarityKind::Bilinear,
            temperature: 0.1,
            batch_size: 64,
            mask_rate: 0.5,
            epochs: 20,
            steps_per_epoch: None,
            head_init_gain: 0.05,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.head_init_gain > 0.0) {
            return Err(Error::InvalidConfig("head_init_gain must be positive".into()));
        }
        check_rate(self.mask_rate)
    }

    pub fn canonical(&self) -> String {
        format!(
            "contrastive/v1 metric={} tau={} batch={} mask_rate={} epochs={} steps={:?} head_gain={}",
            self.metric,
            self.temperature,
            self.batch_size,
            self.mask_rate,
            self.epochs,
            self.steps_per_epoch,
            self.head_init_gain
        )
    }
}

/// Similarity with its parameters, for scalar evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum SimilarityMetric {
    Cosine,
    /// Row-major `d x d` matrix.
    Bilinear { ws: Vec<f64>, d: usize },
}

impl SimilarityMetric {
    pub fn identity_bilinear(d: usize) -> Self {
        let mut ws = vec![0.0; d * d];
        for i in 0..d {
            ws[i * d + i] = 1.0;
        }
        SimilarityMetric::Bilinear { ws, d }
    }

    pub fn kind(&self) -> SimilarityKind {
        match self {
            SimilarityMetric::Cosine => SimilarityKind::Cosine,
            SimilarityMetric::Bilinear { .. } => SimilarityKind::Bilinear,
        }
    }

    /// Read the metric from a head store (`sim.ws` for bilinear).
    pub fn from_store<S: Real>(kind: SimilarityKind, store: &ParameterStore<S>) -> Result<Self> {
        match kind {
            SimilarityKind::Cosine => Ok(SimilarityMetric::Cosine),
            SimilarityKind::Bilinear => {
                let t = store
                    .get(BILINEAR_NAME)
                    .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter `{BILINEAR_NAME}`")))?;
                Ok(SimilarityMetric::Bilinear {
                    ws: t.to_f64(),
                    d: t.shape()[0],
                })
            }
        }
    }
}

/// Similarity of two vectors.
pub fn similarity(zi: &[f64], zj: &[f64], metric: &SimilarityMetric) -> Result<f64> {
    if zi.len() != zj.len() {
        return Err(Error::shape("similarity", format!("{} vs {}", zi.len(), zj.len())));
    }
    match metric {
        SimilarityMetric::Cosine => {
            let ni = zi.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nj = zj.iter().map(|v| v * v).sum::<f64>().sqrt();
            if ni == 0.0 || nj == 0.0 {
                return Err(Error::ZeroNorm);
            }
            Ok(zi.iter().zip(zj).map(|(a, b)| a * b).sum::<f64>() / (ni * nj))
        }
        SimilarityMetric::Bilinear { ws, d } => {
            if *d != zi.len() {
                return Err(Error::shape("bilinear similarity", format!("W_s is {d}x{d}, vectors {}", zi.len())));
            }
            let mut s = 0.0;
            for a in 0..*d {
                let row: f64 = (0..*d).map(|b| ws[a * d + b] * zj[b]).sum();
                s += zi[a] * row;
            }
            Ok(s)
        }
    }
}

/// `[n, n]` similarity matrix of the rows of `z: [n, d]`.
pub fn similarity_matrix<S: Real>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    z: Var,
    kind: SimilarityKind,
) -> Result<Var> {
    match kind {
        SimilarityKind::Cosine => {
            let zn = g.l2_normalize(z)?;
            g.matmul_t(zn, zn)
        }
        SimilarityKind::Bilinear => {
            let ws = g.param(store, BILINEAR_NAME)?;
            let zw = g.matmul(z, ws)?;
            g.matmul_t(zw, z)
        }
    }
}

/// Logits `sim / tau`.
pub fn logits<S: Real>(g: &mut Graph<S>, sim: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    g.scale(sim, S::of(1.0 / tau))
}

/// Positive of each clip when pairs are laid out `a0, b0, a1, b1, ...`.
pub fn adjacent_pairs(n_pairs: usize) -> Vec<usize> {
    (0..2 * n_pairs).map(|i| i ^ 1).collect()
}

/// Mean over anchors of `-log softmax_{k != i}(sim_ik / tau)[pair_index[i]]`.
pub fn contrastive_loss_graph<S: Real>(g: &mut Graph<S>, sim: Var, pair_index: &[usize], tau: f64) -> Result<Var> {
    let n = pair_index.len();
    if g.shape(sim) != [n, n] {
        return Err(Error::shape("contrastive loss", format!("similarity {:?} for {n} clips", g.shape(sim))));
    }
    if pair_index.iter().enumerate().any(|(i, &j)| j >= n || j == i) {
        return Err(Error::InvalidConfig("pair index must map each clip to another clip".into()));
    }
    let l = logits(g, sim, tau)?;
    let diag: Vec<bool> = (0..n * n).map(|k| k / n == k % n).collect();
    let l = g.masked_fill(l, &diag, S::neg_infinity())?;
    let lp = g.log_softmax(l, 1)?;
    let pos = g.gather(lp, pair_index)?;
    let m = g.mean_all(pos)?;
    g.scale(m, -S::one())
}

/// Loss of a set of projections under a fixed metric, in 64-bit.
pub fn contrastive_loss(z: &[Vec<f64>], pair_index: &[usize], metric: &SimilarityMetric, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let n = z.len();
    let d = z.first().map_or(0, Vec::len);
    if pair_index.len() != n {
        return Err(Error::shape("contrastive loss", format!("{} pair indices for {n} clips", pair_index.len())));
    }
    let mut g = Graph::<f64>::inference();
    let mut store = ParameterStore::new();
    if let SimilarityMetric::Bilinear { ws, d: wd } = metric {
        store.insert(BILINEAR_NAME, Tensor::new(&[*wd, *wd], ws.clone())?)?;
    }
    let zt = g.constant(Tensor::new(&[n, d], z.concat())?)?;
    let sim = similarity_matrix(&mut g, &store, zt, metric.kind()).map_err(|e| match e {
        Error::NonFiniteValue(_) => Error::ZeroNorm,
        other => other,
    })?;
    let loss = contrastive_loss_graph(&mut g, sim, pair_index, tau)?;
    Ok(g.value(loss).item())
}

/// Clip indices grouped by participant; participants with fewer than two
/// clips are excluded.
#[derive(Debug, Clone)]
pub struct ParticipantPools {
    pub participants: Vec<String>,
    pub pools: Vec<Vec<usize>>,
    pub excluded: Vec<String>,
}

impl ParticipantPools {
    pub fn from_clips(clips: &[MelClip]) -> Self {
        let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, c) in clips.iter().enumerate() {
            by.entry(c.participant_id.as_str()).or_default().push(i);
        }
        let mut out = ParticipantPools {
            participants: Vec::new(),
            pools: Vec::new(),
            excluded: Vec::new(),
        };
        for (p, pool) in by {
            if pool.len() >= 2 {
                out.participants.push(p.to_string());
                out.pools.push(pool);
            } else {
                out.excluded.push(p.to_string());
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.participants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participants.is_empty()
    }
}

/// `B` positive pairs from distinct participants.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    /// Index into [`ParticipantPools::participants`] per instance.
    pub participants: Vec<usize>,
    /// Clip indices `(a, b)` per instance.
    pub pairs: Vec<(usize, usize)>,
}

impl ContrastiveBatch {
    /// Clip indices laid out `a0, b0, a1, b1, ...`.
    pub fn flat(&self) -> Vec<usize> {
        self.pairs.iter().flat_map(|&(a, b)| [a, b]).collect()
    }
}

pub fn sample_batch<R: Rng + ?Sized>(pools: &ParticipantPools, b: usize, rng: &mut R) -> Result<ContrastiveBatch> {
    if b > pools.len() || b == 0 {
        return Err(Error::InsufficientParticipants {
            needed: b,
            available: pools.len(),
        });
    }
    let participants: Vec<usize> = index::sample(rng, pools.len(), b).into_vec();
    let pairs = participants
        .iter()
        .map(|&p| {
            let pool = &pools.pools[p];
            let two = index::sample(rng, pool.len(), 2);
            (pool[two.index(0)], pool[two.index(1)])
        })
        .collect();
    Ok(ContrastiveBatch { participants, pairs })
}

/// Projection head `d -> d -> d` with a rectifier, plus the bilinear matrix.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub d: usize,
    pub metric: SimilarityKind,
    /// Multiplies the Xavier bound of `w2`.
    pub out_gain: f64,
}

impl ProjectionHead {
    pub fn init_params<S: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<S>, rng: &mut R) -> Result<()> {
        let d = self.d;
        let a = (6.0 / (2 * d) as f64).sqrt();
        for (w, b, gain) in [("w1", "b1", 1.0), ("w2", "b2", self.out_gain)] {
            let a = a * gain;
            let data = (0..d * d).map(|_| S::of(rng.random_range(-a..a))).collect();
            store.insert(format!("{HEAD_PREFIX}{w}"), Tensor::new(&[d, d], data)?)?;
            store.insert(format!("{HEAD_PREFIX}{b}"), Tensor::zeros(&[d]))?;
        }
        if self.metric == SimilarityKind::Bilinear {
            let mut eye = vec![S::zero(); d * d];
            for i in 0..d {
                eye[i * d + i] = S::one();
            }
            store.insert(BILINEAR_NAME, Tensor::new(&[d, d], eye)?)?;
        }
        Ok(())
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, store: &ParameterStore<S>, h: Var) -> Result<Var> {
        let p = |g: &mut Graph<S>, s: &str| g.param(store, &format!("{HEAD_PREFIX}{s}"));
        let (w1, b1, w2, b2) = (p(g, "w1")?, p(g, "b1")?, p(g, "w2")?, p(g, "b2")?);
        let x = g.matmul(h, w1)?;
        let x = g.add(x, b1)?;
        let x = g.relu(x)?;
        let x = g.matmul(x, w2)?;
        g.add(x, b2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    /// Encoder weights under [`ENCODER_PREFIX`], tagged with the encoder
    /// config hash.
    pub encoder: ParameterStore<f32>,
    /// Projection head and bilinear matrix, tagged with the joint hash.
    pub head: ParameterStore<f32>,
    pub log: Vec<StepRecord>,
    pub excluded: Vec<String>,
}

/// Hash stored with the projection head: encoder and contrastive settings.
pub fn head_hash(enc: &EncoderConfig, cfg: &ContrastiveConfig) -> ConfigHash {
    ConfigHash::of(&format!("{}\n{}", enc.canonical(), cfg.canonical()))
}

/// Fresh mask per clip.
pub fn draw_masks<R: Rng + ?Sized>(n: usize, len: usize, rate: f64, rng: &mut R) -> Result<Vec<MaskMatrix>> {
    (0..n).map(|_| generate_mask(len, rate, rng)).collect()
}

/// Contrastive pre-training on `clips`. Labels are never read. `log`, when
/// given, receives one `step\tloss\tlr` line per step.
pub fn pretrain(
    clips: &[MelClip],
    enc_cfg: &EncoderConfig,
    cfg: &ContrastiveConfig,
    opt_cfg: &OptimizerConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<PretrainResult> {
    cfg.validate()?;
    let encoder = Encoder::new(enc_cfg.clone(), ENCODER_PREFIX)?;
    let head = ProjectionHead {
        d: enc_cfg.d_model,
        metric: cfg.metric,
        out_gain: cfg.head_init_gain,
    };
    let pools = ParticipantPools::from_clips(clips);
    if pools.len() < cfg.batch_size {
        return Err(Error::InsufficientParticipants {
            needed: cfg.batch_size,
            available: pools.len(),
        });
    }
    let t_w = clips[pools.pools[0][0]].n_frames();

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a4d_706c);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6472_6f70);

    let mut store = ParameterStore::<f32>::new();
    encoder.init_params(&mut store, &mut init_rng)?;
    head.init_params(&mut store, &mut init_rng)?;
    let mut opt = OptimizerState::new(&store, opt_cfg.clone())?;

    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| pools.len().div_ceil(cfg.batch_size))
        .max(1);
    let pair_index = adjacent_pairs(cfg.batch_size);
    let mut records = Vec::with_capacity(cfg.epochs * steps);
    for _epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = sample_batch(&pools, cfg.batch_size, &mut sample_rng)?;
            let chosen: Vec<&MelClip> = batch.flat().into_iter().map(|i| &clips[i]).collect();
            let masks = draw_masks(chosen.len(), t_w, cfg.mask_rate, &mut mask_rng)?;
            let mut g = Graph::<f32>::new();
            let x = g.constant(clip_batch(&chosen)?)?;
            let h = encoder.forward(&mut g, &store, x, &masks, true, &mut drop_rng)?;
            let z = head.forward(&mut g, &store, h)?;
            let sim = similarity_matrix(&mut g, &store, z, cfg.metric)?;
            let loss = contrastive_loss_graph(&mut g, sim, &pair_index, cfg.temperature)?;
            let value = g.value(loss).item() as f64;
            g.backward(loss, &mut store)?;
            opt.adam_step(&mut store)?;
            let rec = StepRecord {
                step: opt.step_count(),
                loss: value,
                lr: opt.lr(),
            };
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}\t{}\t{}", rec.step, rec.loss, rec.lr).map_err(|e| Error::io("<training log>", e))?;
            }
            records.push(rec);
            total += value;
        }
        opt.plateau_decay(total / steps as f64);
    }

    let mut enc_store = store.extract_prefix(ENCODER_PREFIX, ENCODER_PREFIX);
    enc_store.set_config_hash(enc_cfg.config_hash());
    enc_store.set_phase("pretrain");
    let mut head_store = store.extract_prefix(HEAD_PREFIX, HEAD_PREFIX);
    if let Some(ws) = store.get(BILINEAR_NAME) {
        head_store.insert(BILINEAR_NAME, ws.clone().detached())?;
    }
    head_store.set_config_hash(head_hash(enc_cfg, cfg));
    head_store.set_phase("pretrain-head");
    Ok(PretrainResult {
        encoder: enc_store,
        head: head_store,
        log: records,
        excluded: pools.excluded,
    })
}

/// Encode clips in inference mode, `batch` at a time, drawing a fresh mask
/// per clip at `mask_rate`.
pub fn encode_clips<S: Real, R: Rng + ?Sized>(
    encoder: &Encoder,
    store: &ParameterStore<S>,
    clips: &[&MelClip],
    mask_rate: f64,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    encoder.check(store)?;
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch.max(1)) {
        let masks = draw_masks(chunk.len(), chunk[0].n_frames(), mask_rate, rng)?;
        let mut g = Graph::<S>::inference();
        let x = g.constant(clip_batch(chunk)?)?;
        let h = encoder.forward(&mut g, store, x, &masks, false, rng)?;
        let d = encoder.cfg.d_model;
        out.extend(g.value(h).to_f64().chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Mean similarity of same-participant pairs minus mean similarity of
/// different-participant pairs, over all unordered pairs.
pub fn similarity_gap(vectors: &[Vec<f64>], participants: &[&str], metric: &SimilarityMetric) -> Result<f64> {
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let s = 0.5 * (similarity(&vectors[i], &vectors[j], metric)? + similarity(&vectors[j], &vectors[i], metric)?);
            if participants[i] == participants[j] {
                within += s;
                nw += 1;
            } else {
                between += s;
                nb += 1;
            }
        }
    }
    if nw == 0 || nb == 0 {
        return Err(Error::EmptyList);
    }
    Ok(within / nw as f64 - between / nb as f64)
}
