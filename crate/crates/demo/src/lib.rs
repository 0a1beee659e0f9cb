//! WebAssembly bindings for the static demo page in `www/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use respcl::contrastive::{adjacent_pairs, contrastive_loss, similarity, SimilarityMetric};
use respcl::diffcore::{Graph, ParameterStore};
use respcl::encoder::{clip_batch, Encoder, EncoderConfig};
use respcl::features::{compute_logmel, FeatureConfig, MelClip, RawAudio};
use respcl::masking::generate_mask;
use wasm_bindgen::prelude::*;

fn js(e: respcl::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Spectrogram {
    n_bins: usize,
    n_frames: usize,
    values: Vec<f32>,
}

#[wasm_bindgen]
impl Spectrogram {
    #[wasm_bindgen(getter)]
    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    #[wasm_bindgen(getter)]
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// Bin-major log energies.
    pub fn values(&self) -> Vec<f32> {
        self.values.clone()
    }

    /// Bin with the highest mean log energy.
    pub fn peak_bin(&self) -> usize {
        (0..self.n_bins)
            .max_by(|&a, &b| self.bin_mean(a).total_cmp(&self.bin_mean(b)))
            .unwrap_or(0)
    }

    fn bin_mean(&self, b: usize) -> f32 {
        let row = &self.values[b * self.n_frames..(b + 1) * self.n_frames];
        row.iter().sum::<f32>() / self.n_frames as f32
    }
}

/// Half a second of a sine plus white noise at 16 kHz.
pub fn tone_spectrogram(freq_hz: f64, amplitude: f64, noise_level: f64, seed: u32) -> respcl::Result<Spectrogram> {
    let cfg = FeatureConfig::default();
    let sr = cfg.sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let samples = (0..8000)
        .map(|i| {
            let s = amplitude * (2.0 * std::f64::consts::PI * freq_hz * i as f64 / sr).sin();
            (s + noise_level * rng.random_range(-1.0..1.0)) as f32
        })
        .collect();
    let mel = compute_logmel(&RawAudio::new(samples, cfg.sample_rate, "tone")?, &cfg)?;
    Ok(Spectrogram {
        n_bins: mel.n_bins(),
        n_frames: mel.n_frames(),
        values: mel.values().to_vec(),
    })
}

#[wasm_bindgen]
pub fn tone_logmel(freq_hz: f64, amplitude: f64, noise_level: f64, seed: u32) -> Result<Spectrogram, JsError> {
    tone_spectrogram(freq_hz, amplitude, noise_level, seed).map_err(js)
}

#[wasm_bindgen]
pub struct AttentionMap {
    len: usize,
    probs: Vec<f32>,
    masked: Vec<u8>,
}

#[wasm_bindgen]
impl AttentionMap {
    #[wasm_bindgen(getter)]
    pub fn len(&self) -> usize {
        self.len
    }

    /// Row-major `len x len` weights: row = query, column = key.
    pub fn probs(&self) -> Vec<f32> {
        self.probs.clone()
    }

    /// 1 where the time step is masked.
    pub fn masked(&self) -> Vec<u8> {
        self.masked.clone()
    }
}

pub const DEMO_STEPS: usize = 24;

/// First-layer, first-head attention of a small randomly initialised encoder
/// over a random clip, with a fresh mask at `mask_rate`.
pub fn attention_weights(mask_rate: f64, seed: u32) -> respcl::Result<AttentionMap> {
    let cfg = EncoderConfig {
        input_dim: 16,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 32,
        dropout: 0.0,
        ..Default::default()
    };
    let t = DEMO_STEPS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let enc = Encoder::new(cfg, "enc.")?;
    let mut store = ParameterStore::<f64>::new();
    enc.init_params(&mut store, &mut rng)?;
    let clip = MelClip::new((0..16 * t).map(|_| rng.random_range(-2.0..2.0)).collect(), 16, t)?;
    let mask = generate_mask(t, mask_rate, &mut rng)?;
    let mut g = Graph::<f64>::inference();
    let x = g.constant(clip_batch(&[&clip])?)?;
    let (_, trace) = enc.forward_transformer(&mut g, &store, x, std::slice::from_ref(&mask), false, &mut rng)?;
    let head0 = &g.value(trace.attention[0]).data()[..t * t];
    Ok(AttentionMap {
        len: t,
        probs: head0.iter().map(|&p| p as f32).collect(),
        masked: (0..t).map(|i| mask.is_masked(i) as u8).collect(),
    })
}

#[wasm_bindgen]
pub fn attention_map(mask_rate: f64, seed: u32) -> Result<AttentionMap, JsError> {
    attention_weights(mask_rate, seed).map_err(js)
}

#[wasm_bindgen]
pub struct LossView {
    loss: f64,
    chance: f64,
    n: usize,
    sims: Vec<f32>,
}

#[wasm_bindgen]
impl LossView {
    #[wasm_bindgen(getter)]
    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// `log(2B - 1)`, the loss when every similarity is equal.
    #[wasm_bindgen(getter)]
    pub fn chance(&self) -> f64 {
        self.chance
    }

    #[wasm_bindgen(getter)]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Row-major `n x n` similarities, clips ordered `a0, b0, a1, b1, ...`.
    pub fn sims(&self) -> Vec<f32> {
        self.sims.clone()
    }
}

/// Contrastive loss of `pairs` synthetic pairs. Each pair shares a centre
/// drawn with scale `spread`; each clip adds noise of scale `noise`.
pub fn contrastive_view(
    pairs: usize,
    spread: f64,
    noise: f64,
    tau: f64,
    bilinear: bool,
    seed: u32,
) -> respcl::Result<LossView> {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let mut z = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        let centre: Vec<f64> = (0..d).map(|_| 1.0 + spread * rng.random_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            z.push(centre.iter().map(|c| c + noise * rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
        }
    }
    let metric = if bilinear {
        SimilarityMetric::identity_bilinear(d)
    } else {
        SimilarityMetric::Cosine
    };
    let loss = contrastive_loss(&z, &adjacent_pairs(pairs), &metric, tau)?;
    let mut sims = Vec::with_capacity(z.len() * z.len());
    for a in &z {
        for b in &z {
            sims.push(similarity(a, b, &metric)? as f32);
        }
    }
    Ok(LossView {
        loss,
        chance: ((2 * pairs - 1) as f64).ln(),
        n: z.len(),
        sims,
    })
}

#[wasm_bindgen]
pub fn contrastive_demo(
    pairs: usize,
    spread: f64,
    noise: f64,
    tau: f64,
    bilinear: bool,
    seed: u32,
) -> Result<LossView, JsError> {
    contrastive_view(pairs, spread, noise, tau, bilinear, seed).map_err(js)
}
