//! Clip encoder: a masked Transformer over time steps (each step is one
//! frame of `input_dim` mel bins) mean-pooled to a `d_model` vector, plus a
//! gated-recurrent baseline that returns its final hidden state.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ConfigHash, Graph, ParameterStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::MelClip;
use crate::masking::MaskMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Transformer,
    Recurrent,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Transformer => "transformer",
            EncoderKind::Recurrent => "recurrent",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Mel bins per time step.
    pub input_dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub positional_encoding: bool,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Transformer,
            input_dim: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            dropout: 0.2,
            positional_encoding: true,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_dim == 0 || self.d_model == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if self.kind == EncoderKind::Transformer {
            if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
                return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
            }
            if self.ffn_dim == 0 {
                return bad("ffn_dim must be positive".into());
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Canonical text covering every field that shapes the weights or the
    /// forward pass.
    pub fn canonical(&self) -> String {
        format!(
            "encoder/v1 kind={} input_dim={} d_model={} n_layers={} n_heads={} ffn_dim={} dropout={} pe={} ln_eps={}",
            self.kind,
            self.input_dim,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.ffn_dim,
            self.dropout,
            self.positional_encoding,
            self.layer_norm_eps
        )
    }

    pub fn config_hash(&self) -> ConfigHash {
        ConfigHash::of(&self.canonical())
    }

}

/// Encoded clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub h: Vec<f64>,
}

/// Intermediate values of one transformer forward pass.
#[derive(Debug, Default, Clone)]
pub struct EncoderTrace {
    /// `[B, H, T, T]` attention probabilities per layer.
    pub attention: Vec<Var>,
    /// `[B, T, d]` attention sub-layer outputs (after the output projection).
    pub attention_out: Vec<Var>,
    /// `[B, T, d]` per-position outputs of each layer.
    pub layer_out: Vec<Var>,
}

/// Parameter naming and forward passes for one encoder instance whose
/// weights live under `prefix` in a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
}

fn xavier<S: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| S::of(rng.random_range(-a..a))).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("xavier shape")
}

fn ones<S: Real>(n: usize) -> Tensor<S> {
    Tensor::new(&[n], vec![S::one(); n]).expect("ones")
}

/// Fixed sinusoidal encoding, `[len, d]`.
pub fn sinusoidal_positions<S: Real>(len: usize, d: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = S::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[len, d], data).expect("pe shape")
}

/// Stack clips into a time-major `[B, T, N]` tensor.
pub fn clip_batch<S: Real>(clips: &[&MelClip]) -> Result<Tensor<S>> {
    let first = clips.first().ok_or(Error::EmptyList)?;
    let (n, t) = (first.n_bins(), first.n_frames());
    let mut data = Vec::with_capacity(clips.len() * n * t);
    for c in clips {
        if (c.n_bins(), c.n_frames()) != (n, t) {
            return Err(Error::shape(
                "clip batch",
                format!("{}x{} vs {}x{}", c.n_bins(), c.n_frames(), n, t),
            ));
        }
        data.extend(c.time_major().into_iter().map(|v| S::of(v as f64)));
    }
    Tensor::new(&[clips.len(), t, n], data)
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Encoder {
            cfg,
            prefix: prefix.into(),
        })
    }

    fn name(&self, s: &str) -> String {
        format!("{}{}", self.prefix, s)
    }

    /// Every parameter name with its expected shape.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.cfg;
        let (n, d) = (c.input_dim, c.d_model);
        let mut v = Vec::new();
        match c.kind {
            EncoderKind::Transformer => {
                v.push((self.name("input.w"), vec![n, d]));
                v.push((self.name("input.b"), vec![d]));
                for l in 0..c.n_layers {
                    let p = |s: &str| self.name(&format!("layers.{l}.{s}"));
                    for w in ["wq", "wk", "wv", "wo"] {
                        v.push((p(&format!("attn.{w}")), vec![d, d]));
                    }
                    for b in ["bq", "bk", "bv", "bo"] {
                        v.push((p(&format!("attn.{b}")), vec![d]));
                    }
                    v.push((p("ln1.g"), vec![d]));
                    v.push((p("ln1.b"), vec![d]));
                    v.push((p("ffn.w1"), vec![d, c.ffn_dim]));
                    v.push((p("ffn.b1"), vec![c.ffn_dim]));
                    v.push((p("ffn.w2"), vec![c.ffn_dim, d]));
                    v.push((p("ffn.b2"), vec![d]));
                    v.push((p("ln2.g"), vec![d]));
                    v.push((p("ln2.b"), vec![d]));
                }
            }
            EncoderKind::Recurrent => {
                v.push((self.name("gru.wx"), vec![n, 3 * d]));
                v.push((self.name("gru.wh"), vec![d, 3 * d]));
                v.push((self.name("gru.bx"), vec![3 * d]));
                v.push((self.name("gru.bh"), vec![3 * d]));
            }
        }
        v
    }

    /// Xavier-uniform weight matrices, zero biases, unit layer-norm gains.
    pub fn init_params<S: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<S>, rng: &mut R) -> Result<()> {
        for (name, shape) in self.param_shapes() {
            let t = if shape.len() == 2 {
                xavier(rng, shape[0], shape[1])
            } else if name.ends_with(".g") {
                ones(shape[0])
            } else {
                Tensor::zeros(&shape)
            };
            store.insert(name, t)?;
        }
        Ok(())
    }

    /// Fail with `ConfigMismatch` unless `store` holds every parameter at the
    /// configured shape.
    pub fn check(&self, store: &ParameterStore<impl Real>) -> Result<()> {
        for (name, shape) in self.param_shapes() {
            match store.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::ConfigMismatch(format!(
                        "`{name}` has shape {:?}, encoder config expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::ConfigMismatch(format!("missing parameter `{name}`"))),
            }
        }
        Ok(())
    }

    /// Encode a `[B, T, N]` batch to `[B, d]`. `masks` holds one mask per clip
    /// and is ignored by the recurrent encoder.
    pub fn forward<S: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        store: &ParameterStore<S>,
        input: Var,
        masks: &[MaskMatrix],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        match self.cfg.kind {
            EncoderKind::Transformer => {
                let (out, _) = self.forward_transformer(g, store, input, masks, train, rng)?;
                pool(g, out)
            }
            EncoderKind::Recurrent => self.forward_recurrent(g, store, input, train, rng),
        }
    }

    /// Transformer pass returning per-position outputs `[B, T, d]` and a trace.
    pub fn forward_transformer<S: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        store: &ParameterStore<S>,
        input: Var,
        masks: &[MaskMatrix],
        train: bool,
        rng: &mut R,
    ) -> Result<(Var, EncoderTrace)> {
        let c = &self.cfg;
        let shape = g.shape(input).to_vec();
        if shape.len() != 3 || shape[2] != c.input_dim {
            return Err(Error::shape(
                "encoder input",
                format!("{shape:?}, expected [B, T, {}]", c.input_dim),
            ));
        }
        let (b, t, d) = (shape[0], shape[1], c.d_model);
        if masks.len() != b || masks.iter().any(|m| m.len() != t) {
            return Err(Error::shape(
                "encoder masks",
                format!("{} masks for batch {b} of length {t}", masks.len()),
            ));
        }
        let p = |g: &mut Graph<S>, s: &str| g.param(store, &self.name(s));

        let w = p(g, "input.w")?;
        let bias = p(g, "input.b")?;
        let x = g.matmul(input, w)?;
        let mut x = g.add(x, bias)?;
        if c.positional_encoding {
            let pe = g.constant(sinusoidal_positions(t, d))?;
            x = g.add(x, pe)?;
        }

        // one [T, T] table per clip
        let blocked: Option<Vec<bool>> = if masks.iter().all(|m| m.masked_count() == 0) {
            None
        } else {
            Some(masks.iter().flat_map(MaskMatrix::blocked_pairs).collect())
        };
        let mut trace = EncoderTrace::default();

        for l in 0..c.n_layers {
            let lp = |g: &mut Graph<S>, s: &str| p(g, &format!("layers.{l}.{s}"));
            let proj = |g: &mut Graph<S>, w: &str, bn: &str| -> Result<Var> {
                let wv = lp(g, w)?;
                let bv = lp(g, bn)?;
                let y = g.matmul(x, wv)?;
                g.add(y, bv)
            };
            let q = proj(g, "attn.wq", "attn.bq")?;
            let k = proj(g, "attn.wk", "attn.bk")?;
            let v = proj(g, "attn.wv", "attn.bv")?;
            let (ctx, attn) = g.multi_head_attention(q, k, v, c.n_heads, blocked.as_deref())?;
            trace.attention.push(attn);
            let wo = lp(g, "attn.wo")?;
            let bo = lp(g, "attn.bo")?;
            let a = g.matmul(ctx, wo)?;
            let a = g.add(a, bo)?;
            trace.attention_out.push(a);
            let a = g.dropout(a, c.dropout, train, rng)?;
            let res = g.add(x, a)?;
            let (g1, b1) = (lp(g, "ln1.g")?, lp(g, "ln1.b")?);
            let y = g.layer_norm(res, g1, b1, c.layer_norm_eps)?;

            let (w1, bb1) = (lp(g, "ffn.w1")?, lp(g, "ffn.b1")?);
            let (w2, bb2) = (lp(g, "ffn.w2")?, lp(g, "ffn.b2")?);
            let f = g.matmul(y, w1)?;
            let f = g.add(f, bb1)?;
            let f = g.relu(f)?;
            let f = g.matmul(f, w2)?;
            let f = g.add(f, bb2)?;
            let f = g.dropout(f, c.dropout, train, rng)?;
            let res = g.add(y, f)?;
            let (g2, b2) = (lp(g, "ln2.g")?, lp(g, "ln2.b")?);
            x = g.layer_norm(res, g2, b2, c.layer_norm_eps)?;
            trace.layer_out.push(x);
        }
        Ok((x, trace))
    }

    /// GRU over the time axis; returns the final hidden state `[B, d]`.
    pub fn forward_recurrent<S: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        store: &ParameterStore<S>,
        input: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let c = &self.cfg;
        let shape = g.shape(input).to_vec();
        if shape.len() != 3 || shape[2] != c.input_dim {
            return Err(Error::shape(
                "encoder input",
                format!("{shape:?}, expected [B, T, {}]", c.input_dim),
            ));
        }
        let (b, t, d) = (shape[0], shape[1], c.d_model);
        let wx = g.param(store, &self.name("gru.wx"))?;
        let wh = g.param(store, &self.name("gru.wh"))?;
        let bx = g.param(store, &self.name("gru.bx"))?;
        let bh = g.param(store, &self.name("gru.bh"))?;
        let xs = g.matmul(input, wx)?;
        let xs = g.add(xs, bx)?;
        let mut hidden = g.constant(Tensor::zeros(&[b, d]))?;
        for step in 0..t {
            let xt = g.slice(xs, 1, step, 1)?;
            let xt = g.reshape(xt, &[b, 3 * d])?;
            let hh = g.matmul(hidden, wh)?;
            let hh = g.add(hh, bh)?;
            let gate = |g: &mut Graph<S>, src: Var, i: usize| g.slice(src, 1, i * d, d);
            let (xr, xz, xn) = (gate(g, xt, 0)?, gate(g, xt, 1)?, gate(g, xt, 2)?);
            let (hr, hz, hn) = (gate(g, hh, 0)?, gate(g, hh, 1)?, gate(g, hh, 2)?);
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r)?;
            let z = g.add(xz, hz)?;
            let z = g.sigmoid(z)?;
            let rn = g.mul(r, hn)?;
            let n = g.add(xn, rn)?;
            let n = g.tanh(n)?;
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let diff = g.sub(hidden, n)?;
            let zd = g.mul(z, diff)?;
            hidden = g.add(n, zd)?;
        }
        g.dropout(hidden, c.dropout, train, rng)
    }

    /// Encode one clip with a fresh inference graph.
    pub fn encode<S: Real, R: Rng + ?Sized>(
        &self,
        clip: &MelClip,
        mask: &MaskMatrix,
        store: &ParameterStore<S>,
        train: bool,
        rng: &mut R,
    ) -> Result<Representation> {
        self.check(store)?;
        let mut g = Graph::inference();
        let x = g.constant(clip_batch(&[clip])?)?;
        let h = self.forward(&mut g, store, x, std::slice::from_ref(mask), train, rng)?;
        Ok(Representation {
            h: g.value(h).to_f64(),
        })
    }

    /// Recurrent encoding of one clip (no masking path).
    pub fn encode_recurrent<S: Real, R: Rng + ?Sized>(
        &self,
        clip: &MelClip,
        store: &ParameterStore<S>,
        train: bool,
        rng: &mut R,
    ) -> Result<Representation> {
        if self.cfg.kind != EncoderKind::Recurrent {
            return Err(Error::ConfigMismatch("encoder kind is not recurrent".into()));
        }
        self.check(store)?;
        let mut g = Graph::inference();
        let x = g.constant(clip_batch(&[clip])?)?;
        let h = self.forward_recurrent(&mut g, store, x, train, rng)?;
        Ok(Representation {
            h: g.value(h).to_f64(),
        })
    }
}

/// Mean over every time step, masked or not: `[B, T, d] -> [B, d]`.
pub fn pool<S: Real>(g: &mut Graph<S>, per_position: Var) -> Result<Var> {
    g.mean(per_position, 1)
}
