use std::f64::consts::PI;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    compute_logmel, extract_clips, mel_filterbank, write_wav, DatasetManifest, FeatureConfig, ManifestEntry, MelClip,
    MelFilterbank, RawAudio, Split,
};

/// Parameters of the synthetic respiratory corpus.
///
/// Every participant owns signature tones placed at mel filter centres and
/// slowly amplitude-modulated, outside the label band, plus a noise
/// component filling the label band. The band RMS is a participant trait,
/// `label_effect * label_spread^u` with `u` uniform in `[0, 1)` for positives
/// and in `[-1, 0)` for negatives. Each recording is exactly one clip long and
/// has its own gain, phases, white noise and a few short tone bursts at
/// random frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    /// Labeled participants, split into train/val/test.
    pub n_participants: usize,
    /// Extra participants in the unlabeled split, for pre-training only.
    pub n_unlabeled: usize,
    pub clips_per_participant: usize,
    pub positive_fraction: f64,
    /// With few tones participants share them, and the band level becomes
    /// part of what tells them apart.
    pub signature_bins_per_participant: usize,
    /// Standard deviation of the additive white noise.
    pub noise_level: f64,
    pub label_effect: f64,
    /// Band holding the label-bearing noise component, Hz.
    pub label_band_hz: (f64, f64),
    /// Ratio between the loudest and the class-boundary band RMS.
    pub label_spread: f64,
    pub bursts_per_recording: usize,
    /// Peak amplitude scale of the tone bursts.
    pub burst_level: f64,
    /// Recording gain is log-uniform in `[1/g, g]`.
    pub gain_jitter: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            n_participants: 40,
            n_unlabeled: 64,
            clips_per_participant: 20,
            positive_fraction: 0.5,
            signature_bins_per_participant: 1,
            noise_level: 0.01,
            label_effect: 0.02,
            label_band_hz: (1500.0, 3000.0),
            label_spread: 10.0,
            bursts_per_recording: 3,
            burst_level: 0.5,
            gain_jitter: 2.0,
            val_fraction: 0.1,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self, features: &FeatureConfig) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        features.validate()?;
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad(format!("positive_fraction {} outside [0, 1]", self.positive_fraction));
        }
        if self.signature_bins_per_participant >= features.n_bins {
            return bad(format!(
                "{} signature bins with only {} mel bins",
                self.signature_bins_per_participant, features.n_bins
            ));
        }
        let (lo, hi) = self.label_band_hz;
        if !(lo >= 0.0 && lo < hi && hi <= features.sample_rate as f64 / 2.0) {
            return bad(format!("label band {lo}..{hi} Hz is empty or above Nyquist"));
        }
        if !(self.label_spread >= 1.0) {
            return bad(format!("label_spread {} must be at least 1", self.label_spread));
        }
        let bank = mel_filterbank(features)?;
        if self.signature_bins_per_participant > signature_candidates(&bank, features, self.label_band_hz).len() {
            return bad("more signature bins than resolvable mel filters outside the label band".into());
        }
        if self.clips_per_participant == 0 {
            return bad("clips_per_participant must be at least 1".into());
        }
        if !(self.noise_level >= 0.0 && self.label_effect >= 0.0 && self.burst_level >= 0.0) {
            return bad("noise_level, label_effect and burst_level must be non-negative".into());
        }
        if !(self.gain_jitter >= 1.0) {
            return bad("gain_jitter must be at least 1".into());
        }
        let held = self.val_fraction + self.test_fraction;
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && held < 1.0) {
            return bad("val and test fractions must be non-negative and sum below 1".into());
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        format!(
            "synth/v3 n={} unlabeled={} clips={} pos={} sig={} noise={} effect={} band={}..{} spread={} bursts={}x{} gain={} val={} test={} seed={}",
            self.n_participants,
            self.n_unlabeled,
            self.clips_per_participant,
            self.positive_fraction,
            self.signature_bins_per_participant,
            self.noise_level,
            self.label_effect,
            self.label_band_hz.0,
            self.label_band_hz.1,
            self.label_spread,
            self.bursts_per_recording,
            self.burst_level,
            self.gain_jitter,
            self.val_fraction,
            self.test_fraction,
            self.seed
        )
    }
}

/// Filters whose rising and falling edges each span at least two FFT bins,
/// so a tone at the centre peaks in that filter.
pub fn resolvable_bins(bank: &MelFilterbank, features: &FeatureConfig) -> Vec<usize> {
    let bin_hz = features.sample_rate as f64 / features.fft_len() as f64;
    (0..features.n_bins)
        .filter(|&k| {
            let e = &bank.edges_hz;
            e[k + 1] - e[k] >= 2.0 * bin_hz && e[k + 2] - e[k + 1] >= 2.0 * bin_hz
        })
        .collect()
}

/// Resolvable filters whose support does not reach into `band`.
fn signature_candidates(bank: &MelFilterbank, features: &FeatureConfig, band: (f64, f64)) -> Vec<usize> {
    resolvable_bins(bank, features)
        .into_iter()
        .filter(|&k| bank.edges_hz[k + 2] <= band.0 || bank.edges_hz[k] >= band.1)
        .collect()
}

/// Per-participant generative parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Participant {
    pub id: String,
    /// Hidden for unlabeled participants, but still drives the audio.
    pub positive: bool,
    pub split: Split,
    pub signature_bins: Vec<usize>,
    tones: Vec<Tone>,
    band_rms: f64,
    stream: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct Tone {
    hz: f64,
    amplitude: f64,
    mod_hz: f64,
    mod_depth: f64,
}

/// One generated recording and its manifest entry.
#[derive(Debug, Clone)]
pub struct SyntheticRecording {
    pub entry: ManifestEntry,
    pub audio: RawAudio,
}

/// Draw the participant table: ids, hidden labels, splits and signatures.
pub fn synthetic_participants(spec: &SyntheticCorpusSpec, features: &FeatureConfig) -> Result<Vec<Participant>> {
    spec.validate(features)?;
    let bank = mel_filterbank(features)?;
    let usable = signature_candidates(&bank, features, spec.label_band_hz);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let n = spec.n_participants;
    let n_pos = (spec.positive_fraction * n as f64).round() as usize;
    let mut labels: Vec<bool> = (0..n).map(|i| i < n_pos).collect();
    labels.shuffle(&mut rng);

    // stratified: each class is split in the same proportions
    let mut splits = vec![Split::Train; n];
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_test = (spec.test_fraction * idx.len() as f64).round() as usize;
        let n_val = (spec.val_fraction * idx.len() as f64).round() as usize;
        for (j, &i) in idx.iter().enumerate() {
            splits[i] = if j < n_test {
                Split::Test
            } else if j < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
        }
    }
    let unl_labels: Vec<bool> = (0..spec.n_unlabeled).map(|_| rng.random_bool(spec.positive_fraction)).collect();

    let ids = (0..n)
        .map(|i| (format!("L{i:03}"), labels[i], splits[i]))
        .chain((0..spec.n_unlabeled).map(|i| (format!("U{i:03}"), unl_labels[i], Split::Unlabeled)));
    let mut out = Vec::new();
    for (k, (id, positive, split)) in ids.enumerate() {
        let mut prng = participant_rng(spec.seed, k as u64, 0);
        let mut bins: Vec<usize> = usable
            .choose_multiple(&mut prng, spec.signature_bins_per_participant)
            .copied()
            .collect();
        bins.sort_unstable();
        let tones = bins
            .iter()
            .map(|&b| Tone {
                hz: bank.center_hz(b),
                amplitude: 0.1 * prng.random_range(0.5..1.0),
                mod_hz: prng.random_range(1.0..6.0),
                mod_depth: prng.random_range(0.0..0.5),
            })
            .collect();
        let u: f64 = prng.random_range(0.0..1.0);
        let band_rms = spec.label_effect * spec.label_spread.powf(if positive { u } else { u - 1.0 });
        out.push(Participant {
            id,
            positive,
            split,
            signature_bins: bins,
            tones,
            band_rms,
            stream: k as u64,
        });
    }
    Ok(out)
}

/// Stream `stream` of participant `k`; recordings use streams `1..`.
fn participant_rng(seed: u64, k: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4e54_4845_5449);
    r.set_stream(k << 20 | stream);
    r
}

fn band_noise(n: usize, rms: f64, band: (f64, f64), sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    if rms == 0.0 {
        return vec![0.0; n];
    }
    let hz = sample_rate as f64 / n as f64;
    let lo = (band.0 / hz).ceil().max(1.0) as usize;
    let hi = ((band.1 / hz).floor() as usize).min((n - 1) / 2);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for k in lo..=hi {
        let c = Complex::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal));
        buf[k] = c;
        buf[n - k] = c.conj();
    }
    FftPlanner::<f64>::new().plan_fft_inverse(n).process(&mut buf);
    let got = (buf.iter().map(|c| c.re * c.re).sum::<f64>() / n as f64).sqrt();
    if got == 0.0 {
        return vec![0.0; n];
    }
    buf.iter().map(|c| c.re * rms / got).collect()
}

fn render(p: &Participant, r: usize, spec: &SyntheticCorpusSpec, features: &FeatureConfig) -> Result<RawAudio> {
    let n = features.samples_for_frames(features.clip_frames);
    let sr = features.sample_rate as f64;
    let mut rng = participant_rng(spec.seed, p.stream, 1 + r as u64);
    let log_g = spec.gain_jitter.ln();
    let gain = rng.random_range(-log_g..=log_g).exp();
    let mut x = band_noise(n, p.band_rms, spec.label_band_hz, features.sample_rate, &mut rng);
    for t in &p.tones {
        let phase = rng.random_range(0.0..2.0 * PI);
        let mod_phase = rng.random_range(0.0..2.0 * PI);
        let amp = t.amplitude * rng.random_range(0.8..1.2);
        for (i, s) in x.iter_mut().enumerate() {
            let time = i as f64 / sr;
            let env = 1.0 + t.mod_depth * (2.0 * PI * t.mod_hz * time + mod_phase).sin();
            *s += amp * env * (2.0 * PI * t.hz * time + phase).sin();
        }
    }
    let nyquist = sr / 2.0;
    for _ in 0..spec.bursts_per_recording {
        // log-uniform frequency, Hann-windowed, 50-200 ms
        let hz = (100f64.ln() + rng.random_range(0.0..1.0) * ((0.9 * nyquist).ln() - 100f64.ln())).exp();
        let len = ((rng.random_range(0.05..0.2) * sr) as usize).min(n);
        let start = rng.random_range(0..=n - len);
        let amp = spec.burst_level * rng.random_range(0.5..1.5);
        let phase = rng.random_range(0.0..2.0 * PI);
        for i in 0..len {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos();
            x[start + i] += amp * w * (2.0 * PI * hz * i as f64 / sr + phase).sin();
        }
    }
    let samples = x
        .into_iter()
        .map(|s| {
            let noise: f64 = rng.sample(StandardNormal);
            (gain * s + spec.noise_level * noise).clamp(-1.0, 1.0) as f32
        })
        .collect();
    RawAudio::new(samples, features.sample_rate, recording_path(&p.id, r))
}

fn recording_path(id: &str, r: usize) -> String {
    format!("wav/{id}/{id}_r{r:02}.wav")
}

/// Generate every recording in manifest order.
pub fn synthesize(spec: &SyntheticCorpusSpec, features: &FeatureConfig) -> Result<Vec<SyntheticRecording>> {
    let participants = synthetic_participants(spec, features)?;
    let mut out = Vec::new();
    for p in &participants {
        for r in 0..spec.clips_per_participant {
            let audio = render(p, r, spec, features)?;
            out.push(SyntheticRecording {
                entry: ManifestEntry {
                    participant_id: p.id.clone(),
                    file_path: recording_path(&p.id, r),
                    label: p.split.is_labeled().then_some(p.positive),
                    split: p.split,
                },
                audio,
            });
        }
    }
    Ok(out)
}

/// Write `manifest.tsv` and the WAV tree under `dir`.
pub fn generate_synthetic_corpus(
    spec: &SyntheticCorpusSpec,
    features: &FeatureConfig,
    dir: &Path,
) -> Result<DatasetManifest> {
    let recordings = synthesize(spec, features)?;
    for rec in &recordings {
        let path = dir.join(&rec.entry.file_path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_wav(&path, &rec.audio)?;
    }
    let manifest = DatasetManifest::new(recordings.into_iter().map(|r| r.entry).collect())?;
    manifest.save(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// In-memory clips of the corpus, one per recording, tagged with identity
/// and (labeled splits only) label. Skips the WAV round trip, so values
/// differ from file-loaded clips by 16-bit quantisation.
pub fn synthetic_clips(spec: &SyntheticCorpusSpec, features: &FeatureConfig) -> Result<Vec<(Split, MelClip)>> {
    let mut out = Vec::new();
    for rec in synthesize(spec, features)? {
        let mel = compute_logmel(&rec.audio, features)?;
        for c in extract_clips(&mel, features.clip_frames, features.clip_stride) {
            out.push((rec.entry.split, c.with_identity(rec.entry.participant_id.clone(), rec.entry.label)));
        }
    }
    Ok(out)
}
