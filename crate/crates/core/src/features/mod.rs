//! Log-mel filterbank features, fixed-length clips, WAV I/O and dataset
//! manifests.

mod manifest;
mod mel;
mod wav;

pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, Split};
pub use mel::{compute_logmel, extract_clips, mel_filterbank, FeatureConfig, MelFilterbank};
pub use wav::{read_wav, write_wav};

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAudio {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl RawAudio {
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(RawAudio {
            samples,
            sample_rate,
            source_id: source_id.into(),
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear-interpolation resampling to `rate`.
    pub fn resampled(&self, rate: u32) -> Self {
        if rate == self.sample_rate || self.samples.is_empty() {
            return RawAudio {
                sample_rate: rate,
                ..self.clone()
            };
        }
        let ratio = self.sample_rate as f64 / rate as f64;
        let n = ((self.samples.len() as f64) / ratio).floor().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n)
            .map(|i| {
                let pos = i as f64 * ratio;
                let j = (pos.floor() as usize).min(last);
                let frac = (pos - j as f64) as f32;
                let a = self.samples[j];
                let b = self.samples[(j + 1).min(last)];
                a + (b - a) * frac
            })
            .collect();
        RawAudio {
            samples,
            sample_rate: rate,
            source_id: self.source_id.clone(),
        }
    }
}

/// `n_bins x n_frames` log-mel energies, bin-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f32>,
    n_bins: usize,
    n_frames: usize,
    pub frame_hop_ms: f64,
    pub source_id: String,
}

impl MelSpectrogram {
    pub fn new(values: Vec<f32>, n_bins: usize, n_frames: usize, frame_hop_ms: f64, source_id: impl Into<String>) -> Result<Self> {
        if values.len() != n_bins * n_frames || n_frames == 0 {
            return Err(Error::shape(
                "mel spectrogram",
                format!("{} values for {n_bins}x{n_frames}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("mel spectrogram"));
        }
        Ok(MelSpectrogram {
            values,
            n_bins,
            n_frames,
            frame_hop_ms,
            source_id: source_id.into(),
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * self.n_frames + frame]
    }

    /// Energies of one frame across all bins.
    pub fn frame(&self, t: usize) -> Vec<f32> {
        (0..self.n_bins).map(|b| self.get(b, t)).collect()
    }
}

/// A fixed `n_bins x n_frames` window cut from a spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct MelClip {
    values: Vec<f32>,
    n_bins: usize,
    n_frames: usize,
    pub participant_id: String,
    pub source_id: String,
    pub label: Option<bool>,
    pub start_frame: usize,
}

impl MelClip {
    pub fn new(values: Vec<f32>, n_bins: usize, n_frames: usize) -> Result<Self> {
        if values.len() != n_bins * n_frames || n_bins == 0 || n_frames == 0 {
            return Err(Error::shape(
                "clip",
                format!("{} values for {n_bins}x{n_frames}", values.len()),
            ));
        }
        Ok(MelClip {
            values,
            n_bins,
            n_frames,
            participant_id: String::new(),
            source_id: String::new(),
            label: None,
            start_frame: 0,
        })
    }

    pub fn with_identity(mut self, participant_id: impl Into<String>, label: Option<bool>) -> Self {
        self.participant_id = participant_id.into();
        self.label = label;
        self
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// Bin-major values (`bin * n_frames + frame`).
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * self.n_frames + frame]
    }

    /// Frame-major copy (`frame * n_bins + bin`): one row per time step, the
    /// layout the encoder consumes.
    pub fn time_major(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.values.len()];
        for b in 0..self.n_bins {
            for t in 0..self.n_frames {
                out[t * self.n_bins + b] = self.values[b * self.n_frames + t];
            }
        }
        out
    }

    /// Mean over time of each bin.
    pub fn bin_means(&self) -> Vec<f64> {
        (0..self.n_bins)
            .map(|b| {
                self.values[b * self.n_frames..(b + 1) * self.n_frames]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / self.n_frames as f64
            })
            .collect()
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }
}

/// All clips of a manifest (or part of one), in manifest order.
#[derive(Debug, Clone, Default)]
pub struct ClipSet {
    pub clips: Vec<MelClip>,
}

impl ClipSet {
    /// Read every entry of `manifest` accepted by `filter` and cut its clips.
    /// Relative audio paths resolve against `base_dir`.
    pub fn load(
        manifest: &DatasetManifest,
        base_dir: &Path,
        cfg: &FeatureConfig,
        filter: impl Fn(&ManifestEntry) -> bool,
    ) -> Result<Self> {
        let mut clips = Vec::new();
        for e in manifest.entries.iter().filter(|e| filter(e)) {
            let path = base_dir.join(&e.file_path);
            let audio = read_wav(&path)?;
            let spec = compute_logmel(&audio, cfg)?;
            for c in extract_clips(&spec, cfg.clip_frames, cfg.clip_stride) {
                clips.push(c.with_identity(e.participant_id.clone(), e.label));
            }
        }
        Ok(ClipSet { clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Clip indices grouped by participant, participants in sorted order.
    pub fn by_participant(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, c) in self.clips.iter().enumerate() {
            map.entry(c.participant_id.as_str()).or_default().push(i);
        }
        map
    }

    pub fn labels(&self) -> Vec<Option<bool>> {
        self.clips.iter().map(|c| c.label).collect()
    }
}
