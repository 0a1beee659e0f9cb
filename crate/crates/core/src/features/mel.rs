use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{MelClip, MelSpectrogram, RawAudio};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_bins: usize,
    pub fmin_hz: f64,
    /// Upper edge of the filterbank; Nyquist when unset.
    pub fmax_hz: Option<f64>,
    /// FFT length; next power of two at or above the frame length when unset.
    pub n_fft: Option<usize>,
    pub log_eps: f64,
    pub clip_frames: usize,
    pub clip_stride: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            frame_ms: 25.0,
            hop_ms: 10.0,
            n_bins: 64,
            fmin_hz: 60.0,
            fmax_hz: None,
            n_fft: None,
            log_eps: 1e-6,
            clip_frames: 96,
            clip_stride: 48,
        }
    }
}

impl FeatureConfig {
    pub fn frame_len(&self) -> usize {
        (self.sample_rate as f64 * self.frame_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fft_len(&self) -> usize {
        self.n_fft.unwrap_or_else(|| self.frame_len().next_power_of_two())
    }

    pub fn fmax(&self) -> f64 {
        self.fmax_hz.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    /// Number of frames produced for `n_samples` samples.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        let fl = self.frame_len();
        if n_samples < fl {
            0
        } else {
            (n_samples - fl) / self.hop_len() + 1
        }
    }

    /// Samples needed for exactly `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        self.frame_len() + frames.saturating_sub(1) * self.hop_len()
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if self.n_bins == 0 {
            return bad("n_bins must be at least 1".into());
        }
        if self.frame_len() == 0 || self.hop_len() == 0 {
            return bad("frame and hop must span at least one sample".into());
        }
        if self.fft_len() < self.frame_len() {
            return bad(format!("n_fft {} shorter than frame {}", self.fft_len(), self.frame_len()));
        }
        if self.fmax() > nyquist + 1e-9 {
            return bad(format!("mel range upper edge {} Hz exceeds Nyquist {nyquist} Hz", self.fmax()));
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax()) {
            return bad(format!("mel range {}..{} Hz is empty", self.fmin_hz, self.fmax()));
        }
        if !(self.log_eps > 0.0) {
            return bad("log_eps must be positive".into());
        }
        if self.clip_frames == 0 || self.clip_stride == 0 {
            return bad("clip window and stride must be at least 1".into());
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over the power-spectrum bins of an `n_fft` transform.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_bins + 2` edge frequencies in Hz; filter `k` rises from `edges[k]`,
    /// peaks at `edges[k + 1]` and falls to zero at `edges[k + 2]`.
    pub edges_hz: Vec<f64>,
    /// `n_bins x (n_fft / 2 + 1)` weights.
    pub weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn center_hz(&self, k: usize) -> f64 {
        self.edges_hz[k + 1]
    }
}

pub fn mel_filterbank(cfg: &FeatureConfig) -> Result<MelFilterbank> {
    cfg.validate()?;
    let n_fft = cfg.fft_len();
    let n_freq = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax()));
    let edges_hz: Vec<f64> = (0..cfg.n_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_bins + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
    let weights = (0..cfg.n_bins)
        .map(|k| {
            let (l, c, r) = (edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]);
            (0..n_freq)
                .map(|j| {
                    let f = j as f64 * bin_hz;
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect();
    Ok(MelFilterbank { edges_hz, weights })
}

/// Hann-windowed power spectra through a triangular mel filterbank, then
/// `ln(energy + eps)`. Audio at another rate is first resampled.
pub fn compute_logmel(audio: &RawAudio, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    let bank = mel_filterbank(cfg)?;
    let audio = if audio.sample_rate != cfg.sample_rate {
        audio.resampled(cfg.sample_rate)
    } else {
        audio.clone()
    };
    let frame_len = cfg.frame_len();
    let n_frames = cfg.n_frames(audio.samples.len());
    if n_frames == 0 {
        return Err(Error::AudioTooShort {
            samples: audio.samples.len(),
            frame_len,
        });
    }
    let hop = cfg.hop_len();
    let n_fft = cfg.fft_len();
    let n_freq = n_fft / 2 + 1;
    let window: Vec<f64> = (0..frame_len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / frame_len as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0f64; n_freq];
    let mut values = vec![0.0f32; cfg.n_bins * n_frames];
    for t in 0..n_frames {
        let frame = &audio.samples[t * hop..t * hop + frame_len];
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < frame_len {
                Complex::new(frame[i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, x) in power.iter_mut().zip(&buf) {
            *p = x.norm_sqr() / n_fft as f64;
        }
        for (k, w) in bank.weights.iter().enumerate() {
            let e: f64 = w.iter().zip(&power).map(|(a, b)| a * b).sum();
            values[k * n_frames + t] = (e + cfg.log_eps).ln() as f32;
        }
    }
    MelSpectrogram::new(values, cfg.n_bins, n_frames, cfg.hop_ms, audio.source_id.clone())
}

/// Windows of `window` frames every `stride` frames, in start order. Inputs
/// shorter than one window produce no clips.
pub fn extract_clips(spec: &MelSpectrogram, window: usize, stride: usize) -> Vec<MelClip> {
    let (n, total) = (spec.n_bins(), spec.n_frames());
    if window == 0 || stride == 0 || total < window {
        return Vec::new();
    }
    (0..=total - window)
        .step_by(stride)
        .map(|start| {
            let mut v = Vec::with_capacity(n * window);
            for b in 0..n {
                v.extend_from_slice(&spec.values()[b * total + start..b * total + start + window]);
            }
            let mut clip = MelClip::new(v, n, window).expect("window shape");
            clip.source_id = spec.source_id.clone();
            clip.start_frame = start;
            clip
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn silence(n: usize) -> RawAudio {
        RawAudio::new(vec![0.0; n], 16_000, "s").unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        // (16000 - 400) / 160 + 1 = 98
        let cfg = FeatureConfig::default();
        let s = compute_logmel(&silence(16_000), &cfg).unwrap();
        assert_eq!((s.n_bins(), s.n_frames()), (64, 98));
    }

    #[test]
    fn silence_is_constant_log_eps() {
        let cfg = FeatureConfig::default();
        let s = compute_logmel(&silence(4000), &cfg).unwrap();
        let expected = (1e-6f64).ln() as f32;
        assert!(s.values().iter().all(|&v| v == expected));
    }

    #[test]
    fn too_short_and_bad_range_are_errors() {
        let cfg = FeatureConfig::default();
        let err = compute_logmel(&silence(399), &cfg).unwrap_err();
        assert_eq!(err.class(), "AudioTooShort");
        let cfg = FeatureConfig {
            fmax_hz: Some(9000.0),
            ..Default::default()
        };
        assert_eq!(compute_logmel(&silence(1600), &cfg).unwrap_err().class(), "InvalidConfig");
        let cfg = FeatureConfig {
            n_bins: 0,
            ..Default::default()
        };
        assert_eq!(compute_logmel(&silence(1600), &cfg).unwrap_err().class(), "InvalidConfig");
    }

    #[test]
    fn clip_examples() {
        let spec = |t| MelSpectrogram::new(vec![0.0; 2 * t], 2, t, 10.0, "x").unwrap();
        assert_eq!(extract_clips(&spec(96), 96, 48).len(), 1);
        let starts: Vec<usize> = extract_clips(&spec(192), 96, 48).iter().map(|c| c.start_frame).collect();
        assert_eq!(starts, [0, 48, 96]);
        assert!(extract_clips(&spec(95), 96, 48).is_empty());
    }

    #[test]
    fn clips_copy_the_right_frames() {
        let t = 10;
        let vals: Vec<f32> = (0..2 * t).map(|i| i as f32).collect();
        let spec = MelSpectrogram::new(vals, 2, t, 10.0, "x").unwrap();
        let clips = extract_clips(&spec, 4, 3);
        assert_eq!(clips.len(), 3);
        assert_eq!(clips[1].values(), &[3.0, 4.0, 5.0, 6.0, 13.0, 14.0, 15.0, 16.0]);
        assert_eq!(clips[1].time_major(), vec![3.0, 13.0, 4.0, 14.0, 5.0, 15.0, 6.0, 16.0]);
    }

    #[test]
    fn resampling_preserves_duration() {
        let a = RawAudio::new((0..8000).map(|i| i as f32 / 8000.0).collect(), 8000, "r").unwrap();
        let b = a.resampled(16_000);
        assert_eq!(b.samples.len(), 16_000);
        assert!((b.samples[2] - a.samples[1]).abs() < 1e-6);
        assert!((b.samples[3] - 0.5 * (a.samples[1] + a.samples[2])).abs() < 1e-6);
    }

    #[test]
    fn filter_edges_follow_mel_spacing() {
        let bank = mel_filterbank(&FeatureConfig::default()).unwrap();
        assert_eq!(bank.edges_hz.len(), 66);
        assert!((bank.edges_hz[0] - 60.0).abs() < 1e-9);
        assert!((bank.edges_hz[65] - 8000.0).abs() < 1e-6);
        let mels: Vec<f64> = bank.edges_hz.iter().map(|&f| hz_to_mel(f)).collect();
        let step = mels[1] - mels[0];
        assert!(mels.windows(2).all(|w| (w[1] - w[0] - step).abs() < 1e-9));
    }
}
