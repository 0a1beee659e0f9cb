use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::downstream::DownstreamModel;
use crate::error::{Error, Result};
use crate::features::MelClip;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub trials: usize,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn latency_stats(mut seconds: Vec<f64>) -> Result<LatencyStats> {
    if seconds.is_empty() {
        return Err(Error::EmptyBenchmark);
    }
    seconds.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        mean: seconds.iter().sum::<f64>() / seconds.len() as f64,
        p50: percentile(&seconds, 0.5),
        p95: percentile(&seconds, 0.95),
        trials: seconds.len(),
    })
}

/// Wall-clock seconds per single-clip prediction, after `warmup` untimed calls.
pub fn benchmark_inference(
    model: &DownstreamModel,
    clip: &MelClip,
    warmup: usize,
    trials: usize,
    seed: u64,
) -> Result<LatencyStats> {
    if trials == 0 {
        return Err(Error::EmptyBenchmark);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..warmup {
        model.predict(clip, &mut rng)?;
    }
    let mut times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t = Instant::now();
        std::hint::black_box(model.predict(clip, &mut rng)?);
        times.push(t.elapsed().as_secs_f64());
    }
    latency_stats(times)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub arch: String,
    pub mask_rate: f64,
    pub stats: LatencyStats,
}

/// Tab-separated table, microseconds.
pub fn latency_table(rows: &[LatencyRow]) -> String {
    let mut s = String::from("arch\tmask_rate\tmean_us\tp50_us\tp95_us\ttrials\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{}",
            r.arch,
            r.mask_rate,
            r.stats.mean * 1e6,
            r.stats.p50 * 1e6,
            r.stats.p95 * 1e6,
            r.stats.trials
        );
    }
    s
}
