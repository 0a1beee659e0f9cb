//! Metrics, latency benchmarking and the synthetic corpus.

mod bench;
mod metrics;
mod synth;

pub use bench::{benchmark_inference, latency_stats, latency_table, LatencyRow, LatencyStats};
pub use metrics::{average_f1, compute_metrics, mean_std, roc_auc, EvalReport};
pub use synth::{
    generate_synthetic_corpus, resolvable_bins, synthesize, synthetic_clips, synthetic_participants, Participant,
    SyntheticCorpusSpec, SyntheticRecording,
};
