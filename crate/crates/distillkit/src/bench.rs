//! Inference efficiency harness: latency, analytic peak memory, and
//! parameter counts over a batch-by-sequence-length grid.

use std::time::Instant;

use distillkit_core::corpus::MaskedBatch;
use distillkit_core::encoder::{count_params, Capture, EncoderConfig, ModelState, Variant};
use distillkit_core::rng::Rng;
use serde::Serialize;

use crate::Result;

/// Minimum timed repetitions per grid point.
pub const MIN_REPS: usize = 30;
/// Warmup repetitions excluded from statistics.
pub const WARMUPS: usize = 5;
/// Configurations whose parameters alone exceed this budget are skipped.
const PARAM_BYTE_LIMIT: u64 = 3 << 30;

/// One timed grid point.
#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub config: String,
    pub batch: usize,
    pub seq_len: usize,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub peak_bytes: u64,
    pub params: usize,
}

/// Full harness output: timed results plus configurations that were skipped
/// as too large.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub results: Vec<BenchResult>,
    pub skipped: Vec<String>,
}

/// Analytic peak of live bytes during a forward pass: parameters plus the
/// largest simultaneously-live activation set, both at 8 bytes per element.
///
/// The activation model takes the maximum over the attention stage
/// (projections plus score/probability matrices), the FFN stage, and the
/// logits stage; it is deliberately simple but monotone in `batch * seq`.
pub fn estimate_peak_bytes(config: &EncoderConfig, batch: usize, seq: usize) -> u64 {
    let d = config.hidden_dim;
    let w = config.tower_dim();
    let f = config.ffn_expansion * w;
    let h = config.num_heads;
    let bn = batch * seq;

    // Residual stream plus block input copy.
    let stream = 2 * bn * d;
    let attn_stage = stream + bn * 3 * w + 2 * batch * h * seq * seq + bn * w;
    let ffn_stage = stream + bn * w + bn * f;
    let logits_stage = stream + bn * config.embed_dim + bn * config.vocab_size;
    let activations = attn_stage.max(ffn_stage).max(logits_stage);
    ((count_params(config) + activations) * 8) as u64
}

/// Shape-preserving desk-scale variants of the four model families, small
/// enough to benchmark on one CPU core while keeping the parameter and
/// latency orderings of the full-size shapes.
pub fn presets_desk() -> Vec<(String, EncoderConfig)> {
    let base = EncoderConfig {
        num_layers: 12,
        hidden_dim: 96,
        embed_dim: 96,
        num_heads: 12,
        ffn_expansion: 4,
        vocab_size: 1000,
        max_position: 512,
        variant: Variant::Standard,
        bottleneck_dim: 0,
        num_ffn_blocks: 1,
        conv_kernel: 3,
    };
    let distilled = EncoderConfig { num_layers: 6, ..base.clone() };
    let tiny = EncoderConfig {
        num_layers: 4,
        hidden_dim: 36,
        embed_dim: 36,
        num_heads: 6,
        ..base.clone()
    };
    let mobile = EncoderConfig {
        num_layers: 24,
        hidden_dim: 64,
        embed_dim: 16,
        num_heads: 4,
        ffn_expansion: 5,
        variant: Variant::Bottleneck,
        bottleneck_dim: 16,
        num_ffn_blocks: 4,
        ..base.clone()
    };
    vec![
        ("tiny".to_string(), tiny),
        ("mobile".to_string(), mobile),
        ("distilled".to_string(), distilled),
        ("base".to_string(), base),
    ]
}

/// The paper-scale shapes (110M/65M/25M/15M); benchmarking these on a
/// laptop-class CPU takes minutes per grid point.
pub fn presets_full() -> Vec<(String, EncoderConfig)> {
    vec![
        ("tiny".to_string(), EncoderConfig::preset_tiny()),
        ("mobile".to_string(), EncoderConfig::preset_mobile()),
        ("distilled".to_string(), EncoderConfig::preset_distilled()),
        ("base".to_string(), EncoderConfig::preset_base()),
    ]
}

/// The default benchmarking grid.
pub fn default_grid() -> Vec<(usize, usize)> {
    vec![(1, 32), (1, 128), (8, 32), (8, 128)]
}

/// Time `reps` forward passes per configuration and grid point on random
/// token batches. Deterministic in structure given the seed; wall-clock
/// numbers are machine-dependent.
pub fn run_bench(
    configs: &[(String, EncoderConfig)],
    grid: &[(usize, usize)],
    reps: usize,
    seed: u64,
) -> Result<BenchReport> {
    assert!(!grid.is_empty(), "bench grid must be nonempty");
    let reps = reps.max(MIN_REPS);
    let mut report = BenchReport { results: Vec::new(), skipped: Vec::new() };
    let mut rng = Rng::new(seed);
    for (name, config) in configs {
        config.validate()?;
        let params = count_params(config);
        if (params as u64) * 8 > PARAM_BYTE_LIMIT {
            report.skipped.push(name.clone());
            continue;
        }
        let state = ModelState::init(config, rng.next_u64())?;
        for &(batch, seq) in grid {
            let ids: Vec<u32> = (0..batch * seq)
                .map(|_| 5 + rng.next_below(config.vocab_size - 5) as u32)
                .collect();
            let mask = vec![1u8; ids.len()];
            let mb = MaskedBatch::unmasked(&ids, &mask, batch, seq);
            for _ in 0..WARMUPS {
                state.forward_infer(&mb, Capture::LogitsOnly)?;
            }
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t0 = Instant::now();
                state.forward_infer(&mb, Capture::LogitsOnly)?;
                times.push(t0.elapsed().as_secs_f64() * 1000.0);
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median_ms = times[times.len() / 2];
            let p90_ms = times[(times.len() * 9) / 10];
            report.results.push(BenchResult {
                config: name.clone(),
                batch,
                seq_len: seq,
                median_ms,
                p90_ms,
                peak_bytes: estimate_peak_bytes(config, batch, seq),
                params,
            });
        }
    }
    Ok(report)
}

/// CSV with the pinned column layout.
pub fn bench_csv(report: &BenchReport) -> String {
    let mut out = String::from("config,batch,seq_len,median_ms,p90_ms,peak_bytes,params\n");
    for r in &report.results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.config, r.batch, r.seq_len, r.median_ms, r.p90_ms, r.peak_bytes, r.params
        ));
    }
    out
}
