//! Latency benchmark: stream synthetic residual-like data into a vector
//! predictor and measure update/prediction wall times as the model grows,
//! plus a cost measurement of what exact streaming GP inference would pay
//! per tick at the same scale.

use crate::gp::Hyperparameters;
use crate::tree::VectorPredictor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

use super::config::ExperimentConfig;
use super::trial::{latency_stats, LatencyStats};
use super::HarnessError;

/// Latency statistics near one model size: samples are taken over the window
/// `[size/2, size)` of the stream.
#[derive(Debug, Clone, Serialize)]
pub struct BenchSegment {
    pub size: usize,
    pub mean_update_ms: f64,
    pub mean_predict_ms: f64,
    pub mean_combined_ms: f64,
    #[serde(flatten)]
    pub stats: LatencyStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub tick_budget_ms: f64,
    pub segments: Vec<BenchSegment>,
    /// mean combined latency ratio between consecutive sizes.
    pub growth_ratios: Vec<f64>,
    /// Measured per-tick cost of exact streaming GP inference at the largest
    /// size (rank-one insert plus posterior), when enabled.
    pub exact_baseline_ms: Option<f64>,
    pub leaf_counts: Vec<usize>,
}

/// Synthetic residual-like targets: smooth in position/velocity with a slow
/// time drift, matching the shape of the learning problem.
fn synthetic_targets(x: &[f64]) -> [f64; 2] {
    let drift = (-x[6] / 120.0).exp();
    [
        drift * (40.0 * (3.0 * x[0]).sin() * (2.0 * x[1]).cos() + 8.0 * x[2]) * 0.2,
        drift * (30.0 * (4.0 * x[1]).sin() + 6.0 * x[3] + 2.0 * x[4]) * 0.2,
    ]
}

fn synthetic_input(rng: &mut ChaCha8Rng, t: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(7);
    for _ in 0..2 {
        x.push(rng.random_range(-0.2..0.2));
    }
    for _ in 0..2 {
        x.push(rng.random_range(-0.2..0.2));
    }
    for _ in 0..2 {
        x.push(rng.random_range(-2.0..2.0));
    }
    x.push(t);
    x
}

/// Stream `max(sizes)` synthetic pairs through a d = 2 predictor and report
/// latency statistics at each requested size.
pub fn run_bench(
    config: &ExperimentConfig,
    sizes: &[usize],
    with_baseline: bool,
) -> Result<BenchReport, HarnessError> {
    config.validate()?;
    let mut sizes: Vec<usize> = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.is_empty() {
        return Err(HarnessError::Config("bench needs at least one size".into()));
    }
    let max_size = *sizes.last().unwrap();
    let tau = config.gp_tau();
    // The time input advances at the GP tick rate, as it would online.
    let tree_cfg = config.gp.tree_config(2, max_size as f64 * tau)?;
    let mut vp = VectorPredictor::new(2, tree_cfg, config.cohort.master_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.cohort.master_seed ^ 0xbe7c);
    let mut upd_us = vec![0.0f64; max_size];
    let mut prd_us = vec![0.0f64; max_size];
    for k in 0..max_size {
        let t = k as f64 * tau;
        let x = synthetic_input(&mut rng, t);
        let y = synthetic_targets(&x);
        let t0 = Instant::now();
        vp.update(&x, &y)?;
        upd_us[k] = t0.elapsed().as_secs_f64() * 1e6;
        let t1 = Instant::now();
        let mu = vp.predict(&x);
        prd_us[k] = t1.elapsed().as_secs_f64() * 1e6;
        std::hint::black_box(mu);
    }
    let budget_ms = tau * 1e3;
    let mut segments = Vec::new();
    for &size in &sizes {
        let lo = size / 2;
        let hi = size.min(max_size);
        let upd = &upd_us[lo..hi];
        let prd = &prd_us[lo..hi];
        let stats = latency_stats(upd, prd, budget_ms);
        let n = upd.len() as f64;
        let mu = upd.iter().sum::<f64>() / n / 1000.0;
        let mp = prd.iter().sum::<f64>() / n / 1000.0;
        segments.push(BenchSegment {
            size,
            mean_update_ms: mu,
            mean_predict_ms: mp,
            mean_combined_ms: mu + mp,
            stats,
        });
    }
    let growth_ratios = segments
        .windows(2)
        .map(|w| w[1].mean_combined_ms / w[0].mean_combined_ms)
        .collect();
    let exact_baseline_ms = with_baseline.then(|| exact_gp_tick_cost_ms(max_size.min(10_000)));
    let leaf_counts = vp.trees().iter().map(|t| t.leaf_count()).collect();
    Ok(BenchReport { tick_budget_ms: budget_ms, segments, growth_ratios, exact_baseline_ms, leaf_counts })
}

/// Per-tick cost of exact streaming GP inference at `n` stored points: one
/// kernel row, one rank-one factor extension (forward substitution), and one
/// posterior evaluation (mean plus variance solve). The factor is synthetic
/// and well conditioned; the arithmetic volume is what matters.
pub fn exact_gp_tick_cost_ms(n: usize) -> f64 {
    // Packed lower-triangular factor: unit diagonal, small off-diagonal.
    let mut rows = vec![0.0f64; n * (n + 1) / 2];
    let mut idx = 0;
    for i in 0..n {
        for j in 0..i {
            rows[idx + j] = if i - j < 4 { 1e-3 } else { 0.0 };
        }
        rows[idx + i] = 1.0;
        idx += i + 1;
    }
    let hp = Hyperparameters::new(1.0, vec![0.2; 7], 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<Vec<f64>> = (0..n).map(|k| synthetic_input(&mut rng, k as f64 * 5e-3)).collect();
    let query = synthetic_input(&mut rng, 0.0);
    let alpha: Vec<f64> = (0..n).map(|i| (i as f64 * 0.01).sin()).collect();
    let reps = 3;
    let t0 = Instant::now();
    for _ in 0..reps {
        // Kernel row against all stored inputs.
        let mut k: Vec<f64> = data.iter().map(|x| crate::gp::kernel_eval(x, &query, &hp)).collect();
        // Posterior mean.
        let mean: f64 = k.iter().zip(alpha.iter()).map(|(a, b)| a * b).sum();
        std::hint::black_box(mean);
        // Rank-one extension / variance: forward substitution L w = k.
        let mut off = 0;
        for i in 0..n {
            let mut s = k[i];
            for j in 0..i {
                s -= rows[off + j] * k[j];
            }
            k[i] = s / rows[off + i];
            off += i + 1;
        }
        std::hint::black_box(&k);
    }
    t0.elapsed().as_secs_f64() * 1e3 / reps as f64
}
