use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruned_attention::{keep_count, topk_indices, AttentionWeights};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub tokens: usize,
    pub channels: usize,
    pub rhos: Vec<f64>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            tokens: 4096,
            channels: 64,
            rhos: vec![0.0, 0.1, 0.2, 0.5, 0.9],
            repeats: 20,
            warmup: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub rho: f64,
    pub k: usize,
    pub median_ms: f64,
    pub dense_ms: f64,
    /// `dense_ms / median_ms`.
    pub speedup: f64,
    pub repeats: usize,
    pub samples_ms: Vec<f64>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_ms(f: impl FnOnce() -> Result<Vec<f64>>) -> Result<f64> {
    let t = Instant::now();
    let out = f()?;
    let ms = t.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(out);
    Ok(ms)
}

/// Median latency of the dense layer and of top-k pruned attention at each
/// ratio. Runs are interleaved across ratios so slow drift affects all of
/// them alike. Keep sets come from random scores.
pub fn bench_speedup(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.repeats < 5 {
        return Err(Error::contract(format!("benchmark needs at least 5 repeats, got {}", cfg.repeats)));
    }
    if cfg.tokens == 0 || cfg.channels == 0 || cfg.rhos.is_empty() {
        return Err(Error::Config("benchmark needs tokens, channels and ratios".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let (n, c) = (cfg.tokens, cfg.channels);
    let w = AttentionWeights::random(c, &mut rng);
    let x = rng.normal_vec(n * c);
    let scores = rng.uniform_vec(n, 0.0, 1.0);
    let mut keeps = Vec::new();
    for &rho in &cfg.rhos {
        let (k, _) = keep_count(n, rho)?;
        keeps.push(topk_indices(&scores, k)?);
    }
    for _ in 0..cfg.warmup {
        w.dense_forward(&x, n)?;
        for keep in &keeps {
            w.pruned_forward(&x, n, keep)?;
        }
    }
    let mut dense = Vec::with_capacity(cfg.repeats);
    let mut pruned = vec![Vec::with_capacity(cfg.repeats); keeps.len()];
    for _ in 0..cfg.repeats {
        dense.push(time_ms(|| w.dense_forward(&x, n))?);
        for (i, keep) in keeps.iter().enumerate() {
            pruned[i].push(time_ms(|| w.pruned_forward(&x, n, keep))?);
        }
    }
    let dense_ms = median(&dense);
    Ok(cfg
        .rhos
        .iter()
        .zip(keeps)
        .zip(pruned)
        .map(|((&rho, keep), samples)| {
            let m = median(&samples);
            BenchRecord {
                rho,
                k: keep.len(),
                median_ms: m,
                dense_ms,
                speedup: dense_ms / m,
                repeats: cfg.repeats,
                samples_ms: samples,
            }
        })
        .collect())
}

pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from("rho,k,median_ms,dense_ms,speedup_vs_dense,repeats\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{}\n",
            r.rho, r.k, r.median_ms, r.dense_ms, r.speedup, r.repeats
        ));
    }
    s
}
