//! Image metrics, analytic FLOPs accounting and the attention latency bench.

mod bench;
mod flops;

pub use bench::{bench_csv, bench_speedup, median, BenchConfig, BenchRecord};
pub use flops::{
    flops_attention, flops_conv, flops_report_csv, unet_flops_breakdown, ArchConfig, BlockSpec, FlopsReport,
    REFERENCE_ARCH,
};

use crate::error::{Error, Result};

/// Mean absolute difference.
pub fn mae(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim("mae", &[a.len()], &[b.len()]));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    /// Dynamic range of the pixel values.
    pub range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 8,
            range: 2.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Mean SSIM over non-overlapping `window × window` tiles of two row-major
/// images `width` pixels wide. Partial tiles at the border are skipped.
pub fn ssim_with(a: &[f64], b: &[f64], width: usize, cfg: &SsimConfig) -> Result<f64> {
    if a.len() != b.len() || width == 0 || !a.len().is_multiple_of(width) {
        return Err(Error::dim("ssim", &[a.len(), width], &[b.len(), width]));
    }
    let height = a.len() / width;
    let w = cfg.window;
    if w == 0 || width < w || height < w {
        return Err(Error::contract(format!("ssim window {w} larger than {width}x{height} image")));
    }
    let c1 = (cfg.k1 * cfg.range).powi(2);
    let c2 = (cfg.k2 * cfg.range).powi(2);
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut tiles = 0;
    for ty in 0..height / w {
        for tx in 0..width / w {
            let px = |img: &[f64], i: usize| img[(ty * w + i / w) * width + tx * w + i % w];
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..w * w {
                ma += px(a, i);
                mb += px(b, i);
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..w * w {
                let (da, db) = (px(a, i) - ma, px(b, i) - mb);
                va += da * da;
                vb += db * db;
                cov += da * db;
            }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            tiles += 1;
        }
    }
    Ok(total / tiles as f64)
}

/// SSIM of two 32-wide images with the defaults (8×8 tiles, range 2).
pub fn ssim(a: &[f64], b: &[f64]) -> Result<f64> {
    ssim_with(a, b, 32, &SsimConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn mae_examples() {
        let a = Rng::new(1).uniform_vec(1024, -1.0, 1.0);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&[1.0; 16], &[0.0; 16]).unwrap(), 1.0);
        let board: Vec<f64> = (0..1024).map(|i| if (i / 32 + i % 32) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let inv: Vec<f64> = board.iter().map(|v| -v).collect();
        assert_eq!(mae(&board, &inv).unwrap(), 2.0);
        assert!(matches!(mae(&[1.0], &[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn ssim_identity_and_shape_errors() {
        let a = Rng::new(2).uniform_vec(1024, -1.0, 1.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &a[..512]).is_err());
        assert!(ssim_with(&a[..32 * 4], &a[..32 * 4], 32, &SsimConfig::default()).is_err());
    }

    #[test]
    fn ssim_hand_tile() {
        // one 2×2 tile: a = (0, 0, 0, 0) vs b = (1, −1, 1, −1):
        // μ = 0 for both, σ_a² = 0, σ_b² = 1, cov = 0 → c2 / (1 + c2)
        let cfg = SsimConfig {
            window: 2,
            ..Default::default()
        };
        let c2 = 0.06f64.powi(2);
        let s = ssim_with(&[0.0; 4], &[1.0, -1.0, 1.0, -1.0], 2, &cfg).unwrap();
        assert!((s - c2 / (1.0 + c2)).abs() < 1e-15, "{s}");
    }

    #[test]
    fn negated_zero_mean_image_scores_below_zero() {
        // zero mean inside every 8×8 tile, so the luminance term is 1 and
        // the structure term is negative
        let mut a = Rng::new(3).normal_vec(1024);
        for ty in 0..4 {
            for tx in 0..4 {
                let idx: Vec<usize> = (0..64).map(|i| (ty * 8 + i / 8) * 32 + tx * 8 + i % 8).collect();
                let m = idx.iter().map(|&i| a[i]).sum::<f64>() / 64.0;
                idx.iter().for_each(|&i| a[i] = (a[i] - m) * 0.3);
            }
        }
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let s = ssim(&a, &neg).unwrap();
        assert!(s < 0.0, "{s}");
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(seed in 0u64..1000) {
            let mut r = Rng::new(seed);
            let a = r.uniform_vec(1024, -1.0, 1.0);
            let b = r.uniform_vec(1024, -1.0, 1.0);
            let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert_eq!(ab, ba);
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        }
    }
}
