use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics_flops::{mae, ssim};

use super::ddim::Pipeline;
use super::image::ToyImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub t0s: Vec<f64>,
    pub s_fors: Vec<usize>,
    pub s_gens: Vec<usize>,
    /// Cells with `s_for` at or above this use only `subsample_images`.
    pub subsample_from: usize,
    pub subsample_images: usize,
    /// Images per inversion batch.
    pub chunk: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            t0s: vec![300.0, 450.0, 600.0],
            s_fors: vec![6, 40, 500],
            s_gens: vec![6, 40, 500],
            subsample_from: 500,
            subsample_images: 8,
            chunk: 32,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t0s.is_empty() || self.s_fors.is_empty() || self.s_gens.is_empty() {
            return Err(Error::Config("grid axes must be non-empty".into()));
        }
        if self.s_fors.contains(&0) || self.s_gens.contains(&0) || self.subsample_images == 0 || self.chunk == 0 {
            return Err(Error::Config("grid step counts and sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub t0: f64,
    pub s_for: usize,
    pub s_gen: usize,
    pub images: usize,
    pub mae: f64,
    pub ssim: f64,
}

pub fn grid_csv(cells: &[GridCell]) -> String {
    let mut s = String::from("t0,s_for,s_gen,images,mae,ssim\n");
    for c in cells {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            c.t0, c.s_for, c.s_gen, c.images, c.mae, c.ssim
        ));
    }
    s
}

/// Inverts each image with every `(t0, s_for)` and regenerates it with
/// every `s_gen`, reporting mean MAE and SSIM against the input. One
/// inversion is shared by all `s_gen` values of its cell row.
pub fn recon_grid(pipeline: &Pipeline, images: &[ToyImage], cfg: &GridConfig) -> Result<Vec<GridCell>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::contract("reconstruction grid needs at least one image"));
    }
    let mut cells = Vec::new();
    for &t0 in &cfg.t0s {
        for &s_for in &cfg.s_fors {
            let n = if s_for >= cfg.subsample_from {
                cfg.subsample_images.min(images.len())
            } else {
                images.len()
            };
            let mut sums = vec![(0.0, 0.0); cfg.s_gens.len()];
            for chunk in images[..n].chunks(cfg.chunk) {
                let xt = pipeline.invert(&ToyImage::batch(chunk), t0, s_for)?;
                for (j, &s_gen) in cfg.s_gens.iter().enumerate() {
                    let out = ToyImage::unbatch(&pipeline.generate(&xt, t0, s_gen, None)?.x0_final)?;
                    for (a, b) in chunk.iter().zip(&out) {
                        sums[j].0 += mae(a.data(), b.data())?;
                        sums[j].1 += ssim(a.data(), b.data())?;
                    }
                }
            }
            for (j, &s_gen) in cfg.s_gens.iter().enumerate() {
                let cell = GridCell {
                    t0,
                    s_for,
                    s_gen,
                    images: n,
                    mae: sums[j].0 / n as f64,
                    ssim: sums[j].1 / n as f64,
                };
                info!("grid t0={t0} s_for={s_for} s_gen={s_gen}: mae {:.4} ssim {:.4}", cell.mae, cell.ssim);
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

/// Orderings a reconstruction grid is expected to show. Returns one message
/// per violated relation; empty means all hold.
pub fn grid_trend_violations(cells: &[GridCell]) -> Vec<String> {
    let mut out = Vec::new();
    let find = |t0: f64, s_for: usize, s_gen: usize| {
        cells
            .iter()
            .find(|c| c.t0 == t0 && c.s_for == s_for && c.s_gen == s_gen)
    };
    let mut axis = |key: &dyn Fn(&GridCell) -> (u64, usize), step: &dyn Fn(&GridCell) -> usize, name: &str| {
        let mut groups: Vec<Vec<&GridCell>> = Vec::new();
        for c in cells {
            match groups.iter_mut().find(|g| key(g[0]) == key(c)) {
                Some(g) => g.push(c),
                None => groups.push(vec![c]),
            }
        }
        for mut g in groups {
            g.sort_by_key(|c| step(c));
            for w in g.windows(2) {
                if w[1].mae > w[0].mae {
                    out.push(format!(
                        "MAE rises along {name} at t0={} s_for={} s_gen={} -> {}: {:.5} -> {:.5}",
                        w[0].t0,
                        w[0].s_for,
                        w[0].s_gen,
                        step(w[1]),
                        w[0].mae,
                        w[1].mae
                    ));
                }
            }
        }
    };
    axis(&|c| (c.t0.to_bits(), c.s_gen), &|c| c.s_for, "s_for");
    axis(&|c| (c.t0.to_bits(), c.s_for), &|c| c.s_gen, "s_gen");
    let deepest = cells.iter().map(|c| c.t0).fold(f64::NEG_INFINITY, f64::max);
    let fewest = cells.iter().map(|c| c.s_for).min().unwrap_or(0);
    let mut s_gens: Vec<usize> = cells.iter().map(|c| c.s_gen).collect();
    s_gens.sort_unstable();
    s_gens.dedup();
    for s_gen in s_gens {
        let Some(worst) = find(deepest, fewest, s_gen) else {
            continue;
        };
        for c in cells.iter().filter(|c| c.s_gen == s_gen) {
            if c.mae > worst.mae {
                out.push(format!(
                    "cell t0={} s_for={} s_gen={s_gen} has MAE {:.5} above t0={deepest} s_for={fewest} ({:.5})",
                    c.t0, c.s_for, c.mae, worst.mae
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::diffusion_toy::{DenoiserConfig, NoiseSchedule, Split, SyntheticDataset, ToyDenoiser};
    use crate::rng::Rng;

    fn cell(t0: f64, s_for: usize, s_gen: usize, mae: f64) -> GridCell {
        GridCell {
            t0,
            s_for,
            s_gen,
            images: 1,
            mae,
            ssim: 1.0,
        }
    }

    #[test]
    fn grid_rows_and_csv() {
        let mut store = ParamStore::new();
        let cfg = DenoiserConfig {
            c1: 2,
            c2: 2,
            c3: 2,
            t_dim: 4,
        };
        let model = ToyDenoiser::new(&mut store, cfg, &mut Rng::new(0)).unwrap();
        let schedule = NoiseSchedule::default();
        let pipe = Pipeline {
            model: &model,
            store: &store,
            schedule: &schedule,
            prune: None,
        };
        let imgs = SyntheticDataset::new(0, Split::HeldOut, 3).images().unwrap();
        let g = GridConfig {
            t0s: vec![100.0, 200.0],
            s_fors: vec![2, 5],
            s_gens: vec![1, 3],
            subsample_from: 5,
            subsample_images: 1,
            chunk: 2,
        };
        let cells = recon_grid(&pipe, &imgs, &g).unwrap();
        assert_eq!(cells.len(), 8);
        assert!(cells.iter().filter(|c| c.s_for == 5).all(|c| c.images == 1));
        assert!(cells.iter().filter(|c| c.s_for == 2).all(|c| c.images == 3));
        let csv = grid_csv(&cells);
        assert!(csv.starts_with("t0,s_for,s_gen,images,mae,ssim\n"));
        assert_eq!(csv.lines().count(), 9);
        assert!(recon_grid(&pipe, &[], &g).is_err());
        assert!(recon_grid(&pipe, &imgs, &GridConfig { s_gens: vec![0], ..g }).is_err());
    }

    #[test]
    fn trend_checker() {
        let good = vec![
            cell(300.0, 6, 6, 0.05),
            cell(300.0, 6, 40, 0.04),
            cell(300.0, 40, 6, 0.04),
            cell(300.0, 40, 40, 0.02),
            cell(600.0, 6, 6, 0.10),
            cell(600.0, 6, 40, 0.08),
            cell(600.0, 40, 6, 0.06),
            cell(600.0, 40, 40, 0.03),
        ];
        assert!(grid_trend_violations(&good).is_empty());
        let mut bad = good.clone();
        bad[1].mae = 0.06;
        let v = grid_trend_violations(&bad);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("s_gen"));
        let mut bad = good;
        bad[2].mae = 0.2;
        let v = grid_trend_violations(&bad);
        assert!(v.iter().any(|m| m.contains("above")), "{v:?}");
    }
}
