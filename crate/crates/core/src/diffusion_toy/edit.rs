use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, ParamStore};
use crate::blending::BlendParams;
use crate::error::{Error, Result};
use crate::geometry::{BlockConfig, RetractionConfig, RiemannianBlock, SolverConfig};
use crate::prompt_enrichment::{edit_direction, mock_caption, target_caption, ShapeLabels};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::dataset::{background_mae, brightness_probe, Attribute, Sample};
use super::ddim::{EditHook, Pipeline};
use super::denoiser::ToyDenoiser;
use super::image::{ToyImage, PIXELS};
use super::schedule::{timestep_embedding, NoiseSchedule};

/// Generic fallback prompts used when no caption is available.
pub const BASE_SOURCE_TEXT: &str = "a shape on dark background";
pub const BASE_TARGET_TEXT: &str = "a bright shape on dark background";

/// Inversion, generation and blending knobs of one edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub t0: f64,
    pub s_for: usize,
    pub s_gen: usize,
    pub alpha_inner: f64,
    pub alpha_outer: f64,
    pub rho: f64,
    pub outer_per_step: bool,
    pub source_text: String,
    pub target_text: String,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            t0: 300.0,
            s_for: 40,
            s_gen: 40,
            alpha_inner: 1.0,
            alpha_outer: 0.1,
            rho: 0.0,
            outer_per_step: false,
            source_text: BASE_SOURCE_TEXT.into(),
            target_text: BASE_TARGET_TEXT.into(),
        }
    }
}

impl EditConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.s_for == 0 || self.s_gen == 0 {
            return Err(Error::Config("s_for and s_gen must be at least 1".into()));
        }
        if !(self.t0 > 0.0 && self.t0 < t_max as f64) {
            return Err(Error::Config(format!("t0 = {} must lie in (0, {t_max})", self.t0)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho = {} must lie in [0, 1)", self.rho)));
        }
        self.blend().validate()
    }

    pub fn blend(&self) -> BlendParams {
        BlendParams {
            alpha_inner: self.alpha_inner,
            alpha_outer: self.alpha_outer,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Training timesteps are drawn uniformly from (0, tau_max].
    pub tau_max: f64,
    pub direction_weight: f64,
    pub fidelity_weight: f64,
    pub r_max: f64,
    pub rank: usize,
    pub hidden: usize,
    /// Learning-rate multiplier for the tangent map weights `w_v`.
    pub tangent_lr_scale: f64,
    pub solver: SolverConfig,
    /// Learning-rate multiplier for the Christoffel model and `w_t`.
    pub curvature_lr_scale: f64,
    pub log_every: usize,
}

impl Default for EditTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch: 4,
            lr: 1e-2,
            tau_max: 30.0,
            direction_weight: 1.0,
            fidelity_weight: 5.0,
            r_max: 8.0,
            rank: 8,
            hidden: 16,
            tangent_lr_scale: 0.1,
            solver: SolverConfig::default(),
            curvature_lr_scale: 0.001,
            log_every: 10,
        }
    }
}

impl EditTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.batch == 0 || self.log_every == 0 || self.rank == 0 || self.hidden == 0 {
            return Err(Error::Config("edit training sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.tau_max > 0.0 && self.r_max > 0.0) {
            return Err(Error::Config("lr, tau_max and r_max must be positive".into()));
        }
        if !(self.tangent_lr_scale >= 0.0 && self.curvature_lr_scale >= 0.0) {
            return Err(Error::Config("learning-rate scales must be non-negative".into()));
        }
        if !(self.direction_weight >= 0.0 && self.fidelity_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn block_config(&self, model: &ToyDenoiser, dir_dim: usize) -> BlockConfig {
        BlockConfig {
            rank: self.rank,
            hidden: self.hidden,
            retraction: RetractionConfig { r_max: self.r_max },
            solver: self.solver.clone(),
            ..BlockConfig::new(model.cfg.h_dim(), model.cfg.t_dim, dir_dim)
        }
    }
}

/// A supervised edit: source and target images plus the edit direction.
#[derive(Clone, Debug)]
pub struct EditPair {
    pub source: Sample,
    pub target: Sample,
    pub direction: Vec<f64>,
}

impl EditPair {
    /// Pixels where source and target may differ.
    pub fn mask(&self) -> Vec<bool> {
        self.source.mask.iter().zip(&self.target.mask).map(|(a, b)| *a || *b).collect()
    }
}

/// Directions from per-sample captions (`enriched`) or the generic prompts.
pub fn edit_pairs(pairs: Vec<(Sample, Sample)>, attr: Attribute, enriched: bool) -> Result<Vec<EditPair>> {
    let generic = edit_direction(BASE_SOURCE_TEXT, BASE_TARGET_TEXT)?;
    pairs
        .into_iter()
        .map(|(source, target)| {
            let direction = if enriched {
                let l = ShapeLabels::from(&source);
                match edit_direction(&mock_caption(&l), &target_caption(&l, attr)) {
                    Ok(d) => d,
                    Err(Error::Degenerate(_)) => generic.clone(),
                    Err(e) => return Err(e),
                }
            } else {
                generic.clone()
            };
            Ok(EditPair {
                source,
                target,
                direction,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EditCurvePoint {
    pub step: usize,
    pub loss: f64,
    pub direction: f64,
    pub fidelity: f64,
}

pub fn edit_curve_csv(curve: &[EditCurvePoint]) -> String {
    let mut s = String::from("step,loss,direction,fidelity\n");
    for p in curve {
        s.push_str(&format!("{},{:.8e},{:.8e},{:.8e}\n", p.step, p.loss, p.direction, p.fidelity));
    }
    s
}

/// Registers a fresh edit block sized for `model`. The Christoffel output
/// factor starts at zero, so initial geodesics are straight lines, and `b_v`
/// gets small noise so the initial prediction change has a direction.
pub fn new_edit_block(
    store: &mut ParamStore,
    model: &ToyDenoiser,
    dir_dim: usize,
    cfg: &EditTrainConfig,
    rng: &mut Rng,
) -> Result<RiemannianBlock> {
    cfg.validate()?;
    let block = RiemannianBlock::new(store, "edit", cfg.block_config(model, dir_dim), rng)?;
    let id = store
        .id("edit.christoffel.u")
        .ok_or_else(|| Error::Checkpoint("edit block lacks edit.christoffel.u".into()))?;
    let shape = store.get(id).value().shape().to_vec();
    store.set_value(id, Tensor::zeros(&shape))?;
    let id = store
        .id("edit.b_v")
        .ok_or_else(|| Error::Checkpoint("edit block lacks edit.b_v".into()))?;
    let noise = (0..block.cfg.dim).map(|_| rng.uniform(-INIT_NOISE, INIT_NOISE)).collect();
    store.set_value(id, Tensor::vector(noise))?;
    Ok(block)
}

/// Describes the edit block stored under `edit.` in `store`, using the
/// retraction radius and solver settings of `cfg`.
pub fn load_edit_block(store: &ParamStore, cfg: &EditTrainConfig) -> Result<RiemannianBlock> {
    RiemannianBlock::from_store(store, "edit", RetractionConfig { r_max: cfg.r_max }, cfg.solver.clone())
}

struct EditLoss {
    total: f64,
    direction: f64,
    fidelity: f64,
}

/// Half-width of the uniform initial `b_v`.
const INIT_NOISE: f64 = 1e-2;

/// Normalization floor for the per-sample prediction change.
const NORM_EPS: f64 = 1e-12;

/// One loss evaluation (and gradient accumulation into `edit_store`) on a
/// batch. Per sample, `δ = x0_sem − x0_fid = −√(1−ᾱ)/√ᾱ·(ε_sem − ε_fid)` and
/// `δ* = x_target − x_source`. The loss depends on the direction of `δ`
/// only, which is all the outer fuse uses:
/// direction = mean (1 − cos(δ, δ*))², fidelity = mean share of ‖δ‖²
/// outside the edit mask. Samples with `δ* = 0` instead add the mean of
/// `δ²` to the fidelity term.
#[allow(clippy::too_many_arguments)]
fn edit_step(
    model: &ToyDenoiser,
    frozen: &ParamStore,
    schedule: &NoiseSchedule,
    block: &RiemannianBlock,
    edit_store: &mut ParamStore,
    batch: &[&EditPair],
    cfg: &EditTrainConfig,
    rng: &mut Rng,
) -> Result<EditLoss> {
    let b = batch.len();
    let td = block.cfg.t_dim;
    let mut x = Vec::with_capacity(b * PIXELS);
    let mut taus = Vec::with_capacity(b);
    let mut coef = Vec::with_capacity(b);
    let mut target = Vec::with_capacity(b * PIXELS);
    let mut w_bg = Vec::with_capacity(b * PIXELS);
    let mut w_still = vec![0.0; b * PIXELS];
    let mut dirs = Vec::new();
    for p in batch {
        let tau = cfg.tau_max * (1.0 - rng.uniform(0.0, 1.0));
        let ab = schedule.alpha_bar_at(tau)?;
        for &v in p.source.image.data() {
            x.push(ab.sqrt() * v + (1.0 - ab).sqrt() * rng.normal());
        }
        taus.push(tau);
        coef.push(-(1.0 - ab).sqrt() / ab.sqrt());
        target.extend(p.target.image.data().iter().zip(p.source.image.data()).map(|(t, s)| t - s));
        w_bg.extend(p.mask().iter().map(|&m| if m { 0.0 } else { 1.0 }));
        if p.direction.len() != block.cfg.dir_dim {
            return Err(Error::dim("edit direction", &[p.direction.len()], &[block.cfg.dir_dim]));
        }
        dirs.extend_from_slice(&p.direction);
    }
    for (i, row) in target.chunks_mut(PIXELS).enumerate() {
        let n = crate::tensor::norm(row);
        if n == 0.0 {
            w_bg[i * PIXELS..(i + 1) * PIXELS].fill(0.0);
            w_still[i * PIXELS..(i + 1) * PIXELS].fill(1.0);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    let g = Graph::new();
    let xv = g.constant(Tensor::new(vec![b, 1, super::SIDE, super::SIDE], x)?);
    let enc = model.encode(&g, frozen, xv, &taus, None)?;
    let eps_fid = g.constant((*g.value(model.decode(&g, frozen, &enc, enc.h)?)).clone().reshape(&[b, PIXELS])?);
    let temb = Tensor::new(vec![b, td], taus.iter().flat_map(|&t| timestep_embedding(t, td)).collect())?;
    let out = block.forward(
        &g,
        edit_store,
        enc.h,
        g.constant(temb),
        g.constant(Tensor::new(vec![b, block.cfg.dir_dim], dirs)?),
    )?;
    let h_edit = g.add(enc.h, out.delta)?;
    let eps_sem = g.reshape(model.decode(&g, frozen, &enc, h_edit)?, &[b, PIXELS])?;
    let delta = g.scale_rows(g.sub(eps_sem, eps_fid)?, g.constant(Tensor::vector(coef)))?;
    let unit = g.normalize_rows(delta, NORM_EPS)?;
    let unit_target = g.constant(Tensor::new(vec![b, PIXELS], target)?);
    let cos = g.matmul(g.mul(unit, unit_target)?, g.constant(Tensor::ones(&[PIXELS, 1])))?;
    let direction = g.mse(cos, g.constant(Tensor::ones(&[b, 1])))?;
    let bg = g.mul(g.mul(unit, unit)?, g.constant(Tensor::new(vec![b, PIXELS], w_bg)?))?;
    let still = g.mul(delta, g.constant(Tensor::new(vec![b, PIXELS], w_still)?))?;
    let still = g.mse(still, g.constant(Tensor::zeros(&[b, PIXELS])))?;
    let fidelity = g.lincomb(g.scale(g.sum(bg), 1.0 / b as f64), &[(1.0, still)])?;
    let total = g.lincomb(
        g.scale(direction, cfg.direction_weight),
        &[(cfg.fidelity_weight, fidelity)],
    )?;
    let lv = g.scalar_value(total);
    if lv.is_finite() {
        g.backward(total)?;
        edit_store.zero_grad();
        edit_store.accumulate_grads(&g)?;
    }
    Ok(EditLoss {
        total: lv,
        direction: g.scalar_value(direction),
        fidelity: g.scalar_value(fidelity),
    })
}

/// Consecutive skipped batches tolerated before training gives up.
const MAX_SOLVER_FAILURES: usize = 20;

/// Trains the block on `pairs` against the frozen denoiser for
/// `cfg.epochs` passes. Returns the logged loss curve.
pub fn train_edit_module(
    model: &ToyDenoiser,
    denoiser_store: &ParamStore,
    schedule: &NoiseSchedule,
    block: &RiemannianBlock,
    edit_store: &mut ParamStore,
    pairs: &[EditPair],
    cfg: &EditTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<EditCurvePoint>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::contract("edit training needs at least one pair"));
    }
    edit_store.set_lr_scale("edit.w_v", cfg.tangent_lr_scale);
    edit_store.set_lr_scale("edit.w_t", cfg.curvature_lr_scale);
    edit_store.set_lr_scale("edit.christoffel.", cfg.curvature_lr_scale);
    let mut frozen = denoiser_store.clone();
    frozen.set_trainable(false);
    let mut opt = Adam::new(cfg.lr);
    let mut curve = Vec::new();
    let mut step = 0;
    let mut failures = 0;
    for epoch in 0..cfg.epochs {
        let order = rng.subset(pairs.len(), pairs.len());
        let mut shuffled: Vec<usize> = order;
        // Fisher–Yates on the ascending index set
        for i in (1..shuffled.len()).rev() {
            let j = rng.below(i + 1);
            shuffled.swap(i, j);
        }
        for chunk in shuffled.chunks(cfg.batch) {
            let batch: Vec<&EditPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let l = match edit_step(model, &frozen, schedule, block, edit_store, &batch, cfg, rng) {
                Ok(l) => {
                    failures = 0;
                    l
                }
                Err(e @ (Error::Divergence { .. } | Error::Budget { .. })) => {
                    failures += 1;
                    warn!("edit step {step}: geodesic solve failed ({e}), batch skipped");
                    if failures > MAX_SOLVER_FAILURES {
                        return Err(e);
                    }
                    step += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !l.total.is_finite() {
                return Err(Error::Training { step, loss: l.total });
            }
            opt.step(edit_store)?;
            if step % cfg.log_every == 0 {
                debug!("edit step {step}: loss {:.4e}", l.total);
                curve.push(EditCurvePoint {
                    step,
                    loss: l.total,
                    direction: l.direction,
                    fidelity: l.fidelity,
                });
            }
            step += 1;
        }
        info!("edit epoch {} done after {step} steps", epoch + 1);
    }
    Ok(curve)
}

/// Held-out edit statistics, averaged over samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EditEval {
    /// Object-mask mean of the edited output minus that of the source.
    pub probe_gain: f64,
    /// Mean |edited − source| outside the object mask.
    pub background_mae: f64,
    /// Same gain for the unedited reconstruction.
    pub recon_probe_gain: f64,
    pub edited: Vec<ToyImage>,
}

/// Inverts every source, regenerates it with the edit hook and measures
/// the probe gain and background drift against the source.
pub fn evaluate_edit(
    pipeline: &Pipeline,
    block: &RiemannianBlock,
    edit_store: &ParamStore,
    pairs: &[EditPair],
    cfg: &EditConfig,
) -> Result<EditEval> {
    cfg.validate(pipeline.schedule.t_max())?;
    if pairs.is_empty() {
        return Err(Error::contract("edit evaluation needs at least one pair"));
    }
    let mut gain = 0.0;
    let mut recon_gain = 0.0;
    let mut bg = 0.0;
    let mut edited = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(16) {
        let srcs: Vec<ToyImage> = chunk.iter().map(|p| p.source.image.clone()).collect();
        let x0 = ToyImage::batch(&srcs);
        let xt = pipeline.invert(&x0, cfg.t0, cfg.s_for)?;
        let dirs = Tensor::new(
            vec![chunk.len(), block.cfg.dir_dim],
            chunk.iter().flat_map(|p| p.direction.iter().copied()).collect(),
        )?;
        let hook = EditHook {
            block,
            store: edit_store,
            dirs: &dirs,
            blend: cfg.blend(),
            outer_per_step: cfg.outer_per_step,
        };
        let out = pipeline.generate(&xt, cfg.t0, cfg.s_gen, Some(&hook))?;
        let imgs = ToyImage::unbatch(&out.x0_final)?;
        let recon = ToyImage::unbatch(&out.x0_fid)?;
        for ((p, img), rec) in chunk.iter().zip(imgs).zip(recon) {
            let m = &p.source.mask;
            let base = brightness_probe(&p.source.image, m)?;
            gain += brightness_probe(&img, m)? - base;
            recon_gain += brightness_probe(&rec, m)? - base;
            bg += background_mae(&img, &p.source.image, &p.mask())?;
            edited.push(img);
        }
    }
    let n = pairs.len() as f64;
    Ok(EditEval {
        probe_gain: gain / n,
        background_mae: bg / n,
        recon_probe_gain: recon_gain / n,
        edited,
    })
}

/// Norm of the block's offset `Δh` for each pair's source at timestep
/// `tau`, averaged.
pub fn mean_offset_norm(
    model: &ToyDenoiser,
    denoiser_store: &ParamStore,
    block: &RiemannianBlock,
    edit_store: &ParamStore,
    pairs: &[EditPair],
    tau: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let g = Graph::new();
        let x = g.constant(p.source.image.to_tensor());
        let enc = model.encode(&g, denoiser_store, x, &[tau], None)?;
        let h = g.value(enc.h);
        let dh = block.offset(edit_store, h.data(), &timestep_embedding(tau, block.cfg.t_dim), &p.direction)?;
        total += crate::tensor::norm(&dh);
    }
    Ok(total / pairs.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion_toy::{DenoiserConfig, Split, SyntheticDataset};

    #[test]
    fn config_validation() {
        let c = EditConfig::default();
        assert!(c.validate(1000).is_ok());
        for bad in [
            EditConfig { alpha_inner: 1.5, ..c.clone() },
            EditConfig { s_gen: 0, ..c.clone() },
            EditConfig { t0: 1000.0, ..c.clone() },
            EditConfig { rho: 1.0, ..c.clone() },
        ] {
            assert!(bad.validate(1000).is_err());
        }
        assert!(EditTrainConfig { r_max: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn pairs_carry_unit_directions() {
        let raw = SyntheticDataset::new(0, Split::Train, 6).pairs(Attribute::Brightness, 0.5).unwrap();
        for p in edit_pairs(raw.clone(), Attribute::Brightness, true).unwrap() {
            assert!((crate::tensor::norm(&p.direction) - 1.0).abs() < 1e-12);
        }
        let generic = edit_pairs(raw, Attribute::Brightness, false).unwrap();
        assert!(generic.windows(2).all(|w| w[0].direction == w[1].direction));
    }

    #[test]
    fn empty_pairs_rejected() {
        let mut store = ParamStore::new();
        let cfg = DenoiserConfig {
            c1: 2,
            c2: 2,
            c3: 2,
            t_dim: 4,
        };
        let model = ToyDenoiser::new(&mut store, cfg, &mut Rng::new(0)).unwrap();
        let mut es = ParamStore::new();
        let tc = EditTrainConfig::default();
        let block = new_edit_block(&mut es, &model, 64, &tc, &mut Rng::new(1)).unwrap();
        let r = train_edit_module(
            &model,
            &store,
            &NoiseSchedule::default(),
            &block,
            &mut es,
            &[],
            &tc,
            &mut Rng::new(2),
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn identical_pairs_shrink_offset() {
        let mut store = ParamStore::new();
        let cfg = DenoiserConfig {
            c1: 2,
            c2: 3,
            c3: 4,
            t_dim: 8,
        };
        let model = ToyDenoiser::new(&mut store, cfg, &mut Rng::new(0)).unwrap();
        let mut es = ParamStore::new();
        let tc = EditTrainConfig {
            epochs: 150,
            log_every: 1,
            ..Default::default()
        };
        let block = new_edit_block(&mut es, &model, 64, &tc, &mut Rng::new(1)).unwrap();
        let id = es.id("edit.b_v").unwrap();
        let mut rng = Rng::new(5);
        let bv = (0..model.cfg.h_dim()).map(|_| rng.uniform(-0.5, 0.5)).collect();
        es.set_value(id, Tensor::vector(bv)).unwrap();
        let same: Vec<(Sample, Sample)> = SyntheticDataset::new(0, Split::Train, 4)
            .samples()
            .unwrap()
            .into_iter()
            .map(|s| (s.clone(), s))
            .collect();
        let pairs = edit_pairs(same, Attribute::Brightness, false).unwrap();
        let before = mean_offset_norm(&model, &store, &block, &es, &pairs, 10.0).unwrap();
        let sched = NoiseSchedule::default();
        train_edit_module(&model, &store, &sched, &block, &mut es, &pairs, &tc, &mut Rng::new(2)).unwrap();
        let after = mean_offset_norm(&model, &store, &block, &es, &pairs, 10.0).unwrap();
        assert!(after < 0.8 * before, "{before} -> {after}");
    }
}
