use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::pruned_attention::{unit_direction, PrunerSample};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::denoiser::ToyDenoiser;
use super::image::{ToyImage, PIXELS};
use super::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate decays linearly to `lr·lr_floor` over the run.
    pub lr_floor: f64,
    pub log_every: usize,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 16,
            lr: 2e-3,
            lr_floor: 0.05,
            log_every: 50,
        }
    }
}

impl DenoiserTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.log_every == 0 {
            return Err(Error::Config("batch and log_every must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config(format!("bad learning rate {} / floor {}", self.lr, self.lr_floor)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

pub fn loss_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("step,loss\n");
    for p in curve {
        s.push_str(&format!("{},{:.8e}\n", p.step, p.loss));
    }
    s
}

/// A noised batch: `x_τ = √ᾱ·x₀ + √(1−ᾱ)·ε` with τ uniform on (0, T].
pub struct NoisedBatch {
    pub x: Tensor,
    pub eps: Tensor,
    pub taus: Vec<f64>,
}

pub fn noised_batch(schedule: &NoiseSchedule, images: &[&ToyImage], rng: &mut Rng) -> Result<NoisedBatch> {
    let t_max = schedule.t_max() as f64;
    let mut x = Vec::with_capacity(images.len() * PIXELS);
    let mut eps = Vec::with_capacity(images.len() * PIXELS);
    let mut taus = Vec::with_capacity(images.len());
    for img in images {
        let tau = t_max * (1.0 - rng.uniform(0.0, 1.0));
        let ab = schedule.alpha_bar_at(tau)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for &p in img.data() {
            let e = rng.normal();
            x.push(a * p + s * e);
            eps.push(e);
        }
        taus.push(tau);
    }
    let shape = vec![images.len(), 1, super::SIDE, super::SIDE];
    Ok(NoisedBatch {
        x: Tensor::new(shape.clone(), x)?,
        eps: Tensor::new(shape, eps)?,
        taus,
    })
}

/// Bottleneck tokens of noised `images` at timesteps drawn from
/// (0, tau_max], paired with `directions`, as pruner training data.
pub fn bottleneck_samples(
    model: &ToyDenoiser,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    images: &[&ToyImage],
    directions: &[Vec<f64>],
    tau_max: f64,
    rng: &mut Rng,
) -> Result<Vec<PrunerSample>> {
    if images.len() != directions.len() {
        return Err(Error::contract(format!(
            "{} images but {} directions",
            images.len(),
            directions.len()
        )));
    }
    if !(tau_max > 0.0 && tau_max <= schedule.t_max() as f64) {
        return Err(Error::Config(format!("tau_max = {tau_max} outside (0, {}]", schedule.t_max())));
    }
    let n = model.cfg.tokens();
    let c = model.cfg.c3;
    let mut out = Vec::with_capacity(images.len());
    for (img, dir) in images.iter().zip(directions) {
        let tau = tau_max * (1.0 - rng.uniform(0.0, 1.0));
        let ab = schedule.alpha_bar_at(tau)?;
        let x: Vec<f64> = img.data().iter().map(|&p| ab.sqrt() * p + (1.0 - ab).sqrt() * rng.normal()).collect();
        let x = Tensor::new(vec![1, 1, super::SIDE, super::SIDE], x)?;
        let tokens = model.attention_inputs(store, &x, &[tau])?.reshape(&[n, c])?;
        out.push(PrunerSample {
            tokens,
            direction: unit_direction(dir)?,
        });
    }
    Ok(out)
}

/// Fits ε-prediction with MSE. On a non-finite loss the parameters from the
/// previous step are left in `store` and a training error is returned.
pub fn train_denoiser(
    model: &ToyDenoiser,
    store: &mut ParamStore,
    schedule: &NoiseSchedule,
    images: &[ToyImage],
    cfg: &DenoiserTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<LossPoint>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::contract("denoiser training set is empty"));
    }
    let mut opt = Adam::new(cfg.lr);
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let batch: Vec<&ToyImage> = (0..cfg.batch).map(|_| &images[rng.below(images.len())]).collect();
        let nb = noised_batch(schedule, &batch, rng)?;
        let g = Graph::new();
        let x = g.constant(nb.x);
        let pred = model.forward(&g, store, x, &nb.taus, None)?;
        let loss = g.mse(pred, g.constant(nb.eps))?;
        let lv = g.scalar_value(loss);
        if !lv.is_finite() {
            return Err(Error::Training { step, loss: lv });
        }
        g.backward(loss)?;
        store.zero_grad();
        store.accumulate_grads(&g)?;
        let frac = step as f64 / cfg.steps.max(1) as f64;
        opt.lr = cfg.lr * (1.0 - (1.0 - cfg.lr_floor) * frac);
        opt.step(store)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            debug!("denoiser step {step}: loss {lv:.5e}");
            curve.push(LossPoint { step, loss: lv });
        }
        if step % (cfg.log_every * 20) == 0 {
            info!("denoiser step {step}/{}: loss {lv:.4e}", cfg.steps);
        }
    }
    Ok(curve)
}

/// Mean ε-MSE over `draws` noise draws per image from a fixed seed.
pub fn denoiser_loss(
    model: &ToyDenoiser,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    images: &[ToyImage],
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if images.is_empty() || draws == 0 {
        return Err(Error::contract("loss evaluation needs images and draws"));
    }
    let mut rng = Rng::new(seed);
    let mut total = 0.0;
    let mut count = 0;
    for _ in 0..draws {
        for chunk in images.chunks(32) {
            let refs: Vec<&ToyImage> = chunk.iter().collect();
            let nb = noised_batch(schedule, &refs, &mut rng)?;
            let pred = model.predict(store, &nb.x, &nb.taus, None)?;
            total += pred.data().iter().zip(nb.eps.data()).map(|(p, e)| (p - e) * (p - e)).sum::<f64>();
            count += pred.len();
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottleneck_samples_shape() {
        let mut store = ParamStore::new();
        let cfg = super::super::DenoiserConfig {
            c1: 2,
            c2: 3,
            c3: 4,
            t_dim: 8,
        };
        let model = ToyDenoiser::new(&mut store, cfg, &mut Rng::new(0)).unwrap();
        let imgs = super::super::SyntheticDataset::new(0, super::super::Split::Train, 2).images().unwrap();
        let refs: Vec<&ToyImage> = imgs.iter().collect();
        let dirs = vec![vec![3.0, 4.0], vec![0.0, 2.0]];
        let sched = NoiseSchedule::default();
        let s = bottleneck_samples(&model, &store, &sched, &refs, &dirs, 300.0, &mut Rng::new(1)).unwrap();
        assert_eq!(s[0].tokens.shape(), &[64, 4]);
        assert_eq!(s[0].direction, vec![0.6, 0.8]);
        assert!(bottleneck_samples(&model, &store, &sched, &refs, &dirs[..1], 300.0, &mut Rng::new(1)).is_err());
    }
    use crate::diffusion_toy::{DenoiserConfig, Split, SyntheticDataset};

    fn small() -> (ParamStore, ToyDenoiser) {
        let mut store = ParamStore::new();
        let cfg = DenoiserConfig {
            c1: 2,
            c2: 3,
            c3: 4,
            t_dim: 8,
        };
        let m = ToyDenoiser::new(&mut store, cfg, &mut Rng::new(3)).unwrap();
        (store, m)
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let (mut store, m) = small();
        let before = store.clone();
        let imgs = SyntheticDataset::new(0, Split::Train, 4).images().unwrap();
        let cfg = DenoiserTrainConfig {
            steps: 0,
            ..Default::default()
        };
        let curve = train_denoiser(&m, &mut store, &NoiseSchedule::default(), &imgs, &cfg, &mut Rng::new(0)).unwrap();
        assert!(curve.is_empty());
        for (a, b) in store.iter().zip(before.iter()) {
            assert_eq!(a.value(), b.value());
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let (mut store, m) = small();
        let r = train_denoiser(&m, &mut store, &NoiseSchedule::default(), &[], &Default::default(), &mut Rng::new(0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn untrained_loss_is_unit_scale() {
        let (store, m) = small();
        let imgs = SyntheticDataset::new(0, Split::HeldOut, 8).images().unwrap();
        let l = denoiser_loss(&m, &store, &NoiseSchedule::default(), &imgs, 2, 9).unwrap();
        assert!(l > 0.5 && l < 3.0, "{l}");
    }

    #[test]
    fn noised_batch_marginals() {
        let s = NoiseSchedule::default();
        let img = ToyImage::filled(0.0);
        let refs = vec![&img; 64];
        let nb = noised_batch(&s, &refs, &mut Rng::new(1)).unwrap();
        assert!(nb.taus.iter().all(|&t| t > 0.0 && t <= 1000.0));
        // zero image: x = √(1−ᾱ)·ε exactly
        for (i, t) in nb.taus.iter().enumerate() {
            let k = (1.0 - s.alpha_bar_at(*t).unwrap()).sqrt();
            for p in i * PIXELS..(i + 1) * PIXELS {
                assert!((nb.x.data()[p] - k * nb.eps.data()[p]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn short_run_reduces_loss() {
        let (mut store, m) = small();
        let imgs = SyntheticDataset::new(0, Split::Train, 16).images().unwrap();
        let s = NoiseSchedule::default();
        let before = denoiser_loss(&m, &store, &s, &imgs, 2, 4).unwrap();
        let cfg = DenoiserTrainConfig {
            steps: 60,
            batch: 8,
            lr: 5e-3,
            ..Default::default()
        };
        train_denoiser(&m, &mut store, &s, &imgs, &cfg, &mut Rng::new(0)).unwrap();
        let after = denoiser_loss(&m, &store, &s, &imgs, 2, 4).unwrap();
        assert!(after < before, "{before} -> {after}");
    }
}
