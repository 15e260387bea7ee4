//! Direction-conditioned token pruning for the bottleneck attention block.

mod head;
mod layer;

pub use head::PruningHead;
pub use layer::{validate_keep, AttentionWeights, PrunedAttentionLayer};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{norm, Tensor};

/// `k = ⌊N·(1 − ρ)⌋`, raised to 1 when it would be zero. Returns the count
/// and whether the clamp applied.
pub fn keep_count(n: usize, rho: f64) -> Result<(usize, bool)> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::contract(format!("pruning ratio must lie in [0, 1), got {rho}")));
    }
    if n == 0 {
        return Err(Error::contract("cannot prune an empty token sequence"));
    }
    // the epsilon absorbs representation error in 1 − ρ (e.g. 0.29 → 0.71)
    let k = (n as f64 * (1.0 - rho) + 1e-9).floor() as usize;
    Ok(if k == 0 { (1, true) } else { (k.min(n), false) })
}

/// Indices of the `k` highest scores, ties to the lower index, ascending.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("importance scores contain NaN"));
    }
    if k == 0 || k > scores.len() {
        return Err(Error::contract(format!("cannot keep {k} of {} tokens", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Per-sample keep sets for scores [B × N].
pub fn select_topk(scores: &Tensor, rho: f64) -> Result<Vec<Vec<usize>>> {
    let (b, n) = scores.dims2("select_topk")?;
    let (k, clamped) = keep_count(n, rho)?;
    if clamped {
        warn!("pruning ratio {rho} keeps no tokens of {n}; keeping one");
    }
    (0..b).map(|i| topk_indices(scores.row(i), k)).collect()
}

/// 8-bit heatmap of per-token scores in [0, 1], row-major H×W.
pub fn importance_heatmap(scores: &[f64]) -> Vec<u8> {
    scores.iter().map(|s| (s.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Binary PGM of [`importance_heatmap`] with `width` tokens per row.
pub fn heatmap_pgm(scores: &[f64], width: usize) -> Result<Vec<u8>> {
    if width == 0 || scores.is_empty() || !scores.len().is_multiple_of(width) {
        return Err(Error::contract(format!("{} scores do not fill rows of {width}", scores.len())));
    }
    let mut out = format!("P5\n{width} {}\n255\n", scores.len() / width).into_bytes();
    out.extend(importance_heatmap(scores));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrunerMode {
    SoftTrain,
    HardInfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrunerTrainConfig {
    pub lambda_sparsity: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub mode: PrunerMode,
    /// Pruning ratio used by the hard mode.
    pub rho: f64,
    pub log_every: usize,
}

impl Default for PrunerTrainConfig {
    fn default() -> Self {
        Self {
            lambda_sparsity: 0.1,
            lr: 3e-3,
            steps: 500,
            batch: 4,
            mode: PrunerMode::SoftTrain,
            rho: 0.5,
            log_every: 10,
        }
    }
}

impl PrunerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sparsity >= 0.0) {
            return Err(Error::contract(format!(
                "lambda_sparsity must be non-negative, got {}",
                self.lambda_sparsity
            )));
        }
        if !(self.lr > 0.0) || self.batch == 0 || self.log_every == 0 {
            return Err(Error::Config("pruner lr, batch and log_every must be positive".into()));
        }
        keep_count(2, self.rho).map(|_| ())
    }
}

/// One training example: tokens [N × C] and a unit edit direction.
#[derive(Clone, Debug)]
pub struct PrunerSample {
    pub tokens: Tensor,
    pub direction: Vec<f64>,
}

/// Unit-normalizes a direction vector.
pub fn unit_direction(d: &[f64]) -> Result<Vec<f64>> {
    let n = norm(d);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate("edit direction has zero or non-finite norm".into()));
    }
    Ok(d.iter().map(|x| x / n).collect())
}

/// Tokens with heavy-tailed magnitudes: a few large tokens dominate the
/// attention output, so importance is learnable from the features.
pub fn synthetic_samples(count: usize, n: usize, c: usize, dir_dim: usize, rng: &mut Rng) -> Result<Vec<PrunerSample>> {
    (0..count)
        .map(|_| {
            let mut data = Vec::with_capacity(n * c);
            for _ in 0..n {
                let m = (0.8 * rng.normal()).exp();
                let v = rng.normal_vec(c);
                let nv = norm(&v).max(1e-12);
                data.extend(v.into_iter().map(|x| m * x / nv * (c as f64).sqrt()));
            }
            Ok(PrunerSample {
                tokens: Tensor::new(vec![n, c], data)?,
                direction: unit_direction(&rng.normal_vec(dir_dim))?,
            })
        })
        .collect()
}

pub(crate) fn stack(samples: &[&PrunerSample]) -> Result<(Tensor, Tensor, usize)> {
    let (n, c) = samples[0].tokens.dims2("pruner sample")?;
    let de = samples[0].direction.len();
    let mut t = Vec::with_capacity(samples.len() * n * c);
    let mut d = Vec::with_capacity(samples.len() * de);
    for s in samples {
        if s.tokens.shape() != [n, c] || s.direction.len() != de {
            return Err(Error::dim("pruner batch", s.tokens.shape(), &[n, c]));
        }
        t.extend_from_slice(s.tokens.data());
        d.extend_from_slice(&s.direction);
    }
    Ok((
        Tensor::new(vec![samples.len() * n, c], t)?,
        Tensor::new(vec![samples.len(), de], d)?,
        n,
    ))
}

pub struct PrunerLoss {
    pub total: Var,
    pub fidelity: Var,
    pub sparsity: Var,
}

/// `L = MSE(pruned, dense) + λ·mean(S)`. Soft mode gates value rows by `S`;
/// hard mode prunes to the top-k tokens, so only the sparsity term carries
/// gradient.
#[allow(clippy::too_many_arguments)]
pub fn pruner_loss(
    g: &Graph,
    layer: &PrunedAttentionLayer,
    layer_store: &ParamStore,
    head: &PruningHead,
    head_store: &ParamStore,
    tokens: Var,
    n: usize,
    dir: Var,
    cfg: &PrunerTrainConfig,
) -> Result<PrunerLoss> {
    if !(cfg.lambda_sparsity >= 0.0) {
        return Err(Error::contract(format!("lambda_sparsity must be non-negative, got {}", cfg.lambda_sparsity)));
    }
    let s = head.score_graph(g, head_store, tokens, n, dir)?;
    let teacher = layer.dense_graph(g, layer_store, tokens, n)?;
    let teacher = g.constant((*g.value(teacher)).clone());
    let student = match cfg.mode {
        PrunerMode::SoftTrain => layer.gated_graph(g, layer_store, tokens, n, s)?,
        PrunerMode::HardInfer => {
            let keep = select_topk(&g.value(s), cfg.rho)?;
            layer.pruned_graph(g, layer_store, tokens, n, &keep)?
        }
    };
    let fidelity = g.mse(student, teacher)?;
    let sparsity = g.mean(s);
    let total = g.lincomb(fidelity, &[(cfg.lambda_sparsity, sparsity)])?;
    Ok(PrunerLoss {
        total,
        fidelity,
        sparsity,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrunerCurvePoint {
    pub step: usize,
    pub loss: f64,
    pub fidelity: f64,
    pub sparsity: f64,
}

pub fn curve_csv(curve: &[PrunerCurvePoint]) -> String {
    let mut s = String::from("step,loss,fidelity,sparsity\n");
    for p in curve {
        s.push_str(&format!("{},{:.8e},{:.8e},{:.8e}\n", p.step, p.loss, p.fidelity, p.sparsity));
    }
    s
}

/// Fits the head's parameters against the frozen layer. Returns the logged
/// curve, one point every `log_every` steps plus the final step.
pub fn train_pruning_head(
    data: &[PrunerSample],
    layer: &PrunedAttentionLayer,
    layer_store: &ParamStore,
    head: &PruningHead,
    head_store: &mut ParamStore,
    cfg: &PrunerTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<PrunerCurvePoint>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("pruner training set is empty"));
    }
    let train_cfg = PrunerTrainConfig {
        mode: PrunerMode::SoftTrain,
        ..cfg.clone()
    };
    let mut opt = Adam::new(cfg.lr);
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let batch: Vec<&PrunerSample> = (0..cfg.batch.min(data.len()))
            .map(|_| &data[rng.below(data.len())])
            .collect();
        let (t, d, n) = stack(&batch)?;
        let g = Graph::new();
        let (t, d) = (g.constant(t), g.constant(d));
        let l = pruner_loss(&g, layer, layer_store, head, head_store, t, n, d, &train_cfg)?;
        let loss = g.scalar_value(l.total);
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        g.backward(l.total)?;
        head_store.zero_grad();
        head_store.accumulate_grads(&g)?;
        opt.step(head_store)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let p = PrunerCurvePoint {
                step,
                loss,
                fidelity: g.scalar_value(l.fidelity),
                sparsity: g.scalar_value(l.sparsity),
            };
            debug!("pruner step {step}: loss {loss:.5e}");
            curve.push(p);
        }
    }
    Ok(curve)
}

/// Mean squared deviation from the dense output when keeping the head's
/// top-k tokens.
pub fn hard_prune_mse(
    data: &[PrunerSample],
    weights: &AttentionWeights,
    head: &PruningHead,
    head_store: &ParamStore,
    rho: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let (n, _) = s.tokens.dims2("pruner sample")?;
        let x = s.tokens.data();
        let scores = head.score(head_store, x, n, &s.direction)?;
        let (k, _) = keep_count(n, rho)?;
        let keep = topk_indices(&scores, k)?;
        total += mse(&weights.pruned_forward(x, n, &keep)?, &weights.dense_forward(x, n)?);
    }
    Ok(total / data.len() as f64)
}

/// Same as [`hard_prune_mse`] with a uniformly random keep set.
pub fn random_prune_mse(data: &[PrunerSample], weights: &AttentionWeights, rho: f64, rng: &mut Rng) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let (n, _) = s.tokens.dims2("pruner sample")?;
        let x = s.tokens.data();
        let (k, _) = keep_count(n, rho)?;
        let keep = rng.subset(n, k);
        total += mse(&weights.pruned_forward(x, n, &keep)?, &weights.dense_forward(x, n)?);
    }
    Ok(total / data.len() as f64)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean importance score over a dataset.
pub fn mean_score(data: &[PrunerSample], head: &PruningHead, head_store: &ParamStore) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let (n, _) = s.tokens.dims2("pruner sample")?;
        let sc = head.score(head_store, s.tokens.data(), n, &s.direction)?;
        total += sc.iter().sum::<f64>() / n as f64;
    }
    Ok(total / data.len() as f64)
}
