use geoedit::autodiff::{Graph, ParamStore, Var};
use geoedit::diffusion_toy::{DenoiserConfig, ToyDenoiser};
use geoedit::geometry::{BlockConfig, ChristoffelConfig, ChristoffelModel, RiemannianBlock};
use geoedit::gradcheck::{GradCheck, GradReport};
use geoedit::pruned_attention::{pruner_loss, PrunedAttentionLayer, PrunerTrainConfig, PruningHead};
use geoedit::{Result, Rng, Tensor};

const OP_TOL: f64 = 1e-6;
const MODULE_TOL: f64 = 1e-4;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n)).unwrap()
}

/// Entries pushed at least 0.1 away from zero, so ReLU kinks stay out of
/// reach of the difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = randn(shape, rng);
    t.data_mut().iter_mut().for_each(|v| *v += 0.1 * v.signum());
    t
}

/// Scalar `Σ y ⊙ R` with a fixed random `R`, so every output entry carries
/// a distinct weight.
fn probe(g: &Graph, y: Var, seed: u64) -> Result<Var> {
    let r = randn(&g.shape(y), &mut Rng::new(seed));
    Ok(g.sum(g.mul(y, g.constant(r))?))
}

fn assert_ok(name: &str, r: GradReport, tol: f64) {
    assert!(r.checked > 0, "{name}: no entries checked");
    assert!(r.max_rel_err < tol, "{name}: max rel err {:.3e} ({:?})", r.max_rel_err, r.worst);
}

fn check_op<F>(name: &str, inputs: Vec<Tensor>, f: F)
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    check_op_with(name, GradCheck::default(), inputs, f)
}

fn check_op_with<F>(name: &str, gc: GradCheck, inputs: Vec<Tensor>, f: F)
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let mut rng = Rng::new(99);
    let r = gc
        .inputs(&inputs, |g, v| probe(g, f(g, v)?, 7), &mut rng)
        .unwrap_or_else(|e| panic!("{name}: {e}"));
    assert_ok(name, r, OP_TOL);
}

#[test]
fn elementwise_ops() {
    let mut rng = Rng::new(1);
    let a = away_from_zero(&[3, 4], &mut rng);
    let b = randn(&[3, 4], &mut rng);
    check_op("tanh", vec![a.clone()], |g, v| Ok(g.tanh(v[0])));
    check_op("sigmoid", vec![a.clone()], |g, v| Ok(g.sigmoid(v[0])));
    check_op("relu", vec![a.clone()], |g, v| Ok(g.relu(v[0])));
    check_op("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check_op("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check_op("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check_op("scale", vec![a.clone()], |g, v| Ok(g.scale(v[0], -2.5)));
    check_op("lincomb", vec![a.clone(), b.clone(), a.clone()], |g, v| {
        g.lincomb(v[0], &[(0.3, v[1]), (-1.7, v[2])])
    });
}

#[test]
fn reductions_and_losses() {
    let mut rng = Rng::new(2);
    let a = randn(&[3, 5], &mut rng);
    let b = randn(&[3, 5], &mut rng);
    check_op("sum", vec![a.clone()], |g, v| Ok(g.scale(g.sum(v[0]), 1.0)));
    check_op("mean", vec![a.clone()], |g, v| Ok(g.mean(v[0])));
    check_op("mse", vec![a.clone(), b.clone()], |g, v| g.mse(v[0], v[1]));
    check_op("softmax_rows", vec![a], |g, v| g.softmax_rows(v[0]));
}

#[test]
fn linear_algebra_ops() {
    let mut rng = Rng::new(3);
    let a = randn(&[3, 4], &mut rng);
    let b = randn(&[4, 2], &mut rng);
    check_op("matmul", vec![a.clone(), b], |g, v| g.matmul(v[0], v[1]));
    check_op("transpose", vec![a.clone()], |g, v| g.transpose(v[0]));
    check_op("reshape", vec![a.clone()], |g, v| g.reshape(v[0], &[2, 6]));
    let coeffs = randn(&[2, 3 * 4], &mut rng);
    let w = randn(&[2, 4], &mut rng);
    check_op("block_dot", vec![coeffs, w], |g, v| g.block_dot(v[0], v[1], 3));
}

#[test]
fn row_ops() {
    let mut rng = Rng::new(4);
    let x = randn(&[4, 3], &mut rng);
    let bias = randn(&[3], &mut rng);
    let s = randn(&[4], &mut rng);
    check_op("add_row_bias", vec![x.clone(), bias], |g, v| g.add_row_bias(v[0], v[1]));
    check_op("scale_rows", vec![x.clone(), s], |g, v| g.scale_rows(v[0], v[1]));
    check_op("repeat_rows", vec![x.clone()], |g, v| g.repeat_rows(v[0], 3));
    check_op("gather_rows", vec![x.clone()], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]));
    check_op("scatter_rows", vec![x.clone()], |g, v| g.scatter_rows(v[0], &[5, 1, 0, 3], 6));
    let y = randn(&[4, 2], &mut rng);
    check_op("concat_cols", vec![x.clone(), y], |g, v| g.concat_cols(&[v[0], v[1]]));
    let z = randn(&[2, 3], &mut rng);
    check_op("concat_rows", vec![x.clone(), z], |g, v| g.concat_rows(&[v[0], v[1]]));
    check_op("slice_rows", vec![x], |g, v| g.slice_rows(v[0], 1, 3));
}

#[test]
fn retraction_and_normalization() {
    let mut rng = Rng::new(5);
    let mut w = randn(&[3, 4], &mut rng);
    // one row inside the saturation knee, one far beyond it
    w.data_mut()[..4].iter_mut().for_each(|v| *v *= 0.05);
    w.data_mut()[8..].iter_mut().for_each(|v| *v *= 20.0);
    check_op("retract_rows", vec![w.clone()], |g, v| g.retract_rows(v[0], 2.0));
    check_op("normalize_rows", vec![w], |g, v| g.normalize_rows(v[0], 1e-12));
    let small = Tensor::new(vec![1, 3], vec![1e-4, -2e-4, 3e-4]).unwrap();
    // the stencil must be small against inputs of size 1e-4
    let fine = GradCheck {
        step: 1e-9,
        ..GradCheck::default()
    };
    check_op_with("normalize_rows near eps", fine, vec![small], |g, v| g.normalize_rows(v[0], 1e-4));
}

#[test]
fn image_ops() {
    let mut rng = Rng::new(6);
    let x = randn(&[2, 3, 5, 5], &mut rng);
    let w = randn(&[4, 3, 3, 3], &mut rng);
    check_op("conv2d stride 1", vec![x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], 1, 1));
    check_op("conv2d stride 2", vec![x.clone(), w], |g, v| g.conv2d(v[0], v[1], 2, 1));
    check_op("upsample2x", vec![x.clone()], |g, v| g.upsample2x(v[0]));
    let b = randn(&[2, 3], &mut rng);
    check_op("channel_bias", vec![x.clone(), b], |g, v| g.channel_bias(v[0], v[1]));
    check_op("to_tokens", vec![x], |g, v| g.to_tokens(v[0]));
    let t = randn(&[2 * 6, 3], &mut rng);
    check_op("from_tokens", vec![t], |g, v| g.from_tokens(v[0], 2, 2, 3));
}

fn check_params<F>(name: &str, store: &mut ParamStore, max_entries: usize, f: F)
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    check_params_with(
        name,
        store,
        GradCheck {
            max_entries,
            ..GradCheck::default()
        },
        f,
    )
}

fn check_params_with<F>(name: &str, store: &mut ParamStore, gc: GradCheck, f: F)
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let r = gc.params(store, f, &mut Rng::new(11)).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert_ok(name, r, MODULE_TOL);
}

#[test]
fn christoffel_model() {
    let mut rng = Rng::new(7);
    let mut store = ParamStore::new();
    let cfg = ChristoffelConfig {
        rank: 3,
        hidden: 5,
        ..ChristoffelConfig::new(4, 2)
    };
    let m = ChristoffelModel::new(&mut store, "c", cfg, &mut rng).unwrap();
    let (gamma, v, t) = (randn(&[2, 4], &mut rng), randn(&[2, 4], &mut rng), randn(&[2, 2], &mut rng));
    check_params("christoffel params", &mut store, usize::MAX, |g, s| {
        let a = m.accel(g, s, g.constant(gamma.clone()), g.constant(v.clone()), Some(g.constant(t.clone())))?;
        probe(g, a, 3)
    });
    let r = GradCheck::default()
        .inputs(
            &[gamma.clone(), v.clone(), t.clone()],
            |g, x| probe(g, m.accel(g, &store, x[0], x[1], Some(x[2]))?, 3),
            &mut rng,
        )
        .unwrap();
    assert_ok("christoffel inputs", r, MODULE_TOL);
}

fn small_block(store: &mut ParamStore, rng: &mut Rng) -> RiemannianBlock {
    let cfg = BlockConfig {
        rank: 2,
        hidden: 4,
        ..BlockConfig::new(3, 2, 2)
    };
    RiemannianBlock::new(store, "blk", cfg, rng).unwrap()
}

#[test]
fn block_with_frozen_steps() {
    let mut rng = Rng::new(8);
    let mut store = ParamStore::new();
    let block = small_block(&mut store, &mut rng);
    let (h, t, d) = (randn(&[2, 3], &mut rng), randn(&[2, 2], &mut rng), randn(&[2, 2], &mut rng));
    let steps = [0.3, 0.3, 0.4];
    check_params("block frozen steps", &mut store, usize::MAX, |g, s| {
        let dh = block.forward_fixed(g, s, g.constant(h.clone()), g.constant(t.clone()), g.constant(d.clone()), &steps)?;
        probe(g, dh, 4)
    });
}

#[test]
fn block_adaptive_steps_enter_as_constants() {
    let mut rng = Rng::new(9);
    let mut store = ParamStore::new();
    let block = small_block(&mut store, &mut rng);
    let (h, t, d) = (randn(&[2, 3], &mut rng), randn(&[2, 2], &mut rng), randn(&[2, 2], &mut rng));
    let g = Graph::new();
    let out = block
        .forward(&g, &store, g.constant(h.clone()), g.constant(t.clone()), g.constant(d.clone()))
        .unwrap();
    let steps = out.step_sizes.clone();
    assert!(steps.len() > 1);
    let g2 = Graph::new();
    let fixed = block
        .forward_fixed(&g2, &store, g2.constant(h.clone()), g2.constant(t.clone()), g2.constant(d.clone()), &steps)
        .unwrap();
    assert_eq!(g.value(out.delta).data(), g2.value(fixed).data());
    check_params("block adaptive", &mut store, usize::MAX, |g, s| {
        let dh = block.forward_fixed(g, s, g.constant(h.clone()), g.constant(t.clone()), g.constant(d.clone()), &steps)?;
        probe(g, dh, 5)
    });
}

#[test]
fn pruning_head_and_loss() {
    let mut rng = Rng::new(10);
    let (n, c, de) = (5, 4, 3);
    let mut layer_store = ParamStore::new();
    let layer = PrunedAttentionLayer::new(&mut layer_store, "attn", c, &mut rng).unwrap();
    let mut head_store = ParamStore::new();
    let head = PruningHead::new(&mut head_store, "head", c, de, &mut rng).unwrap();
    let tokens = randn(&[2 * n, c], &mut rng);
    let dirs = randn(&[2, de], &mut rng);
    check_params("pruning head scores", &mut head_store, usize::MAX, |g, s| {
        let sc = head.score_graph(g, s, g.constant(tokens.clone()), n, g.constant(dirs.clone()))?;
        probe(g, sc, 6)
    });
    let cfg = PrunerTrainConfig::default();
    check_params("pruner loss", &mut head_store, usize::MAX, |g, s| {
        let l = pruner_loss(g, &layer, &layer_store, &head, s, g.constant(tokens.clone()), n, g.constant(dirs.clone()), &cfg)?;
        Ok(l.total)
    });
    let hs = head_store.clone();
    check_params("attention layer gated", &mut layer_store, usize::MAX, |g, s| {
        let x = g.constant(tokens.clone());
        let gates = head.score_graph(g, &hs, x, n, g.constant(dirs.clone()))?;
        probe(g, layer.gated_graph(g, s, x, n, gates)?, 8)
    });
}

#[test]
fn denoiser_layers() {
    let mut rng = Rng::new(12);
    let mut store = ParamStore::new();
    let cfg = DenoiserConfig {
        c1: 2,
        c2: 3,
        c3: 4,
        t_dim: 4,
    };
    let model = ToyDenoiser::new(&mut store, cfg, &mut rng).unwrap();
    let x = randn(&[1, 1, 32, 32], &mut rng);
    let eps = randn(&[1, 1, 32, 32], &mut rng);
    // The loss is O(1), so central differences carry roughly 1e-11 of
    // rounding noise; entries below 1e-6 cannot be scored to 1e-4.
    let gc = GradCheck {
        max_entries: 6,
        floor: 1e-6,
        ..GradCheck::default()
    };
    check_params_with("denoiser", &mut store, gc, |g, s| {
        let pred = model.forward(g, s, g.constant(x.clone()), &[250.0], None)?;
        g.mse(pred, g.constant(eps.clone()))
    });
}
