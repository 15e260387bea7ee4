use geoedit::autodiff::ParamStore;
use geoedit::pruned_attention::{
    hard_prune_mse, mean_score, random_prune_mse, synthetic_samples, train_pruning_head, PrunedAttentionLayer,
    PrunerTrainConfig, PruningHead,
};
use geoedit::Rng;

const N: usize = 64;
const C: usize = 32;
const D: usize = 64;

struct Run {
    trained: f64,
    random: f64,
    mean_s: f64,
    first_loss: f64,
    last_loss: f64,
}

fn run(seed: u64, lambda: f64, steps: usize, train_count: usize) -> Run {
    let mut rng = Rng::new(seed);
    let mut ls = ParamStore::new();
    let layer = PrunedAttentionLayer::new(&mut ls, "attn", C, &mut rng).unwrap();
    ls.set_trainable(false);
    let mut hs = ParamStore::new();
    let head = PruningHead::new(&mut hs, "head", C, D, &mut rng).unwrap();
    let train = synthetic_samples(train_count, N, C, D, &mut rng).unwrap();
    let held = synthetic_samples(32, N, C, D, &mut rng).unwrap();
    let cfg = PrunerTrainConfig {
        lambda_sparsity: lambda,
        steps,
        ..Default::default()
    };
    let curve = train_pruning_head(&train, &layer, &ls, &head, &mut hs, &cfg, &mut rng).unwrap();
    let w = layer.weights(&ls).unwrap();
    Run {
        trained: hard_prune_mse(&held, &w, &head, &hs, 0.5).unwrap(),
        random: random_prune_mse(&held, &w, 0.5, &mut Rng::new(seed + 1000)).unwrap(),
        mean_s: mean_score(&held, &head, &hs).unwrap(),
        first_loss: curve.first().unwrap().loss,
        last_loss: curve.last().unwrap().loss,
    }
}

#[test]
fn trained_head_beats_random_selection() {
    for seed in 0..2 {
        let r = run(seed, 0.1, 500, 64);
        eprintln!("seed {seed}: trained {:.4e} random {:.4e} mean S {:.3}", r.trained, r.random, r.mean_s);
        assert!(r.trained < r.random);
    }
}

#[test]
fn training_halves_loss_on_fixed_input() {
    let r = run(7, 0.1, 500, 1);
    eprintln!("loss {:.4e} -> {:.4e}", r.first_loss, r.last_loss);
    assert!(r.last_loss <= 0.5 * r.first_loss);
}

#[test]
fn sparsity_weight_lowers_scores() {
    let s: Vec<f64> = [0.0, 0.1, 1.0].iter().map(|&l| run(3, l, 300, 64).mean_s).collect();
    eprintln!("mean S by lambda: {s:?}");
    assert!(s[0] >= s[1] && s[1] >= s[2]);
}
