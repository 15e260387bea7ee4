use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-token importance scorer conditioned on the edit direction:
/// `S_i = σ(w₂ᵀ relu(W_tok x_i + W_dir P d + b₁) + b₂)`.
///
/// Splitting the first layer into token and direction blocks is the same map
/// as one layer over `[x_i; P d]`, with the direction term computed once per
/// sample.
#[derive(Clone, Debug)]
pub struct PruningHead {
    pub channels: usize,
    pub dir_dim: usize,
    prefix: String,
}

impl PruningHead {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, dir_dim: usize, rng: &mut Rng) -> Result<Self> {
        if channels == 0 || dir_dim == 0 {
            return Err(Error::Config("pruning head widths must be positive".into()));
        }
        let (c, h) = (channels, 2 * channels);
        store.add_uniform(&format!("{prefix}.proj"), &[dir_dim, c], dir_dim, rng)?;
        store.add_uniform(&format!("{prefix}.w_tok"), &[c, h], 2 * c, rng)?;
        store.add_uniform(&format!("{prefix}.w_dir"), &[c, h], 2 * c, rng)?;
        store.add(&format!("{prefix}.b1"), Tensor::zeros(&[h]), true)?;
        store.add_uniform(&format!("{prefix}.w2"), &[h, 1], h, rng)?;
        store.add(&format!("{prefix}.b2"), Tensor::zeros(&[1]), true)?;
        Ok(Self {
            channels,
            dir_dim,
            prefix: prefix.to_string(),
        })
    }

    /// Describes a head already present in `store`, checking shapes.
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let shape = |n: &str| -> Result<Vec<usize>> {
            store
                .by_name(&format!("{prefix}.{n}"))
                .map(|p| p.value().shape().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("pruner checkpoint lacks {prefix}.{n}")))
        };
        let proj = shape("proj")?;
        if proj.len() != 2 {
            return Err(Error::Checkpoint(format!("{prefix}.proj has shape {proj:?}")));
        }
        let head = Self {
            channels: proj[1],
            dir_dim: proj[0],
            prefix: prefix.to_string(),
        };
        let (c, h) = (head.channels, 2 * head.channels);
        let expect = [("w_tok", vec![c, h]), ("w_dir", vec![c, h]), ("b1", vec![h]), ("w2", vec![h, 1]), ("b2", vec![1])];
        for (n, e) in expect {
            let s = shape(n)?;
            if s != e {
                return Err(Error::Checkpoint(format!("{prefix}.{n} has shape {s:?}, expected {e:?}")));
            }
        }
        Ok(head)
    }

    pub fn param_names(&self) -> Vec<String> {
        ["proj", "w_tok", "w_dir", "b1", "w2", "b2"]
            .iter()
            .map(|n| format!("{}.{n}", self.prefix))
            .collect()
    }

    pub fn zero(&self, store: &mut ParamStore) -> Result<()> {
        for n in self.param_names() {
            let id = store.id(&n).ok_or_else(|| Error::Checkpoint(format!("missing tensor {n}")))?;
            let shape = store.get(id).value().shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape))?;
        }
        Ok(())
    }

    fn p(&self, g: &Graph, store: &ParamStore, n: &str) -> Var {
        g.param_named(store, &format!("{}.{n}", self.prefix))
    }

    /// Scores for tokens [B·N × C] and directions [B × D]; returns [B × N].
    pub fn score_graph(&self, g: &Graph, store: &ParamStore, tokens: Var, n: usize, dir: Var) -> Result<Var> {
        let ts = g.shape(tokens);
        let ds = g.shape(dir);
        if ts.len() != 2 || ts[1] != self.channels || n == 0 || !ts[0].is_multiple_of(n) {
            return Err(Error::dim("score_tokens tokens", &ts, &[n, self.channels]));
        }
        let b = ts[0] / n;
        if ds != [b, self.dir_dim] {
            return Err(Error::dim("score_tokens direction", &ds, &[b, self.dir_dim]));
        }
        let pd = g.matmul(dir, self.p(g, store, "proj"))?;
        let hd = g.repeat_rows(g.matmul(pd, self.p(g, store, "w_dir"))?, n)?;
        let ht = g.matmul(tokens, self.p(g, store, "w_tok"))?;
        let hidden = g.relu(g.add_row_bias(g.add(ht, hd)?, self.p(g, store, "b1"))?);
        let logit = g.add_row_bias(g.matmul(hidden, self.p(g, store, "w2"))?, self.p(g, store, "b2"))?;
        g.reshape(g.sigmoid(logit), &[b, n])
    }

    /// Untracked scores for one sample's tokens [N × C].
    pub fn score(&self, store: &ParamStore, tokens: &[f64], n: usize, dir: &[f64]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let t = g.constant(Tensor::new(vec![n, self.channels], tokens.to_vec()).map_err(|_| {
            Error::dim("score_tokens tokens", &[tokens.len()], &[n, self.channels])
        })?);
        let d = g.constant(
            Tensor::new(vec![1, dir.len()], dir.to_vec())
                .map_err(|_| Error::contract("edit direction is empty"))?,
        );
        let s = self.score_graph(&g, store, t, n, d)?;
        Ok(g.value(s).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_scores_half() {
        let mut store = ParamStore::new();
        let head = PruningHead::new(&mut store, "head", 3, 2, &mut Rng::new(1)).unwrap();
        head.zero(&mut store).unwrap();
        let s = head.score(&store, &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0], 2, &[0.6, 0.8]).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn permuting_tokens_permutes_scores() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        let head = PruningHead::new(&mut store, "head", 4, 3, &mut rng).unwrap();
        let n = 7;
        let x = rng.normal_vec(n * 4);
        let d = rng.normal_vec(3);
        let s = head.score(&store, &x, n, &d).unwrap();
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let mut xp = Vec::new();
        for &p in &perm {
            xp.extend_from_slice(&x[p * 4..(p + 1) * 4]);
        }
        let sp = head.score(&store, &xp, n, &d).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(sp[i].to_bits(), s[p].to_bits());
        }
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn from_store_recovers_widths() {
        let mut store = ParamStore::new();
        PruningHead::new(&mut store, "head", 5, 3, &mut Rng::new(1)).unwrap();
        let h = PruningHead::from_store(&store, "head").unwrap();
        assert_eq!((h.channels, h.dir_dim), (5, 3));
        assert!(matches!(PruningHead::from_store(&store, "other"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn direction_width_checked() {
        let mut store = ParamStore::new();
        let head = PruningHead::new(&mut store, "head", 2, 3, &mut Rng::new(1)).unwrap();
        assert!(matches!(
            head.score(&store, &[0.0; 4], 2, &[1.0, 0.0]),
            Err(Error::Dimension { .. })
        ));
    }
}
