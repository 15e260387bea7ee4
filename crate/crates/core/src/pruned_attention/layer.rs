use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, softmax_in_place, Tensor};

/// Query rows processed per block in the untracked attention kernel.
const QUERY_BLOCK: usize = 256;

/// Single-head self-attention over `C`-wide tokens with a residual and a
/// bias-free output projection. Tokens are rows: `y = x·W`.
#[derive(Clone, Debug)]
pub struct PrunedAttentionLayer {
    pub channels: usize,
    prefix: String,
}

impl PrunedAttentionLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("attention needs at least one channel".into()));
        }
        for n in ["wq", "wk", "wv", "wo"] {
            store.add_uniform(&format!("{prefix}.{n}"), &[channels, channels], channels, rng)?;
        }
        Ok(Self {
            channels,
            prefix: prefix.to_string(),
        })
    }

    /// Describes a layer whose parameters already live in a store.
    pub fn from_prefix(prefix: &str, channels: usize) -> Self {
        Self {
            channels,
            prefix: prefix.to_string(),
        }
    }

    fn p(&self, g: &Graph, store: &ParamStore, n: &str) -> Var {
        g.param_named(store, &format!("{}.{n}", self.prefix))
    }

    pub fn weights(&self, store: &ParamStore) -> Result<AttentionWeights> {
        let get = |n: &str| -> Result<Vec<f64>> {
            let name = format!("{}.{n}", self.prefix);
            store
                .by_name(&name)
                .map(|p| p.value().data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        Ok(AttentionWeights {
            c: self.channels,
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
        })
    }

    fn check_tokens(&self, g: &Graph, tokens: Var, n: usize) -> Result<usize> {
        let s = g.shape(tokens);
        if s.len() != 2 || s[1] != self.channels || n == 0 || !s[0].is_multiple_of(n) {
            return Err(Error::dim("attention tokens", &s, &[n, self.channels]));
        }
        Ok(s[0] / n)
    }

    /// softmax(q·kᵀ/√C)·v for one sample's rows.
    fn attend(&self, g: &Graph, q: Var, k: Var, v: Var) -> Result<Var> {
        let logits = g.scale(g.matmul(q, g.transpose(k)?)?, 1.0 / (self.channels as f64).sqrt());
        g.matmul(g.softmax_rows(logits)?, v)
    }

    fn per_sample(&self, g: &Graph, q: Var, k: Var, v: Var, sizes: &[usize]) -> Result<Var> {
        let mut outs = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &m in sizes {
            let r = (start, start + m);
            outs.push(self.attend(
                g,
                g.slice_rows(q, r.0, r.1)?,
                g.slice_rows(k, r.0, r.1)?,
                g.slice_rows(v, r.0, r.1)?,
            )?);
            start += m;
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat_rows(&outs)
        }
    }

    /// Dense attention on tokens [B·N × C].
    pub fn dense_graph(&self, g: &Graph, store: &ParamStore, tokens: Var, n: usize) -> Result<Var> {
        let b = self.check_tokens(g, tokens, n)?;
        let q = g.matmul(tokens, self.p(g, store, "wq"))?;
        let k = g.matmul(tokens, self.p(g, store, "wk"))?;
        let v = g.matmul(tokens, self.p(g, store, "wv"))?;
        let a = self.per_sample(g, q, k, v, &vec![n; b])?;
        g.add(tokens, g.matmul(a, self.p(g, store, "wo"))?)
    }

    /// Attention restricted to the kept tokens of each sample; the attended
    /// rows are projected by `W_o` and added back at their positions.
    pub fn pruned_graph(&self, g: &Graph, store: &ParamStore, tokens: Var, n: usize, keep: &[Vec<usize>]) -> Result<Var> {
        let b = self.check_tokens(g, tokens, n)?;
        if keep.len() != b {
            return Err(Error::contract(format!("{} keep sets for a batch of {b}", keep.len())));
        }
        let mut global = Vec::new();
        for (s, idx) in keep.iter().enumerate() {
            validate_keep(idx, n)?;
            global.extend(idx.iter().map(|i| s * n + i));
        }
        let kept = g.gather_rows(tokens, &global)?;
        let q = g.matmul(kept, self.p(g, store, "wq"))?;
        let k = g.matmul(kept, self.p(g, store, "wk"))?;
        let v = g.matmul(kept, self.p(g, store, "wv"))?;
        let sizes: Vec<usize> = keep.iter().map(|k| k.len()).collect();
        let a = self.per_sample(g, q, k, v, &sizes)?;
        let o = g.matmul(a, self.p(g, store, "wo"))?;
        g.add(tokens, g.scatter_rows(o, &global, b * n)?)
    }

    /// Soft-pruned attention: value row i is scaled by `gates[i]`
    /// ([B·N] or [B × N]).
    pub fn gated_graph(&self, g: &Graph, store: &ParamStore, tokens: Var, n: usize, gates: Var) -> Result<Var> {
        let b = self.check_tokens(g, tokens, n)?;
        let gs = g.shape(gates);
        if gs.iter().product::<usize>() != b * n {
            return Err(Error::dim("attention gates", &gs, &[b, n]));
        }
        let q = g.matmul(tokens, self.p(g, store, "wq"))?;
        let k = g.matmul(tokens, self.p(g, store, "wk"))?;
        let v = g.scale_rows(g.matmul(tokens, self.p(g, store, "wv"))?, gates)?;
        let a = self.per_sample(g, q, k, v, &vec![n; b])?;
        g.add(tokens, g.matmul(a, self.p(g, store, "wo"))?)
    }
}

pub fn validate_keep(keep: &[usize], n: usize) -> Result<()> {
    if keep.is_empty() {
        return Err(Error::contract("keep set is empty"));
    }
    for w in keep.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::contract("keep indices must be strictly ascending"));
        }
    }
    if let Some(&last) = keep.last() {
        if last >= n {
            return Err(Error::contract(format!("keep index {last} out of range for {n} tokens")));
        }
    }
    Ok(())
}

/// Plain copies of the layer weights for untracked inference.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub c: usize,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
}

impl AttentionWeights {
    pub fn random(c: usize, rng: &mut Rng) -> Self {
        let b = 1.0 / (c as f64).sqrt();
        let mut w = || rng.uniform_vec(c * c, -b, b);
        Self {
            c,
            wq: w(),
            wk: w(),
            wv: w(),
            wo: w(),
        }
    }

    /// `softmax(Q·Kᵀ/√C)·V·W_o` for `m` token rows.
    fn attend(&self, x: &[f64], m: usize) -> Vec<f64> {
        let c = self.c;
        let proj = |w: &[f64]| {
            let mut out = vec![0.0; m * c];
            gemm(m, c, c, x, false, w, false, &mut out, 0.0);
            out
        };
        let (q, k, v) = (proj(&self.wq), proj(&self.wk), proj(&self.wv));
        let scale = 1.0 / (c as f64).sqrt();
        let mut a = vec![0.0; m * c];
        let mut logits = vec![0.0; QUERY_BLOCK.min(m) * m];
        for r0 in (0..m).step_by(QUERY_BLOCK) {
            let rows = QUERY_BLOCK.min(m - r0);
            let s = &mut logits[..rows * m];
            gemm(rows, c, m, &q[r0 * c..(r0 + rows) * c], false, &k, true, s, 0.0);
            for row in s.chunks_exact_mut(m) {
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(row);
            }
            gemm(rows, m, c, s, false, &v, false, &mut a[r0 * c..(r0 + rows) * c], 0.0);
        }
        let mut out = vec![0.0; m * c];
        gemm(m, c, c, &a, false, &self.wo, false, &mut out, 0.0);
        out
    }

    fn check(&self, x: &[f64], n: usize) -> Result<()> {
        if n == 0 || x.len() != n * self.c {
            return Err(Error::dim("attention input", &[x.len()], &[n, self.c]));
        }
        Ok(())
    }

    /// Dense attention with residual on one sample's tokens [N × C].
    pub fn dense_forward(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check(x, n)?;
        let mut out = self.attend(x, n);
        out.iter_mut().zip(x).for_each(|(o, xi)| *o += xi);
        Ok(out)
    }

    /// Pruned attention on one sample's tokens [N × C]. Rows outside `keep`
    /// are returned unchanged.
    pub fn pruned_forward(&self, x: &[f64], n: usize, keep: &[usize]) -> Result<Vec<f64>> {
        self.check(x, n)?;
        validate_keep(keep, n)?;
        let c = self.c;
        let mut kept = Vec::with_capacity(keep.len() * c);
        for &i in keep {
            kept.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let o = self.attend(&kept, keep.len());
        let mut out = x.to_vec();
        for (j, &i) in keep.iter().enumerate() {
            out[i * c..(i + 1) * c]
                .iter_mut()
                .zip(&o[j * c..(j + 1) * c])
                .for_each(|(a, b)| *a += b);
        }
        Ok(out)
    }

    /// Applies the layer to a feature map [B × C × H × W], optionally pruned.
    pub fn forward_map(&self, x: &Tensor, keep: Option<&[Vec<usize>]>) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.c {
            return Err(Error::dim("attention feature map", s, &[0, self.c, 0, 0]));
        }
        let (b, n) = (s[0], s[2] * s[3]);
        let tokens = crate::autodiff::bchw_to_tokens(x.data(), b, self.c, n);
        let mut out = Vec::with_capacity(tokens.len());
        for i in 0..b {
            let t = &tokens[i * n * self.c..(i + 1) * n * self.c];
            out.extend(match keep {
                Some(k) => self.pruned_forward(t, n, k.get(i).ok_or_else(|| Error::contract("missing keep set"))?)?,
                None => self.dense_forward(t, n)?,
            });
        }
        Tensor::new(s.to_vec(), crate::autodiff::tokens_to_bchw(&out, b, self.c, n))
    }
}
