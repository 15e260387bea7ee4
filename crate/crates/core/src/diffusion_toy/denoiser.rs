use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::pruned_attention::{select_topk, PrunedAttentionLayer, PruningHead};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::image::SIDE;
use super::schedule::timestep_embedding;

/// Channel widths at 32², 16² and 8², plus the timestep embedding width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub t_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            c1: 8,
            c2: 16,
            c3: 32,
            t_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c1 == 0 || self.c2 == 0 || self.c3 == 0 || self.t_dim < 2 || !self.t_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("invalid denoiser widths {self:?}")));
        }
        Ok(())
    }

    /// Reads the widths from the tensor shapes in `store`.
    pub fn infer(store: &ParamStore) -> Result<Self> {
        let shape = |n: &str| -> Result<Vec<usize>> {
            store
                .by_name(n)
                .map(|p| p.value().shape().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing denoiser tensor {n}")))
        };
        let (t, c1, c2, c3) = (shape("temb.w")?, shape("conv_in.w")?, shape("down1.w")?, shape("down2.w")?);
        if t.len() != 2 || c1.len() != 4 || c2.len() != 4 || c3.len() != 4 {
            return Err(Error::Checkpoint("denoiser tensors have unexpected ranks".into()));
        }
        let cfg = Self {
            c1: c1[0],
            c2: c2[0],
            c3: c3[0],
            t_dim: t[0],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Bottleneck side length.
    pub fn bottleneck_side(&self) -> usize {
        SIDE / 4
    }

    pub fn tokens(&self) -> usize {
        self.bottleneck_side() * self.bottleneck_side()
    }

    /// Flattened bottleneck width `c3·8·8`.
    pub fn h_dim(&self) -> usize {
        self.c3 * self.tokens()
    }
}

/// Top-k token pruning in the bottleneck attention, driven by a trained head.
pub struct PruneSpec<'a> {
    pub head: &'a PruningHead,
    pub store: &'a ParamStore,
    pub rho: f64,
    /// [B × D_e] edit directions.
    pub dirs: &'a Tensor,
}

/// Encoder outputs kept for the decoder.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// [B × c3·8·8] bottleneck feature after attention.
    pub h: Var,
    skip1: Var,
    skip2: Var,
    temb: Var,
    pub batch: usize,
    /// Kept token indices per sample when pruning was active.
    pub kept: Option<Vec<Vec<usize>>>,
}

/// Small conditional U-Net predicting ε: conv encoder 32→16→8, one
/// attention layer over the 64 bottleneck tokens, conv decoder with
/// additive skips.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    pub cfg: DenoiserConfig,
    pub attn: PrunedAttentionLayer,
}

const CONVS: [&str; 7] = ["conv_in", "down1", "down2", "mid", "up1", "up2", "conv_out"];

impl ToyDenoiser {
    pub fn new(store: &mut ParamStore, cfg: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let td = cfg.t_dim;
        store.add_uniform("temb.w", &[td, td], td, rng)?;
        store.add("temb.b", Tensor::zeros(&[td]), true)?;
        for (name, ci, co) in Self::layout(&cfg) {
            store.add_uniform(&format!("{name}.w"), &[co, ci, 3, 3], ci * 9, rng)?;
            if name != "conv_out" {
                store.add_uniform(&format!("{name}.t"), &[td, co], td, rng)?;
            }
            store.add(&format!("{name}.b"), Tensor::zeros(&[co]), true)?;
        }
        let attn = PrunedAttentionLayer::new(store, "attn", cfg.c3, rng)?;
        Ok(Self { cfg, attn })
    }

    /// Rebuilds the model description for an existing store, checking shapes.
    pub fn from_store(store: &ParamStore, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut expect = vec![
            ("temb.w".to_string(), vec![cfg.t_dim, cfg.t_dim]),
            ("temb.b".to_string(), vec![cfg.t_dim]),
        ];
        for (name, ci, co) in Self::layout(&cfg) {
            expect.push((format!("{name}.w"), vec![co, ci, 3, 3]));
            if name != "conv_out" {
                expect.push((format!("{name}.t"), vec![cfg.t_dim, co]));
            }
            expect.push((format!("{name}.b"), vec![co]));
        }
        for n in ["wq", "wk", "wv", "wo"] {
            expect.push((format!("attn.{n}"), vec![cfg.c3, cfg.c3]));
        }
        for (name, shape) in expect {
            let p = store
                .by_name(&name)
                .ok_or_else(|| Error::Checkpoint(format!("denoiser checkpoint lacks {name}")))?;
            if p.value().shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    p.value().shape()
                )));
            }
        }
        Ok(Self {
            cfg,
            attn: PrunedAttentionLayer::from_prefix("attn", cfg.c3),
        })
    }

    fn layout(cfg: &DenoiserConfig) -> [(&'static str, usize, usize); 7] {
        let (c1, c2, c3) = (cfg.c1, cfg.c2, cfg.c3);
        let io = [(1, c1), (c1, c2), (c2, c3), (c3, c3), (c3, c2), (c2, c1), (c1, 1)];
        let mut out = [("", 0, 0); 7];
        for (i, (n, (ci, co))) in CONVS.iter().zip(io).enumerate() {
            out[i] = (n, ci, co);
        }
        out
    }

    fn p(g: &Graph, store: &ParamStore, name: &str) -> Var {
        g.param_named(store, name)
    }

    fn conv(&self, g: &Graph, store: &ParamStore, name: &str, x: Var, stride: usize, temb: Var) -> Result<Var> {
        let y = g.conv2d(x, Self::p(g, store, &format!("{name}.w")), stride, 1)?;
        let bias = g.add_row_bias(
            g.matmul(temb, Self::p(g, store, &format!("{name}.t")))?,
            Self::p(g, store, &format!("{name}.b")),
        )?;
        Ok(g.relu(g.channel_bias(y, bias)?))
    }

    /// Timestep features: relu(emb(τ)·W + b), [B × t_dim].
    fn time_features(&self, g: &Graph, store: &ParamStore, taus: &[f64]) -> Result<Var> {
        let td = self.cfg.t_dim;
        let data = taus.iter().flat_map(|&t| timestep_embedding(t, td)).collect();
        let emb = g.constant(Tensor::new(vec![taus.len(), td], data)?);
        let z = g.add_row_bias(g.matmul(emb, Self::p(g, store, "temb.w"))?, Self::p(g, store, "temb.b"))?;
        Ok(g.relu(z))
    }

    /// Runs the encoder and bottleneck attention on `x` [B × 1 × 32 × 32].
    pub fn encode(
        &self,
        g: &Graph,
        store: &ParamStore,
        x: Var,
        taus: &[f64],
        prune: Option<&PruneSpec>,
    ) -> Result<Encoded> {
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1..] != [1, SIDE, SIDE] {
            return Err(Error::dim("denoiser input", &xs, &[taus.len(), 1, SIDE, SIDE]));
        }
        let b = xs[0];
        if taus.len() != b {
            return Err(Error::contract(format!("{} timesteps for a batch of {b}", taus.len())));
        }
        let temb = self.time_features(g, store, taus)?;
        let skip1 = self.conv(g, store, "conv_in", x, 1, temb)?;
        let skip2 = self.conv(g, store, "down1", skip1, 2, temb)?;
        let a3 = self.conv(g, store, "down2", skip2, 2, temb)?;
        let m = self.conv(g, store, "mid", a3, 1, temb)?;
        let n = self.cfg.tokens();
        let tokens = g.to_tokens(m)?;
        let (att, kept) = match prune {
            Some(p) if p.rho > 0.0 => {
                if p.dirs.shape() != [b, p.head.dir_dim] {
                    return Err(Error::dim("pruning directions", p.dirs.shape(), &[b, p.head.dir_dim]));
                }
                let scores = p.head.score_graph(g, p.store, tokens, n, g.constant(p.dirs.clone()))?;
                let keep = select_topk(&g.value(scores), p.rho)?;
                (self.attn.pruned_graph(g, store, tokens, n, &keep)?, Some(keep))
            }
            _ => (self.attn.dense_graph(g, store, tokens, n)?, None),
        };
        let side = self.cfg.bottleneck_side();
        let h = g.reshape(g.from_tokens(att, b, side, side)?, &[b, self.cfg.h_dim()])?;
        Ok(Encoded {
            h,
            skip1,
            skip2,
            temb,
            batch: b,
            kept,
        })
    }

    /// Decodes a (possibly edited) bottleneck `h` [B × c3·8·8] to ε.
    pub fn decode(&self, g: &Graph, store: &ParamStore, enc: &Encoded, h: Var) -> Result<Var> {
        let b = enc.batch;
        let side = self.cfg.bottleneck_side();
        if g.shape(h) != [b, self.cfg.h_dim()] {
            return Err(Error::dim("bottleneck h", &g.shape(h), &[b, self.cfg.h_dim()]));
        }
        let hm = g.reshape(h, &[b, self.cfg.c3, side, side])?;
        let u1 = self.conv(g, store, "up1", g.upsample2x(hm)?, 1, enc.temb)?;
        let u1 = g.add(u1, enc.skip2)?;
        let u2 = self.conv(g, store, "up2", g.upsample2x(u1)?, 1, enc.temb)?;
        let u2 = g.add(u2, enc.skip1)?;
        let y = g.conv2d(u2, Self::p(g, store, "conv_out.w"), 1, 1)?;
        let bias = g.repeat_rows(g.reshape(Self::p(g, store, "conv_out.b"), &[1, 1])?, b)?;
        g.channel_bias(y, bias)
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var, taus: &[f64], prune: Option<&PruneSpec>) -> Result<Var> {
        let enc = self.encode(g, store, x, taus, prune)?;
        self.decode(g, store, &enc, enc.h)
    }

    /// Untracked ε prediction for a batch.
    pub fn predict(&self, store: &ParamStore, x: &Tensor, taus: &[f64], prune: Option<&PruneSpec>) -> Result<Tensor> {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let eps = self.forward(&g, store, xv, taus, prune)?;
        Ok((*g.value(eps)).clone())
    }

    /// Bottleneck tokens [B·64 × c3] entering the attention layer.
    pub fn attention_inputs(&self, store: &ParamStore, x: &Tensor, taus: &[f64]) -> Result<Tensor> {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let b = taus.len();
        if x.shape() != [b, 1, SIDE, SIDE] {
            return Err(Error::dim("denoiser input", x.shape(), &[b, 1, SIDE, SIDE]));
        }
        let temb = self.time_features(&g, store, taus)?;
        let a1 = self.conv(&g, store, "conv_in", xv, 1, temb)?;
        let a2 = self.conv(&g, store, "down1", a1, 2, temb)?;
        let a3 = self.conv(&g, store, "down2", a2, 2, temb)?;
        let m = self.conv(&g, store, "mid", a3, 1, temb)?;
        let t = g.to_tokens(m)?;
        Ok((*g.value(t)).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn output_shape_matches_input() {
        let (store, m) = small();
        let x = Tensor::new(vec![2, 1, SIDE, SIDE], Rng::new(1).normal_vec(2 * 1024)).unwrap();
        let eps = m.predict(&store, &x, &[10.0, 500.5], None).unwrap();
        assert_eq!(eps.shape(), x.shape());
        assert!(eps.all_finite());
    }

    #[test]
    fn default_parameter_count() {
        let mut store = ParamStore::new();
        ToyDenoiser::new(&mut store, DenoiserConfig::default(), &mut Rng::new(0)).unwrap();
        let convs = 8 * 9 + 16 * 8 * 9 + 32 * 16 * 9 + 32 * 32 * 9 + 16 * 32 * 9 + 8 * 16 * 9 + 8 * 9;
        let biases = 8 + 16 + 32 + 32 + 16 + 8 + 1;
        let time = 64 * 64 + 64 + 64 * (8 + 16 + 32 + 32 + 16 + 8);
        assert_eq!(store.num_scalars(), convs + biases + time + 4 * 32 * 32);
    }

    #[test]
    fn encode_decode_equals_forward() {
        let (store, m) = small();
        let x = Tensor::new(vec![1, 1, SIDE, SIDE], Rng::new(2).normal_vec(1024)).unwrap();
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let enc = m.encode(&g, &store, xv, &[42.0], None).unwrap();
        assert_eq!(g.shape(enc.h), vec![1, 4 * 64]);
        let a = m.decode(&g, &store, &enc, enc.h).unwrap();
        let b = m.predict(&store, &x, &[42.0], None).unwrap();
        assert_eq!(g.value(a).data(), b.data());
    }

    #[test]
    fn rejects_bad_inputs() {
        let (store, m) = small();
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        assert!(m.predict(&store, &x, &[1.0], None).is_err());
        let x = Tensor::zeros(&[2, 1, SIDE, SIDE]);
        assert!(m.predict(&store, &x, &[1.0], None).is_err());
    }

    #[test]
    fn store_round_trip_checks_shapes() {
        let (store, m) = small();
        assert!(ToyDenoiser::from_store(&store, m.cfg).is_ok());
        assert_eq!(DenoiserConfig::infer(&store).unwrap(), m.cfg);
        assert!(DenoiserConfig::infer(&ParamStore::new()).unwrap_err().is_usage());
        assert!(matches!(
            ToyDenoiser::from_store(&store, DenoiserConfig::default()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn pruning_at_zero_ratio_is_dense() {
        let (store, m) = small();
        let mut hs = ParamStore::new();
        let head = PruningHead::new(&mut hs, "head", 4, 3, &mut Rng::new(5)).unwrap();
        let dirs = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let x = Tensor::new(vec![1, 1, SIDE, SIDE], Rng::new(2).normal_vec(1024)).unwrap();
        let dense = m.predict(&store, &x, &[5.0], None).unwrap();
        let spec = PruneSpec {
            head: &head,
            store: &hs,
            rho: 0.0,
            dirs: &dirs,
        };
        assert_eq!(m.predict(&store, &x, &[5.0], Some(&spec)).unwrap(), dense);
        let spec = PruneSpec { rho: 0.5, ..spec };
        let pruned = m.predict(&store, &x, &[5.0], Some(&spec)).unwrap();
        assert_eq!(pruned.shape(), dense.shape());
        assert_ne!(pruned, dense);
    }
}
