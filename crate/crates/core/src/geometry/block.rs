use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::solver::{dopri5, dopri5_fixed, TapeState};
use super::{ChristoffelConfig, ChristoffelModel, RetractionConfig, SolverConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    /// Flattened feature width.
    pub dim: usize,
    pub t_dim: usize,
    pub dir_dim: usize,
    pub rank: usize,
    pub hidden: usize,
    pub retraction: RetractionConfig,
    pub solver: SolverConfig,
}

impl BlockConfig {
    pub fn new(dim: usize, t_dim: usize, dir_dim: usize) -> Self {
        Self {
            dim,
            t_dim,
            dir_dim,
            rank: 8,
            hidden: 16,
            retraction: RetractionConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

/// Geodesic edit block: start point `y₀ = h + t_emb·W_t`, tangent
/// `v₀ = retract([h; t_emb; d]·W_v + b_v)`, offset `Δh = γ(1) − y₀`.
#[derive(Clone, Debug)]
pub struct RiemannianBlock {
    pub cfg: BlockConfig,
    pub christoffel: ChristoffelModel,
    prefix: String,
}

pub struct BlockOutput {
    /// [B × d] geodesic displacement.
    pub delta: Var,
    pub v0: Var,
    pub accepted_steps: usize,
    pub step_sizes: Vec<f64>,
}

impl RiemannianBlock {
    /// Registers parameters under `prefix`. The tangent map starts at zero so
    /// an untrained block produces no offset.
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: BlockConfig, rng: &mut Rng) -> Result<Self> {
        let (d, dt, de) = (cfg.dim, cfg.t_dim, cfg.dir_dim);
        if d == 0 || dt == 0 || de == 0 {
            return Err(Error::Config(format!("block widths must be positive, got {d}/{dt}/{de}")));
        }
        store.add_uniform(&format!("{prefix}.w_t"), &[dt, d], dt, rng)?;
        store.add(&format!("{prefix}.w_v"), Tensor::zeros(&[d + dt + de, d]), true)?;
        store.add(&format!("{prefix}.b_v"), Tensor::zeros(&[d]), true)?;
        let christoffel = ChristoffelModel::new(
            store,
            &format!("{prefix}.christoffel"),
            ChristoffelConfig {
                dim: d,
                t_dim: dt,
                rank: cfg.rank,
                hidden: cfg.hidden,
            },
            rng,
        )?;
        Ok(Self {
            cfg,
            christoffel,
            prefix: prefix.to_string(),
        })
    }

    /// Describes a block already present in `store`. Widths come from the
    /// tensor shapes; retraction and solver settings are not stored.
    pub fn from_store(
        store: &ParamStore,
        prefix: &str,
        retraction: RetractionConfig,
        solver: SolverConfig,
    ) -> Result<Self> {
        let christoffel = ChristoffelModel::from_store(store, &format!("{prefix}.christoffel"))?;
        let shape = |n: &str| -> Result<Vec<usize>> {
            store
                .by_name(&format!("{prefix}.{n}"))
                .map(|p| p.value().shape().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {prefix}.{n}")))
        };
        let c = christoffel.cfg;
        let (w_v, w_t, b_v) = (shape("w_v")?, shape("w_t")?, shape("b_v")?);
        if w_t != [c.t_dim, c.dim] || b_v != [c.dim] || w_v.len() != 2 || w_v[1] != c.dim || w_v[0] <= c.dim + c.t_dim {
            return Err(Error::Checkpoint(format!(
                "{prefix}: inconsistent shapes w_v {w_v:?}, w_t {w_t:?}, b_v {b_v:?} for width {}",
                c.dim
            )));
        }
        Ok(Self {
            cfg: BlockConfig {
                dim: c.dim,
                t_dim: c.t_dim,
                dir_dim: w_v[0] - c.dim - c.t_dim,
                rank: c.rank,
                hidden: c.hidden,
                retraction,
                solver,
            },
            christoffel,
            prefix: prefix.to_string(),
        })
    }

    fn p(&self, g: &Graph, store: &ParamStore, n: &str) -> Var {
        g.param_named(store, &format!("{}.{n}", self.prefix))
    }

    fn check(&self, g: &Graph, h: Var, t_emb: Var, dir: Var) -> Result<usize> {
        let hs = g.shape(h);
        if hs.len() != 2 || hs[1] != self.cfg.dim {
            return Err(Error::dim("riemannian block h", &hs, &[0, self.cfg.dim]));
        }
        let b = hs[0];
        for (v, w, what) in [(t_emb, self.cfg.t_dim, "t_emb"), (dir, self.cfg.dir_dim, "edit direction")] {
            let s = g.shape(v);
            if s != [b, w] {
                return Err(Error::Contract(format!("{what} has shape {s:?}, expected [{b}, {w}]")));
            }
        }
        Ok(b)
    }

    fn start(&self, g: &Graph, store: &ParamStore, h: Var, t_emb: Var, dir: Var) -> Result<(Var, Var)> {
        let y0 = g.add(h, g.matmul(t_emb, self.p(g, store, "w_t"))?)?;
        let x = g.concat_cols(&[h, t_emb, dir])?;
        let w = g.add_row_bias(g.matmul(x, self.p(g, store, "w_v"))?, self.p(g, store, "b_v"))?;
        let v0 = g.retract_rows(w, self.cfg.retraction.r_max)?;
        Ok((y0, v0))
    }

    /// Records the full block on `g`: `h` [B × d], `t_emb` [B × d_t],
    /// `dir` [B × d_e]. The adaptive step sequence is chosen on the forward
    /// pass and enters the tape as constants.
    pub fn forward(&self, g: &Graph, store: &ParamStore, h: Var, t_emb: Var, dir: Var) -> Result<BlockOutput> {
        self.check(g, h, t_emb, dir)?;
        let (y0, v0) = self.start(g, store, h, t_emb, dir)?;
        let t = Some(t_emb);
        let rhs = |s: &TapeState| -> Result<TapeState> {
            Ok(TapeState {
                graph: g,
                pos: s.vel,
                vel: self.christoffel.accel(g, store, s.pos, s.vel, t)?,
            })
        };
        let sol = dopri5(rhs, TapeState { graph: g, pos: y0, vel: v0 }, &self.cfg.solver)?;
        Ok(BlockOutput {
            delta: g.sub(sol.end.pos, y0)?,
            v0,
            accepted_steps: sol.accepted_steps,
            step_sizes: sol.step_sizes,
        })
    }

    /// Same as [`forward`](Self::forward) but integrating over a given step
    /// sequence.
    pub fn forward_fixed(
        &self,
        g: &Graph,
        store: &ParamStore,
        h: Var,
        t_emb: Var,
        dir: Var,
        steps: &[f64],
    ) -> Result<Var> {
        self.check(g, h, t_emb, dir)?;
        let (y0, v0) = self.start(g, store, h, t_emb, dir)?;
        let t = Some(t_emb);
        let rhs = |s: &TapeState| -> Result<TapeState> {
            Ok(TapeState {
                graph: g,
                pos: s.vel,
                vel: self.christoffel.accel(g, store, s.pos, s.vel, t)?,
            })
        };
        let end = dopri5_fixed(rhs, TapeState { graph: g, pos: y0, vel: v0 }, steps)?;
        g.sub(end.pos, y0)
    }

    /// Untracked evaluation of `Δh` for a single sample.
    pub fn offset(&self, store: &ParamStore, h: &[f64], t_emb: &[f64], dir: &[f64]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let row = |v: &[f64]| {
            if v.is_empty() {
                Err(Error::contract("empty conditioning vector"))
            } else {
                Tensor::new(vec![1, v.len()], v.to_vec())
            }
        };
        let (hv, tv, dv) = (g.constant(row(h)?), g.constant(row(t_emb)?), g.constant(row(dir)?));
        let out = self.forward(&g, store, hv, tv, dv)?;
        Ok(g.value(out.delta).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(seed: u64) -> (ParamStore, RiemannianBlock) {
        let mut store = ParamStore::new();
        let b = RiemannianBlock::new(&mut store, "edit", BlockConfig::new(5, 3, 2), &mut Rng::new(seed)).unwrap();
        (store, b)
    }

    #[test]
    fn untrained_block_is_neutral() {
        let (store, b) = block(4);
        let dh = b.offset(&store, &[1.0, 2.0, 3.0, 4.0, 5.0], &[0.1, 0.2, 0.3], &[1.0, 0.0]).unwrap();
        assert_eq!(dh, vec![0.0; 5]);
    }

    #[test]
    fn from_store_recovers_config() {
        let mut store = ParamStore::new();
        let mut cfg = BlockConfig::new(6, 4, 3);
        cfg.rank = 2;
        cfg.hidden = 5;
        RiemannianBlock::new(&mut store, "edit", cfg.clone(), &mut Rng::new(1)).unwrap();
        let b = RiemannianBlock::from_store(&store, "edit", cfg.retraction, cfg.solver.clone()).unwrap();
        assert_eq!(b.cfg, cfg);
        let err = RiemannianBlock::from_store(&store, "other", cfg.retraction, cfg.solver).unwrap_err();
        assert!(err.is_usage(), "{err}");
    }

    #[test]
    fn rejects_mismatched_direction() {
        let (store, b) = block(4);
        assert!(b.offset(&store, &[0.0; 5], &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn flat_field_offset_is_tangent() {
        let (mut store, b) = block(9);
        b.christoffel.zero(&mut store).unwrap();
        let id = store.id("edit.b_v").unwrap();
        store.set_value(id, Tensor::vector(vec![0.3, 0.0, -0.4, 0.0, 0.0])).unwrap();
        let dh = b.offset(&store, &[1.0; 5], &[0.5; 3], &[0.0, 1.0]).unwrap();
        let s = 0.5f64.tanh() / 0.5;
        let expect = [0.3 * s, 0.0, -0.4 * s, 0.0, 0.0];
        for (a, e) in dh.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }
}
