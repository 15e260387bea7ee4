use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::GeodesicField;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChristoffelConfig {
    pub dim: usize,
    pub t_dim: usize,
    pub rank: usize,
    pub hidden: usize,
}

impl ChristoffelConfig {
    pub fn new(dim: usize, t_dim: usize) -> Self {
        Self {
            dim,
            t_dim,
            rank: 8,
            hidden: 16,
        }
    }
}

/// Learned contraction `a_k = −Σ_r U[k,r]·(B_r·v)·(C_r(γ, t)·v)`.
///
/// `C` comes from a gated two-layer network over `[γ; t_emb]`. The output is
/// quadratic in `v` by construction.
#[derive(Clone, Debug)]
pub struct ChristoffelModel {
    pub cfg: ChristoffelConfig,
    prefix: String,
}

impl ChristoffelModel {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: ChristoffelConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.dim == 0 || cfg.rank == 0 || cfg.hidden == 0 {
            return Err(Error::Config(format!("christoffel model needs positive sizes, got {cfg:?}")));
        }
        let (d, r, h) = (cfg.dim, cfg.rank, cfg.hidden);
        let x = d + cfg.t_dim;
        let p = |n: &str| format!("{prefix}.{n}");
        store.add_uniform(&p("u"), &[r, d], r, rng)?;
        store.add_uniform(&p("b"), &[d, r], d, rng)?;
        store.add_uniform(&p("w_a"), &[x, h], x, rng)?;
        store.add_uniform(&p("b_a"), &[h], x, rng)?;
        store.add_uniform(&p("w_g"), &[x, h], x, rng)?;
        store.add_uniform(&p("b_g"), &[h], x, rng)?;
        store.add_uniform(&p("w_c"), &[h, r * d], h, rng)?;
        store.add_uniform(&p("b_c"), &[r * d], h, rng)?;
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
        })
    }

    /// Describes a model already present in `store`, reading its sizes from
    /// the tensor shapes.
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let shape = |n: &str| -> Result<Vec<usize>> {
            store
                .by_name(&format!("{prefix}.{n}"))
                .map(|p| p.value().shape().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {prefix}.{n}")))
        };
        let (u, w_a) = (shape("u")?, shape("w_a")?);
        if u.len() != 2 || w_a.len() != 2 || w_a[0] < u[1] {
            return Err(Error::Checkpoint(format!("{prefix}: bad shapes u {u:?}, w_a {w_a:?}")));
        }
        let cfg = ChristoffelConfig {
            dim: u[1],
            t_dim: w_a[0] - u[1],
            rank: u[0],
            hidden: w_a[1],
        };
        let (d, r, h, x) = (cfg.dim, cfg.rank, cfg.hidden, w_a[0]);
        let expect = [
            ("b", vec![d, r]),
            ("b_a", vec![h]),
            ("w_g", vec![x, h]),
            ("b_g", vec![h]),
            ("w_c", vec![h, r * d]),
            ("b_c", vec![r * d]),
        ];
        for (n, e) in expect {
            let s = shape(n)?;
            if s != e {
                return Err(Error::Checkpoint(format!("{prefix}.{n} has shape {s:?}, expected {e:?}")));
            }
        }
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
        })
    }

    fn name(&self, n: &str) -> String {
        format!("{}.{n}", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        ["u", "b", "w_a", "b_a", "w_g", "b_g", "w_c", "b_c"]
            .iter()
            .map(|n| self.name(n))
            .collect()
    }

    /// Sets every parameter of this model to zero, giving a flat field.
    pub fn zero(&self, store: &mut ParamStore) -> Result<()> {
        for n in self.param_names() {
            let id = store.id(&n).ok_or_else(|| Error::Checkpoint(format!("missing tensor {n}")))?;
            let shape = store.get(id).value().shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape))?;
        }
        Ok(())
    }

    /// Batched acceleration: `gamma`, `v` are [B × d], `t_emb` is [B × d_t]
    /// (absent when d_t = 0).
    pub fn accel(&self, g: &Graph, store: &ParamStore, gamma: Var, v: Var, t_emb: Option<Var>) -> Result<Var> {
        let d = self.cfg.dim;
        let gs = g.shape(gamma);
        if gs.len() != 2 || gs[1] != d || g.shape(v) != gs {
            return Err(Error::dim("christoffel accel", &gs, &g.shape(v)));
        }
        let x = match t_emb {
            Some(t) => {
                let ts = g.shape(t);
                if ts.len() != 2 || ts[0] != gs[0] || ts[1] != self.cfg.t_dim {
                    return Err(Error::dim("christoffel t_emb", &ts, &[gs[0], self.cfg.t_dim]));
                }
                g.concat_cols(&[gamma, t])?
            }
            None if self.cfg.t_dim == 0 => gamma,
            None => return Err(Error::contract("christoffel model expects a timestep embedding")),
        };
        let p = |n: &str| g.param_named(store, &self.name(n));
        let a = g.add_row_bias(g.matmul(x, p("w_a"))?, p("b_a"))?;
        let gate = g.add_row_bias(g.matmul(x, p("w_g"))?, p("b_g"))?;
        let hidden = g.mul(g.relu(a), g.sigmoid(gate))?;
        let coeffs = g.add_row_bias(g.matmul(hidden, p("w_c"))?, p("b_c"))?;
        let cv = g.block_dot(coeffs, v, self.cfg.rank)?;
        let bv = g.matmul(v, p("b"))?;
        let q = g.mul(bv, cv)?;
        Ok(g.scale(g.matmul(q, p("u"))?, -1.0))
    }
}

/// A learned model at a fixed timestep embedding, evaluated without a
/// persistent tape.
pub struct LearnedField<'a> {
    pub model: &'a ChristoffelModel,
    pub store: &'a ParamStore,
    pub t_emb: Vec<f64>,
}

impl GeodesicField for LearnedField<'_> {
    fn dim(&self) -> usize {
        self.model.cfg.dim
    }

    fn acceleration(&self, gamma: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if gamma.len() != d || v.len() != d {
            return Err(Error::dim("learned field", &[gamma.len(), v.len()], &[d, d]));
        }
        let g = Graph::new();
        let gm = g.constant(Tensor::new(vec![1, d], gamma.to_vec())?);
        let vv = g.constant(Tensor::new(vec![1, d], v.to_vec())?);
        let t = if self.t_emb.is_empty() {
            None
        } else {
            Some(g.constant(Tensor::new(vec![1, self.t_emb.len()], self.t_emb.clone())?))
        };
        let a = self.model.accel(&g, self.store, gm, vv, t)?;
        Ok(g.value(a).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::geometry::{exp_map, ManifoldPoint, SolverConfig, TangentVector};
    use proptest::prelude::*;

    fn model(seed: u64) -> (ParamStore, ChristoffelModel) {
        let mut store = ParamStore::new();
        let m = ChristoffelModel::new(&mut store, "gamma", ChristoffelConfig::new(6, 4), &mut Rng::new(seed)).unwrap();
        (store, m)
    }

    #[test]
    fn zeroed_model_is_flat() {
        let (mut store, m) = model(3);
        m.zero(&mut store).unwrap();
        let f = LearnedField {
            model: &m,
            store: &store,
            t_emb: vec![0.5; 4],
        };
        let h = ManifoldPoint(vec![0.1, -0.2, 0.3, 0.0, 1.0, 2.0]);
        let v = TangentVector(vec![0.5, 0.5, -0.5, 0.25, 0.0, 1.0]);
        let end = exp_map(&h, &v, &f, &SolverConfig::default()).unwrap();
        for k in 0..6 {
            assert!((end.0[k] - h.0[k] - v.0[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_dimension() {
        let (store, m) = model(1);
        let f = LearnedField {
            model: &m,
            store: &store,
            t_emb: vec![0.0; 4],
        };
        assert!(matches!(f.acceleration(&[0.0; 5], &[0.0; 5]), Err(Error::Dimension { .. })));
    }

    proptest! {
        #[test]
        fn quadratic_in_velocity(seed in 0u64..1000, c in -3.0f64..3.0) {
            let (store, m) = model(seed);
            let mut rng = Rng::new(seed ^ 77);
            let f = LearnedField { model: &m, store: &store, t_emb: rng.normal_vec(4) };
            let gamma = rng.normal_vec(6);
            let v = rng.normal_vec(6);
            let cv: Vec<f64> = v.iter().map(|x| c * x).collect();
            let a1 = f.acceleration(&gamma, &v).unwrap();
            let a2 = f.acceleration(&gamma, &cv).unwrap();
            for (x, y) in a1.iter().zip(&a2) {
                prop_assert!((c * c * x - y).abs() <= 1e-10 * (1.0 + y.abs()));
            }
        }
    }
}
