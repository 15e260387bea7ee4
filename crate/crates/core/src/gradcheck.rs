//! Central finite-difference gradient verification.
//!
//! Evaluates the loss by forward passes only, so it shares no code with
//! [`Graph::backward`] beyond the forward kernels.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    /// Largest relative error over entries whose gradient magnitude exceeded
    /// the floor.
    pub max_rel_err: f64,
    pub worst: Option<String>,
    pub checked: usize,
    pub skipped_small: usize,
}

impl GradReport {
    fn record(&mut self, label: String, analytic: f64, numeric: f64, floor: f64) {
        let scale = analytic.abs().max(numeric.abs());
        if scale <= floor {
            self.skipped_small += 1;
            return;
        }
        self.checked += 1;
        let rel = (analytic - numeric).abs() / scale;
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = Some(format!("{label}: analytic {analytic:.6e} numeric {numeric:.6e}"));
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.skipped_small += other.skipped_small;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Entries with |grad| at or below this are not scored.
    pub floor: f64,
    /// Entries sampled per tensor; `usize::MAX` checks all.
    pub max_entries: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-8,
            max_entries: usize::MAX,
        }
    }
}

fn pick(n: usize, max: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        rng.subset(n, max)
    }
}

impl GradCheck {
    /// Compares tape gradients of `f` with respect to its inputs against
    /// central differences.
    pub fn inputs<F>(&self, inputs: &[Tensor], f: F, rng: &mut Rng) -> Result<GradReport>
    where
        F: Fn(&Graph, &[Var]) -> Result<Var>,
    {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&g, &vars)?;
        g.backward(loss)?;
        let mut report = GradReport::default();
        for (i, t) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[i]).unwrap_or_else(|| Tensor::zeros(t.shape()));
            for j in pick(t.len(), self.max_entries, rng) {
                let eval = |delta: f64| -> Result<f64> {
                    let mut pert: Vec<Tensor> = inputs.to_vec();
                    pert[i].data_mut()[j] += delta;
                    let g2 = Graph::new();
                    let vs: Vec<Var> = pert.into_iter().map(|t| g2.constant(t)).collect();
                    let l = f(&g2, &vs)?;
                    Ok(g2.scalar_value(l))
                };
                let numeric = (eval(self.step)? - eval(-self.step)?) / (2.0 * self.step);
                report.record(format!("input {i}[{j}]"), analytic.data()[j], numeric, self.floor);
            }
        }
        Ok(report)
    }

    /// Compares tape gradients of a loss with respect to every trainable
    /// parameter in `store` against central differences.
    pub fn params<F>(&self, store: &mut ParamStore, f: F, rng: &mut Rng) -> Result<GradReport>
    where
        F: Fn(&Graph, &ParamStore) -> Result<Var>,
    {
        let g = Graph::new();
        let loss = f(&g, store)?;
        g.backward(loss)?;
        store.zero_grad();
        store.accumulate_grads(&g)?;
        drop(g);
        let mut report = GradReport::default();
        let names: Vec<String> = store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
        for name in names {
            let id = store.id(&name).expect("listed above");
            let base = store.get(id).value().clone();
            let analytic = store
                .get(id)
                .grad()
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(base.shape()));
            for j in pick(base.len(), self.max_entries, rng) {
                let mut eval = |delta: f64| -> Result<f64> {
                    let mut t = base.clone();
                    t.data_mut()[j] += delta;
                    store.set_value(id, t)?;
                    let g2 = Graph::new();
                    let l = f(&g2, store)?;
                    Ok(g2.scalar_value(l))
                };
                let numeric = (eval(self.step)? - eval(-self.step)?) / (2.0 * self.step);
                report.record(format!("{name}[{j}]"), analytic.data()[j], numeric, self.floor);
            }
            store.set_value(id, base)?;
        }
        Ok(report)
    }
}
