//! Dormand–Prince 5(4) with embedded error control, generic over the state
//! representation so the same stepping code drives plain vectors and tape
//! variables.

use crate::autodiff::{lincomb_kernel, Graph, Var};
use crate::error::{Error, Result};

use super::SolverConfig;

const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
/// Fifth-order weights; also the last stage row (FSAL).
const B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
/// Fifth minus fourth order weights, for the error estimate.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

/// A state the integrator can advance.
pub trait OdeState: Clone {
    /// `self + Σ cᵢ·kᵢ`.
    fn combine(&self, terms: &[(f64, &Self)]) -> Result<Self>;
    /// Flattened values, used only for error control.
    fn values(&self) -> Vec<f64>;
}

impl OdeState for Vec<f64> {
    fn combine(&self, terms: &[(f64, &Self)]) -> Result<Self> {
        let slices: Vec<(f64, &[f64])> = terms.iter().map(|(c, k)| (*c, k.as_slice())).collect();
        let mut out = vec![0.0; self.len()];
        lincomb_kernel(self, &slices, &mut out);
        Ok(out)
    }

    fn values(&self) -> Vec<f64> {
        self.clone()
    }
}

/// Position/velocity pair recorded on a tape; integrating it yields an
/// endpoint that can be differentiated through the accepted steps.
#[derive(Clone, Copy)]
pub struct TapeState<'g> {
    pub graph: &'g Graph,
    pub pos: Var,
    pub vel: Var,
}

impl OdeState for TapeState<'_> {
    fn combine(&self, terms: &[(f64, &Self)]) -> Result<Self> {
        let pos_terms: Vec<(f64, Var)> = terms.iter().map(|(c, k)| (*c, k.pos)).collect();
        let vel_terms: Vec<(f64, Var)> = terms.iter().map(|(c, k)| (*c, k.vel)).collect();
        Ok(TapeState {
            graph: self.graph,
            pos: self.graph.lincomb(self.pos, &pos_terms)?,
            vel: self.graph.lincomb(self.vel, &vel_terms)?,
        })
    }

    fn values(&self) -> Vec<f64> {
        let mut v = self.graph.value(self.pos).data().to_vec();
        v.extend_from_slice(self.graph.value(self.vel).data());
        v
    }
}

#[derive(Clone, Debug)]
pub struct Solution<S> {
    pub end: S,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// Sizes of the accepted steps, in order. They sum to 1.
    pub step_sizes: Vec<f64>,
    /// (t, state) at t = 0 and after every accepted step, when requested.
    pub trajectory: Vec<(f64, S)>,
}

fn error_norm(y: &[f64], y_new: &[f64], err: &[f64], cfg: &SolverConfig) -> f64 {
    let n = y.len().max(1) as f64;
    let sum: f64 = y
        .iter()
        .zip(y_new)
        .zip(err)
        .map(|((a, b), e)| {
            let sc = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            (e / sc) * (e / sc)
        })
        .sum();
    (sum / n).sqrt()
}

/// Integrates the autonomous system `y' = rhs(y)` over t ∈ [0, 1].
///
/// Steps are sized so the scaled RMS of the embedded error estimate stays at
/// or below one; the last step is shortened to land exactly on t = 1.
pub fn dopri5<S, F>(mut rhs: F, y0: S, cfg: &SolverConfig) -> Result<Solution<S>>
where
    S: OdeState,
    F: FnMut(&S) -> Result<S>,
{
    cfg.validate()?;
    let mut t = 0.0_f64;
    let mut y = y0;
    let mut h = cfg.initial_step;
    let mut k1 = rhs(&y)?;
    let mut accepted = 0;
    let mut rejected = 0;
    let mut step_sizes = Vec::new();
    let mut trajectory = Vec::new();
    if cfg.record_trajectory {
        trajectory.push((0.0, y.clone()));
    }
    while t < 1.0 {
        if accepted + rejected >= cfg.max_steps {
            return Err(Error::Budget {
                max_steps: cfg.max_steps,
                t,
            });
        }
        if t + h > 1.0 || 1.0 - (t + h) < cfg.min_step {
            h = 1.0 - t;
        }
        let k2 = rhs(&y.combine(&[(h * A2[0], &k1)])?)?;
        let k3 = rhs(&y.combine(&[(h * A3[0], &k1), (h * A3[1], &k2)])?)?;
        let k4 = rhs(&y.combine(&[(h * A4[0], &k1), (h * A4[1], &k2), (h * A4[2], &k3)])?)?;
        let k5 = rhs(&y.combine(&[
            (h * A5[0], &k1),
            (h * A5[1], &k2),
            (h * A5[2], &k3),
            (h * A5[3], &k4),
        ])?)?;
        let k6 = rhs(&y.combine(&[
            (h * A6[0], &k1),
            (h * A6[1], &k2),
            (h * A6[2], &k3),
            (h * A6[3], &k4),
            (h * A6[4], &k5),
        ])?)?;
        let y_new = y.combine(&[
            (h * B[0], &k1),
            (h * B[2], &k3),
            (h * B[3], &k4),
            (h * B[4], &k5),
            (h * B[5], &k6),
        ])?;
        let k7 = rhs(&y_new)?;

        let ks = [&k1, &k2, &k3, &k4, &k5, &k6, &k7];
        let kv: Vec<Vec<f64>> = ks.iter().map(|k| k.values()).collect();
        let (yv, ynv) = (y.values(), y_new.values());
        let err: Vec<f64> = (0..yv.len())
            .map(|j| h * (0..7).map(|i| E[i] * kv[i][j]).sum::<f64>())
            .collect();
        let mut norm = error_norm(&yv, &ynv, &err, cfg);
        if !norm.is_finite() || !ynv.iter().all(|x| x.is_finite()) {
            norm = f64::INFINITY;
        }

        if norm <= 1.0 {
            let last = h == 1.0 - t;
            t = if last { 1.0 } else { t + h };
            accepted += 1;
            step_sizes.push(h);
            y = y_new;
            k1 = k7;
            if cfg.record_trajectory {
                trajectory.push((t, y.clone()));
            }
            let fac = if norm == 0.0 {
                FAC_MAX
            } else {
                (SAFETY * norm.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
            };
            h *= fac;
        } else {
            rejected += 1;
            let fac = if norm.is_finite() {
                (SAFETY * norm.powf(-0.2)).clamp(FAC_MIN, 1.0)
            } else {
                FAC_MIN
            };
            h *= fac;
            if h < cfg.min_step {
                return Err(Error::Divergence {
                    t,
                    step: h,
                    state: y.values(),
                });
            }
        }
    }
    Ok(Solution {
        end: y,
        accepted_steps: accepted,
        rejected_steps: rejected,
        step_sizes,
        trajectory,
    })
}

/// Replays a fixed step sequence with the same stage arithmetic as
/// [`dopri5`], without error control. Used to differentiate with frozen steps.
pub fn dopri5_fixed<S, F>(mut rhs: F, y0: S, steps: &[f64]) -> Result<S>
where
    S: OdeState,
    F: FnMut(&S) -> Result<S>,
{
    let mut y = y0;
    let mut k1 = rhs(&y)?;
    for &h in steps {
        let k2 = rhs(&y.combine(&[(h * A2[0], &k1)])?)?;
        let k3 = rhs(&y.combine(&[(h * A3[0], &k1), (h * A3[1], &k2)])?)?;
        let k4 = rhs(&y.combine(&[(h * A4[0], &k1), (h * A4[1], &k2), (h * A4[2], &k3)])?)?;
        let k5 = rhs(&y.combine(&[
            (h * A5[0], &k1),
            (h * A5[1], &k2),
            (h * A5[2], &k3),
            (h * A5[3], &k4),
        ])?)?;
        let k6 = rhs(&y.combine(&[
            (h * A6[0], &k1),
            (h * A6[1], &k2),
            (h * A6[2], &k3),
            (h * A6[3], &k4),
            (h * A6[4], &k5),
        ])?)?;
        y = y.combine(&[
            (h * B[0], &k1),
            (h * B[2], &k3),
            (h * B[3], &k4),
            (h * B[4], &k5),
            (h * B[5], &k6),
        ])?;
        k1 = rhs(&y)?;
    }
    Ok(y)
}

/// Classical fixed-step RK4 over [0, 1]; an independent reference for the
/// adaptive solver.
pub fn rk4_fixed<F>(mut rhs: F, y0: Vec<f64>, step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = (1.0 / step).round() as usize;
    let h = 1.0 / n as f64;
    let mut y = y0;
    let axpy = |y: &[f64], c: f64, k: &[f64]| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + c * b).collect() };
    for _ in 0..n {
        let k1 = rhs(&y)?;
        let k2 = rhs(&axpy(&y, h / 2.0, &k1))?;
        let k3 = rhs(&axpy(&y, h / 2.0, &k2))?;
        let k4 = rhs(&axpy(&y, h, &k3))?;
        for j in 0..y.len() {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

    #[test]
    fn tableau_rows_sum_to_nodes() {
        let rows: [&[f64]; 5] = [&A2, &A3, &A4, &A5, &A6];
        for (i, row) in rows.iter().enumerate() {
            let s: f64 = row.iter().sum();
            assert!((s - C[i + 1]).abs() < 1e-14, "row {}", i + 2);
        }
        assert!((B.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(E.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let cfg = SolverConfig::default();
        let sol = dopri5(|y: &Vec<f64>| Ok(vec![-2.0 * y[0]]), vec![1.0], &cfg).unwrap();
        assert!((sol.end[0] - (-2.0f64).exp()).abs() < 1e-6);
        assert!((sol.step_sizes.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn replay_reproduces_adaptive_bits() {
        let cfg = SolverConfig::default();
        let f = |y: &Vec<f64>| Ok(vec![y[1], -y[0].sin()]);
        let sol = dopri5(f, vec![0.3, 1.2], &cfg).unwrap();
        let replay = dopri5_fixed(f, vec![0.3, 1.2], &sol.step_sizes).unwrap();
        assert_eq!(sol.end, replay);
    }

    #[test]
    fn stiff_blowup_reports_divergence() {
        let cfg = SolverConfig {
            min_step: 1e-6,
            ..SolverConfig::default()
        };
        // y' = y², y(0) = 2 blows up at t = 0.5
        let err = dopri5(|y: &Vec<f64>| Ok(vec![y[0] * y[0]]), vec![2.0], &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. } | Error::Budget { .. }), "{err}");
    }

    #[test]
    fn budget_exhaustion_reported() {
        let cfg = SolverConfig {
            max_steps: 3,
            initial_step: 0.01,
            ..SolverConfig::default()
        };
        let err = dopri5(|y: &Vec<f64>| Ok(vec![y[0]]), vec![1.0], &cfg).unwrap_err();
        assert!(matches!(err, Error::Budget { max_steps: 3, .. }));
    }
}
