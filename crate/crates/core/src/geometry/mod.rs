//! Geodesic edit offsets: retraction, analytic and learned Christoffel
//! contractions, an adaptive Dormand–Prince integrator and the exponential
//! map built on it.

mod analytic;
mod block;
mod christoffel;
pub mod selftest;
mod solver;

pub use analytic::AnalyticChristoffel;
pub use block::{BlockConfig, BlockOutput, RiemannianBlock};
pub use christoffel::{ChristoffelConfig, ChristoffelModel, LearnedField};
pub use solver::{dopri5, dopri5_fixed, rk4_fixed, OdeState, Solution, TapeState};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldPoint(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicState {
    pub gamma: ManifoldPoint,
    pub velocity: TangentVector,
}

impl GeodesicState {
    pub fn new(gamma: Vec<f64>, velocity: Vec<f64>) -> Result<Self> {
        if gamma.len() != velocity.len() {
            return Err(Error::dim("geodesic state", &[gamma.len()], &[velocity.len()]));
        }
        Ok(Self {
            gamma: ManifoldPoint(gamma),
            velocity: TangentVector(velocity),
        })
    }

    fn stacked(&self) -> Vec<f64> {
        let mut s = self.gamma.0.clone();
        s.extend_from_slice(&self.velocity.0);
        s
    }

    fn unstack(s: &[f64]) -> Self {
        let d = s.len() / 2;
        Self {
            gamma: ManifoldPoint(s[..d].to_vec()),
            velocity: TangentVector(s[d..].to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub initial_step: f64,
    pub min_step: f64,
    pub max_steps: usize,
    pub record_trajectory: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-5,
            atol: 1e-6,
            initial_step: 0.05,
            min_step: 1e-8,
            max_steps: 1000,
            record_trajectory: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config(format!(
                "solver tolerances must be positive (rtol {}, atol {})",
                self.rtol, self.atol
            )));
        }
        if !(0.0 < self.min_step && self.min_step < self.initial_step && self.initial_step <= 1.0) {
            return Err(Error::Config(format!(
                "solver steps need 0 < min_step < initial_step <= 1 (got {}, {})",
                self.min_step, self.initial_step
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("solver max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetractionConfig {
    pub r_max: f64,
}

impl Default for RetractionConfig {
    fn default() -> Self {
        Self { r_max: 1.0 }
    }
}

/// Scales `w` to norm `r_max·tanh(‖w‖/r_max)`, keeping its direction.
pub fn retract(w: &[f64], cfg: RetractionConfig) -> Result<TangentVector> {
    if !(cfg.r_max > 0.0) {
        return Err(Error::Config(format!("r_max must be positive, got {}", cfg.r_max)));
    }
    let s = crate::autodiff::retract_scale(norm(w), cfg.r_max);
    let mut v: Vec<f64> = w.iter().map(|x| x * s).collect();
    // tanh saturates to 1 in floating point; keep the norm strictly inside
    while norm(&v) >= cfg.r_max {
        v.iter_mut().for_each(|x| *x *= 1.0 - f64::EPSILON);
    }
    Ok(TangentVector(v))
}

/// `y₀ = h + W_tᵀ·t_emb` with `w_t` of shape `[d_t, d]`.
pub fn init_point(h: &[f64], t_emb: &[f64], w_t: &Tensor) -> Result<ManifoldPoint> {
    let (dt, d) = w_t.dims2("init_point")?;
    if d != h.len() || dt != t_emb.len() {
        return Err(Error::dim("init_point", &[t_emb.len(), h.len()], w_t.shape()));
    }
    let mut y = h.to_vec();
    for (i, &e) in t_emb.iter().enumerate() {
        if e != 0.0 {
            for (yk, wk) in y.iter_mut().zip(w_t.row(i)) {
                *yk += e * wk;
            }
        }
    }
    Ok(ManifoldPoint(y))
}

/// A velocity-quadratic acceleration field `a = −Γ(γ)[v, v]`.
pub trait GeodesicField {
    fn dim(&self) -> usize;
    fn acceleration(&self, gamma: &[f64], v: &[f64]) -> Result<Vec<f64>>;
}

pub fn christoffel_contract(field: &dyn GeodesicField, gamma: &ManifoldPoint, v: &TangentVector) -> Result<Vec<f64>> {
    let d = field.dim();
    if gamma.0.len() != d || v.0.len() != d {
        return Err(Error::dim("christoffel_contract", &[gamma.0.len(), v.0.len()], &[d, d]));
    }
    field.acceleration(&gamma.0, &v.0)
}

#[derive(Clone, Debug)]
pub struct GeodesicSolution {
    pub endpoint: GeodesicState,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub step_sizes: Vec<f64>,
    pub trajectory: Vec<(f64, GeodesicState)>,
}

impl GeodesicSolution {
    /// Arc length of the recorded trajectory by the trapezoid rule on ‖v‖.
    pub fn arc_length(&self) -> f64 {
        self.trajectory
            .windows(2)
            .map(|w| 0.5 * (w[1].0 - w[0].0) * (norm(&w[0].1.velocity.0) + norm(&w[1].1.velocity.0)))
            .sum()
    }
}

pub fn geodesic_rhs(field: &dyn GeodesicField, s: &[f64]) -> Result<Vec<f64>> {
    let d = s.len() / 2;
    let mut out = s[d..].to_vec();
    out.extend(field.acceleration(&s[..d], &s[d..])?);
    Ok(out)
}

pub fn integrate_geodesic(y0: &GeodesicState, field: &dyn GeodesicField, cfg: &SolverConfig) -> Result<GeodesicSolution> {
    let d = field.dim();
    if y0.gamma.0.len() != d || y0.velocity.0.len() != d {
        return Err(Error::dim("integrate_geodesic", &[y0.gamma.0.len(), y0.velocity.0.len()], &[d, d]));
    }
    let s0 = y0.stacked();
    if !s0.iter().all(|x| x.is_finite()) {
        return Err(Error::contract("initial geodesic state is not finite"));
    }
    let sol = dopri5(|s: &Vec<f64>| geodesic_rhs(field, s), s0, cfg)?;
    Ok(GeodesicSolution {
        endpoint: GeodesicState::unstack(&sol.end),
        accepted_steps: sol.accepted_steps,
        rejected_steps: sol.rejected_steps,
        step_sizes: sol.step_sizes,
        trajectory: sol.trajectory.iter().map(|(t, s)| (*t, GeodesicState::unstack(s))).collect(),
    })
}

pub fn exp_map(h: &ManifoldPoint, v0: &TangentVector, field: &dyn GeodesicField, cfg: &SolverConfig) -> Result<ManifoldPoint> {
    let y0 = GeodesicState::new(h.0.clone(), v0.0.clone())?;
    Ok(integrate_geodesic(&y0, field, cfg)?.endpoint.gamma)
}

pub fn geodesic_offset(h: &ManifoldPoint, v0: &TangentVector, field: &dyn GeodesicField, cfg: &SolverConfig) -> Result<Vec<f64>> {
    let end = exp_map(h, v0, field, cfg)?;
    Ok(end.0.iter().zip(&h.0).map(|(a, b)| a - b).collect())
}

/// Cosine of the angle between two vectors; zero if either vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = norm(a) * norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn retract_zero_is_zero() {
        assert_eq!(retract(&[0.0, 0.0], RetractionConfig::default()).unwrap().0, vec![0.0, 0.0]);
    }

    #[test]
    fn retract_three_four() {
        let v = retract(&[3.0, 4.0], RetractionConfig::default()).unwrap().0;
        let t5 = 0.999_909_204_262_595_1;
        assert!((v[0] - 0.6 * t5).abs() < 1e-12);
        assert!((v[1] - 0.8 * t5).abs() < 1e-12);
        assert!((v[0] - 0.59995).abs() < 1e-5 && (v[1] - 0.79993).abs() < 1e-5);
    }

    #[test]
    fn retract_rejects_bad_radius() {
        assert!(retract(&[1.0], RetractionConfig { r_max: 0.0 }).is_err());
    }

    #[test]
    fn init_point_cases() {
        let w = Tensor::from_rows(&[&[1.0, 2.0, 0.0], &[0.5, -1.0, 3.0]]);
        let h = [0.1, 0.2, 0.3];
        assert_eq!(init_point(&h, &[0.0, 0.0], &w).unwrap().0, h.to_vec());
        assert_eq!(init_point(&h, &[4.0, 5.0], &Tensor::zeros(&[2, 3])).unwrap().0, h.to_vec());
        // hand-computed: h + 2·row0 − 1·row1
        let y = init_point(&h, &[2.0, -1.0], &w).unwrap().0;
        let expect = [0.1 + 2.0 - 0.5, 0.2 + 4.0 + 1.0, 0.3 + 0.0 - 3.0];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(init_point(&h, &[1.0], &w), Err(Error::Dimension { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            min_step: 0.1,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            rtol: 0.0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn contract_checks_dimensions() {
        let f = AnalyticChristoffel::Flat { dim: 3 };
        let err = christoffel_contract(&f, &ManifoldPoint(vec![0.0; 2]), &TangentVector(vec![0.0; 3]));
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_velocity_is_stationary() {
        for field in [
            AnalyticChristoffel::Flat { dim: 2 },
            AnalyticChristoffel::Sphere,
            AnalyticChristoffel::PoincareDisk,
        ] {
            let h = ManifoldPoint(vec![0.7, 0.2]);
            let end = exp_map(&h, &TangentVector(vec![0.0, 0.0]), &field, &SolverConfig::default()).unwrap();
            assert_eq!(end, h);
        }
    }

    #[test]
    fn equator_offset() {
        let h = ManifoldPoint(vec![std::f64::consts::FRAC_PI_2, 0.0]);
        let v = TangentVector(vec![0.0, std::f64::consts::FRAC_PI_2]);
        let dh = geodesic_offset(&h, &v, &AnalyticChristoffel::Sphere, &SolverConfig::default()).unwrap();
        assert!(dh[0].abs() < 1e-6);
        assert!((dh[1] - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
    }

    #[test]
    fn sphere_rtol_tightening_never_reduces_steps() {
        let y0 = GeodesicState::new(vec![std::f64::consts::FRAC_PI_3, 0.0], vec![0.2, 0.7]).unwrap();
        let mut last = 0;
        for rtol in [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8] {
            let cfg = SolverConfig {
                rtol,
                ..SolverConfig::default()
            };
            let n = integrate_geodesic(&y0, &AnalyticChristoffel::Sphere, &cfg).unwrap().accepted_steps;
            assert!(n >= last, "rtol {rtol}: {n} < {last}");
            last = n;
        }
    }

    proptest! {
        #[test]
        fn retract_preserves_direction_and_bounds_norm(
            w in prop::collection::vec(-50.0f64..50.0, 1..16),
            r_max in 0.1f64..5.0,
        ) {
            let v = retract(&w, RetractionConfig { r_max }).unwrap().0;
            let nw = norm(&w);
            let nv = norm(&v);
            prop_assert!(nv < r_max || nw == 0.0);
            if nw > 1e-9 {
                for (a, b) in v.iter().zip(&w) {
                    prop_assert!((a / nv - b / nw).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn flat_exp_is_translation(
            h in prop::collection::vec(-5.0f64..5.0, 3),
            v in prop::collection::vec(-5.77f64..5.77, 3),
        ) {
            let end = exp_map(&ManifoldPoint(h.clone()), &TangentVector(v.clone()),
                &AnalyticChristoffel::Flat { dim: 3 }, &SolverConfig::default()).unwrap();
            let err: f64 = end.0.iter().zip(h.iter().zip(&v)).map(|(e, (a, b))| (e - a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err < 1e-9);
        }
    }
}
