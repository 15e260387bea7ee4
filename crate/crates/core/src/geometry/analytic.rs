use crate::error::{Error, Result};
use crate::tensor::dot;

use super::GeodesicField;

/// Closed-form geodesic accelerations of small reference manifolds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnalyticChristoffel {
    /// Euclidean space; every Christoffel symbol vanishes.
    Flat { dim: usize },
    /// Unit 2-sphere in (θ, φ) coordinates.
    Sphere,
    /// Poincaré disk, metric 4/(1−|x|²)² δ.
    PoincareDisk,
}

impl AnalyticChristoffel {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Flat { .. } => "flat",
            Self::Sphere => "sphere",
            Self::PoincareDisk => "poincare",
        }
    }
}

impl GeodesicField for AnalyticChristoffel {
    fn dim(&self) -> usize {
        match self {
            Self::Flat { dim } => *dim,
            Self::Sphere | Self::PoincareDisk => 2,
        }
    }

    fn acceleration(&self, gamma: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if gamma.len() != d || v.len() != d {
            return Err(Error::dim(self.name(), &[gamma.len(), v.len()], &[d, d]));
        }
        Ok(match self {
            Self::Flat { dim } => vec![0.0; *dim],
            Self::Sphere => {
                // Γ^θ_φφ = −sinθ cosθ, Γ^φ_θφ = cotθ
                let (s, c) = gamma[0].sin_cos();
                vec![s * c * v[1] * v[1], -2.0 * (c / s) * v[0] * v[1]]
            }
            Self::PoincareDisk => {
                // conformal factor e^{2f}, f = ln 2 − ln(1−|x|²)
                let r2 = dot(gamma, gamma);
                if r2 >= 1.0 {
                    return Err(Error::Degenerate(format!("point outside the Poincaré disk, |x|² = {r2}")));
                }
                let k = 2.0 / (1.0 - r2);
                let gf = [k * gamma[0], k * gamma[1]];
                let vg = dot(v, &gf);
                let vv = dot(v, v);
                vec![-(2.0 * vg * v[0] - vv * gf[0]), -(2.0 * vg * v[1] - vv * gf[1])]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{integrate_geodesic, rk4_fixed, geodesic_rhs, GeodesicState, SolverConfig};
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_4};

    #[test]
    fn flat_is_zero() {
        let a = AnalyticChristoffel::Flat { dim: 4 }.acceleration(&[1.0; 4], &[3.0; 4]).unwrap();
        assert_eq!(a, vec![0.0; 4]);
    }

    #[test]
    fn equator_has_no_acceleration() {
        let a = AnalyticChristoffel::Sphere.acceleration(&[FRAC_PI_2, 0.0], &[0.0, 2.5]).unwrap();
        assert!(a[0].abs() < 1e-15 && a[1] == 0.0);
    }

    #[test]
    fn meridian_is_a_geodesic() {
        let y0 = GeodesicState::new(vec![FRAC_PI_4, 0.3], vec![0.5, 0.0]).unwrap();
        let end = integrate_geodesic(&y0, &AnalyticChristoffel::Sphere, &SolverConfig::default())
            .unwrap()
            .endpoint;
        assert!((end.gamma.0[0] - (FRAC_PI_4 + 0.5)).abs() < 1e-9);
        assert_eq!(end.gamma.0[1], 0.3);
    }

    #[test]
    fn poincare_radial_matches_closed_form() {
        // exp_0(v) = tanh(|v|) v/|v|
        let y0 = GeodesicState::new(vec![0.0, 0.0], vec![0.3, 0.4]).unwrap();
        let end = integrate_geodesic(&y0, &AnalyticChristoffel::PoincareDisk, &SolverConfig::default())
            .unwrap()
            .endpoint;
        let t = 0.5f64.tanh();
        assert!((end.gamma.0[0] - 0.6 * t).abs() < 1e-6);
        assert!((end.gamma.0[1] - 0.8 * t).abs() < 1e-6);
    }

    #[test]
    fn tilted_sphere_matches_rk4() {
        let field = AnalyticChristoffel::Sphere;
        let y0 = GeodesicState::new(vec![FRAC_PI_3, 0.0], vec![0.2, 0.7]).unwrap();
        let cfg = SolverConfig::default();
        let end = integrate_geodesic(&y0, &field, &cfg).unwrap().endpoint;
        let oracle = rk4_fixed(|s| geodesic_rhs(&field, s), vec![FRAC_PI_3, 0.0, 0.2, 0.7], 1e-5).unwrap();
        for k in 0..2 {
            assert!((end.gamma.0[k] - oracle[k]).abs() < 1e-6, "{k}: {} vs {}", end.gamma.0[k], oracle[k]);
        }
    }

    #[test]
    fn disk_boundary_is_degenerate() {
        assert!(AnalyticChristoffel::PoincareDisk.acceleration(&[1.0, 0.0], &[0.1, 0.0]).is_err());
    }
}
