//! Analytic-manifold checks of the geodesic solver.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_4};

use crate::error::Result;

use super::{geodesic_rhs, integrate_geodesic, rk4_fixed, AnalyticChristoffel, GeodesicState, SolverConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SelftestRow {
    pub manifold: &'static str,
    pub test: &'static str,
    pub max_error: f64,
    pub accepted_steps: usize,
    pub pass: bool,
}

enum Reference {
    Exact(Vec<f64>),
    Rk4,
}

fn case(
    field: AnalyticChristoffel,
    test: &'static str,
    gamma: [f64; 2],
    v: [f64; 2],
    reference: Reference,
    tol: f64,
    cfg: &SolverConfig,
) -> Result<SelftestRow> {
    let (gamma, v) = (gamma.to_vec(), v.to_vec());
    let y0 = GeodesicState::new(gamma.clone(), v.clone())?;
    let sol = integrate_geodesic(&y0, &field, cfg)?;
    let expect = match reference {
        Reference::Exact(e) => e,
        Reference::Rk4 => {
            let mut s = gamma.clone();
            s.extend_from_slice(&v);
            let out = rk4_fixed(|s| geodesic_rhs(&field, s), s, 1e-5)?;
            out[..gamma.len()].to_vec()
        }
    };
    let max_error = sol
        .endpoint
        .gamma
        .0
        .iter()
        .zip(&expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(SelftestRow {
        manifold: field.name(),
        test,
        max_error,
        accepted_steps: sol.accepted_steps,
        pass: max_error <= tol,
    })
}

/// Runs the full suite at the given solver settings.
pub fn run(cfg: &SolverConfig) -> Result<Vec<SelftestRow>> {
    let flat = AnalyticChristoffel::Flat { dim: 2 };
    let sphere = AnalyticChristoffel::Sphere;
    let disk = AnalyticChristoffel::PoincareDisk;
    let oracle_tol = 10.0 * (cfg.atol + cfg.rtol);
    let t = 0.5f64.tanh();
    Ok(vec![
        case(flat, "zero_velocity", [0.3, -0.7], [0.0, 0.0], Reference::Exact(vec![0.3, -0.7]), 0.0, cfg)?,
        case(flat, "straight_line", [1.0, 2.0], [6.0, -8.0], Reference::Exact(vec![7.0, -6.0]), 1e-9, cfg)?,
        case(flat, "rk4_oracle", [1.0, 2.0], [0.3, 0.1], Reference::Rk4, oracle_tol, cfg)?,
        case(sphere, "equator", [FRAC_PI_2, 0.0], [0.0, FRAC_PI_2], Reference::Exact(vec![FRAC_PI_2, FRAC_PI_2]), 1e-6, cfg)?,
        case(sphere, "meridian", [FRAC_PI_4, 0.3], [0.5, 0.0], Reference::Exact(vec![FRAC_PI_4 + 0.5, 0.3]), 1e-6, cfg)?,
        case(sphere, "rk4_oracle", [FRAC_PI_3, 0.0], [0.2, 0.7], Reference::Rk4, 1e-6, cfg)?,
        case(disk, "radial_closed_form", [0.0, 0.0], [0.3, 0.4], Reference::Exact(vec![0.6 * t, 0.8 * t]), 1e-6, cfg)?,
        case(disk, "rk4_oracle", [0.2, -0.1], [0.3, 0.25], Reference::Rk4, oracle_tol, cfg)?,
    ])
}

pub fn to_csv(rows: &[SelftestRow]) -> String {
    let mut out = String::from("manifold,test,max_error,accepted_steps,pass\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.3e},{},{}\n",
            r.manifold,
            r.test,
            r.max_error,
            r.accepted_steps,
            if r.pass { "pass" } else { "fail" }
        ));
    }
    out
}
