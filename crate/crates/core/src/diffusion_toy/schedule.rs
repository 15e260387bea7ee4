use crate::error::{Error, Result};

/// Linear-β DDPM schedule with a continuous ᾱ.
///
/// Discrete storage is zero-based: `alpha_bar[i]` is ᾱ at timestep `i + 1`,
/// so `alpha_bar[0] = α₁`. For real-valued τ ∈ [0, T], ᾱ(0) = 1 and ln ᾱ is
/// linear between neighbouring integers.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid schedule: T={t_max}, beta {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// ᾱ(τ) for τ ∈ [0, T].
    pub fn alpha_bar_at(&self, tau: f64) -> Result<f64> {
        let t_max = self.t_max() as f64;
        if !(0.0..=t_max).contains(&tau) {
            return Err(Error::contract(format!("timestep {tau} outside [0, {t_max}]")));
        }
        let ln = |i: usize| if i == 0 { 0.0 } else { self.alpha_bar[i - 1].ln() };
        let lo = tau.floor() as usize;
        if lo as f64 == tau {
            return Ok(if lo == 0 { 1.0 } else { self.alpha_bar[lo - 1] });
        }
        let f = tau - lo as f64;
        Ok(((1.0 - f) * ln(lo) + f * ln(lo + 1)).exp())
    }

    /// `S + 1` uniformly spaced levels `0, t0/S, …, t0`.
    pub fn levels(&self, t0: f64, steps: usize) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(Error::contract("step count must be at least 1"));
        }
        if !(t0 > 0.0 && t0 < self.t_max() as f64) {
            return Err(Error::contract(format!("t0 = {t0} must lie in (0, {})", self.t_max())));
        }
        Ok((0..=steps).map(|i| if i == steps { t0 } else { t0 * i as f64 / steps as f64 }).collect())
    }
}

/// Sinusoidal embedding of a real timestep: `[sin(τ·f_i), cos(τ·f_i)]` with
/// `f_i = 10000^(−i/half)`.
pub fn timestep_embedding(tau: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (tau * f).sin();
        out[half + i] = (tau * f).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::default();
        assert_eq!(s.t_max(), 1000);
        assert_eq!(s.alpha_bar[0], 1.0 - 1e-4);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        let mut prev = 1.0 + 1e-12;
        for i in 0..=4000 {
            let a = s.alpha_bar_at(i as f64 * 0.25).unwrap();
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn continuous_matches_discrete() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar_at(0.0).unwrap(), 1.0);
        assert_eq!(s.alpha_bar_at(300.0).unwrap(), s.alpha_bar[299]);
        let mid = s.alpha_bar_at(299.5).unwrap();
        let geo = (s.alpha_bar[298] * s.alpha_bar[299]).sqrt();
        assert!((mid - geo).abs() < 1e-15);
        assert!(s.alpha_bar_at(1000.5).is_err());
    }

    #[test]
    fn alpha_bar_at_reference_points() {
        // closed form: ln ᾱ_t = Σ ln(1 − β_s), computed independently
        let s = NoiseSchedule::default();
        let oracle = |t: usize| {
            (0..t)
                .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
                .sum::<f64>()
                .exp()
        };
        for t in [1, 300, 450, 600, 1000] {
            assert!((s.alpha_bar_at(t as f64).unwrap() - oracle(t)).abs() < 1e-12);
        }
        assert!((s.alpha_bar_at(1000.0).unwrap() - 4.0358e-5).abs() < 1e-8);
    }

    #[test]
    fn levels_are_uniform_and_end_at_t0() {
        let s = NoiseSchedule::default();
        let l = s.levels(300.0, 6).unwrap();
        assert_eq!(l, vec![0.0, 50.0, 100.0, 150.0, 200.0, 250.0, 300.0]);
        assert_eq!(*s.levels(300.0, 7).unwrap().last().unwrap(), 300.0);
        assert!(s.levels(0.0, 6).is_err());
        assert!(s.levels(1000.0, 6).is_err());
        assert!(s.levels(300.0, 0).is_err());
    }

    #[test]
    fn embedding_layout() {
        let e = timestep_embedding(0.0, 64);
        assert!(e[..32].iter().all(|&v| v == 0.0));
        assert!(e[32..].iter().all(|&v| v == 1.0));
        let e = timestep_embedding(7.0, 4);
        let expect = [7f64.sin(), 0.07f64.sin(), 7f64.cos(), 0.07f64.cos()];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }
}
