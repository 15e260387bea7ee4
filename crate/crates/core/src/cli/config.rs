use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion_toy::{Attribute, DenoiserConfig, DenoiserTrainConfig, EditConfig, EditTrainConfig, GridConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics_flops::BenchConfig;
use crate::prompt_enrichment::ProviderConfig;
use crate::pruned_attention::PrunerTrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_max, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: DenoiserConfig,
    pub train: DenoiserTrainConfig,
    pub train_images: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: DenoiserConfig::default(),
            train: DenoiserTrainConfig::default(),
            train_images: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditSection {
    /// Inversion, generation and blending of one edit.
    pub run: EditConfig,
    pub train: EditTrainConfig,
    pub attribute: Attribute,
    /// Attribute increase between source and target of a training pair.
    pub shift: f64,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    /// Use per-sample captions for the edit directions.
    pub enriched: bool,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            run: EditConfig::default(),
            train: EditTrainConfig::default(),
            attribute: Attribute::Brightness,
            shift: 0.5,
            train_pairs: 500,
            heldout_pairs: 32,
            enriched: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningSection {
    pub train: PrunerTrainConfig,
    /// Bottleneck samples drawn from the denoiser for training.
    pub samples: usize,
    pub tau_max: f64,
    /// Importance heatmaps written after training.
    pub heatmaps: usize,
}

impl Default for PruningSection {
    fn default() -> Self {
        Self {
            train: PrunerTrainConfig::default(),
            samples: 256,
            tau_max: 300.0,
            heatmaps: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub cells: GridConfig,
    pub images: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            cells: GridConfig::default(),
            images: 32,
        }
    }
}

/// Every knob of every subcommand. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelSection,
    pub edit: EditSection,
    pub pruning: PruningSection,
    pub caption: ProviderConfig,
    pub bench: BenchConfig,
    pub grid: GridSection,
    pub seed: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    /// Reads a config file, returning it with its raw bytes.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Config(format!("{}: config is not UTF-8", path.display())))?;
        let cfg = Self::parse(text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        Ok((cfg, bytes))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule.build()?;
        self.model.arch.validate()?;
        self.model.train.validate()?;
        if self.model.train_images == 0 {
            return Err(Error::Config("model.train_images must be positive".into()));
        }
        self.edit.run.validate(schedule.t_max())?;
        self.edit.train.validate()?;
        if !(self.edit.shift > 0.0 && self.edit.shift < 1.0) {
            return Err(Error::Config(format!("edit.shift = {} must lie in (0, 1)", self.edit.shift)));
        }
        if self.edit.train_pairs == 0 || self.edit.heldout_pairs == 0 {
            return Err(Error::Config("edit pair counts must be positive".into()));
        }
        self.pruning.train.validate()?;
        if self.pruning.samples == 0 || !(self.pruning.tau_max > 0.0 && self.pruning.tau_max <= schedule.t_max() as f64) {
            return Err(Error::Config("pruning.samples must be positive and tau_max within the schedule".into()));
        }
        self.caption.validate()?;
        self.grid.cells.validate()?;
        if self.grid.images == 0 {
            return Err(Error::Config("grid.images must be positive".into()));
        }
        for &t0 in &self.grid.cells.t0s {
            if !(t0 > 0.0 && t0 < schedule.t_max() as f64) {
                return Err(Error::Config(format!("grid t0 = {t0} outside (0, {})", schedule.t_max())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::parse(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::parse("{}").unwrap(), c);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::parse(r#"{"seed": 7, "edit": {"run": {"alpha_inner": 0.5}}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.edit.run.alpha_inner, 0.5);
        assert_eq!(c.edit.run.s_gen, EditConfig::default().s_gen);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [r#"{"sed": 1}"#, r#"{"edit": {"run": {"alpha": 1}}}"#, r#"{"caption": {"backend": "carrier-pigeon"}}"#] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn range_violations_named() {
        let c = RunConfig::parse(r#"{"edit": {"run": {"alpha_inner": 1.5}}}"#).unwrap();
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("alpha_inner"), "{err}");
    }
}
