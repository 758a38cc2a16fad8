//! Experiment configuration: one TOML document drives every pipeline stage.
//!
//! Unknown keys anywhere in the document are rejected, and
//! [`ExperimentConfig::validate`] runs before any stage does work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventParams;
use crate::impact::ImpactParams;
use crate::models::{ModelKind, ModelShape, TrainingConfig};
use crate::network::Calendar;
use crate::nn::GradCheckConfig;
use crate::synth::WorldConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedConfig {
    /// Moving-average window in raw samples.
    pub window: usize,
    /// Resampling stride in raw samples.
    pub stride: usize,
    /// First day of the test half.
    pub split_day: usize,
}

impl Default for SpeedConfig {
    fn default() -> Self {
        SpeedConfig {
            window: 15,
            stride: 15,
            split_day: 14,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    /// Stride between training window starts, in bins.
    pub train_stride: usize,
    /// Stride between test window starts, in bins.
    pub test_stride: usize,
    /// Training windows whose targets fall in the last `validation_days`
    /// of the training half are held out for model selection.
    pub validation_days: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            train_stride: 24,
            test_stride: 4,
            validation_days: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variants: Vec<ModelKind>,
    /// Training runs per variant; run `r` uses seed `training.seed + r`.
    pub replicates: usize,
    pub shape: ModelShape,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variants: vec![
                ModelKind::Seq2seq,
                ModelKind::Seq2seqAt,
                ModelKind::Seq2seqNb,
                ModelKind::Seq2seqQi,
                ModelKind::Hybrid,
            ],
            replicates: 3,
            shape: ModelShape::default(),
        }
    }
}

impl ModelConfig {
    pub fn seeds(&self, base: u64) -> Vec<u64> {
        (0..self.replicates as u64).map(|r| base + r).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSettings {
    pub shape: ModelShape,
    pub batch: usize,
    pub check: GradCheckConfig,
}

impl Default for GradCheckSettings {
    /// Hidden size 8, eight history bins and two targets.
    fn default() -> Self {
        GradCheckSettings {
            shape: ModelShape {
                hidden: 8,
                graph_dim: 4,
                qi_hidden: 4,
                t: 8,
                t_prime: 2,
            },
            batch: 3,
            check: GradCheckConfig::default(),
        }
    }
}

/// Thresholds `repro` enforces; any violation makes it exit nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptanceConfig {
    pub min_recovered_events: usize,
    pub recovery_tolerance_bins: usize,
    pub max_spearman: f64,
    /// Require Hybrid and Seq2Seq+QI to beat Seq2Seq on median Err_E.
    pub require_ordering: bool,
    /// Require every model to beat persistence on median Err_T.
    pub require_beats_persistence: bool,
}

impl Default for AcceptanceConfig {
    fn default() -> Self {
        AcceptanceConfig {
            min_recovered_events: 9,
            recovery_tolerance_bins: 1,
            max_spearman: -0.4,
            require_ordering: true,
            require_beats_persistence: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output directory; the `--out` flag takes precedence.
    pub out_dir: Option<PathBuf>,
    pub world: WorldConfig,
    pub events: EventParams,
    pub impact: ImpactParams,
    pub speed: SpeedConfig,
    pub windows: WindowConfig,
    pub calendar: Calendar,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub gradcheck: GradCheckSettings,
    pub acceptance: AcceptanceConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces the world and training seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.training.seed = seed;
        self
    }

    /// Bin index of the train/test boundary.
    pub fn split_bin(&self) -> usize {
        self.speed.split_day * 86_400 / self.bin_seconds() as usize
    }

    pub fn bin_seconds(&self) -> i64 {
        self.speed.stride as i64 * crate::speed::RAW_STEP_S
    }

    pub fn bins(&self) -> usize {
        self.world.minutes() / self.speed.stride
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.events.validate().map_err(|e| Error::Config(format!("events: {e}")))?;
        self.world.validate(&self.events)?;
        self.impact.validate().map_err(|e| Error::Config(format!("impact: {e}")))?;
        self.calendar.validate().map_err(|e| Error::Config(format!("calendar: {e}")))?;
        self.training.validate()?;
        self.model.shape.validate().map_err(|e| Error::Config(format!("model.shape: {e}")))?;
        self.gradcheck
            .shape
            .validate()
            .map_err(|e| Error::Config(format!("gradcheck.shape: {e}")))?;
        if self.speed.window == 0 || self.speed.stride == 0 {
            return bad("speed.window and speed.stride must be positive".into());
        }
        if self.bin_seconds() != crate::query::BIN_SECONDS {
            return bad(format!(
                "speed.stride must produce {} s bins to line up with the query tensor",
                crate::query::BIN_SECONDS
            ));
        }
        if self.speed.split_day == 0 || self.speed.split_day >= self.world.days {
            return bad(format!("speed.split_day must lie in 1..{}", self.world.days));
        }
        let span = self.model.shape.t + self.model.shape.t_prime;
        let val_bins = self.windows.validation_days * 96;
        if self.split_bin() < span + val_bins {
            return bad("training half is too short for one training window plus the validation days".into());
        }
        if self.windows.train_stride == 0 || self.windows.test_stride == 0 {
            return bad("window strides must be positive".into());
        }
        if self.model.variants.is_empty() || self.model.replicates == 0 {
            return bad("model.variants and model.replicates must be non-empty".into());
        }
        let mut seen = self.model.variants.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.model.variants.len() {
            return bad("model.variants lists a variant twice".into());
        }
        if self.gradcheck.batch == 0 {
            return bad("gradcheck.batch must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHIPPED: &str = include_str!("../../../configs/desk.toml");

    #[test]
    fn shipped_config_is_the_default() {
        let cfg = ExperimentConfig::from_toml(SHIPPED).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{SHIPPED}\n[extra]\nkey = 1\n");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("extra"), "{err}");
        let text = SHIPPED.replace("train_stride", "train_strid");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.speed.split_day = 28;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.speed.stride = 10;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.model.variants.push(ModelKind::Hybrid);
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.training.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_override() {
        let cfg = ExperimentConfig::default().with_seed(42);
        assert_eq!((cfg.world.seed, cfg.training.seed), (42, 42));
        assert_eq!(cfg.model.seeds(42), vec![42, 43, 44]);
        assert_eq!(cfg.split_bin(), 14 * 96);
        assert_eq!(cfg.bins(), 28 * 96);
    }
}
