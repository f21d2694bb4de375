//! Run configuration, read from TOML. Every section and key is optional;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::condition::ConditionConfig;
use crate::error::{Error, Result};
use crate::eval::{default_thresholds, EvalConfig};
use crate::geometry::{BoxConfig, CropMode};
use crate::nets::{AdamConfig, Arch, BuDecodeConfig, DEFAULT_INSERT_STAGE};
use crate::sampling::{ErrorDistribution, MatchMetric, OksParams, ScaleSource, DEFAULT_MATCH_FLOOR};
use crate::schema::KeypointSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Conditions are matched bottom-up predictions from saved checkpoints.
    Empirical,
    /// Conditions are ground truth with synthesized errors.
    Generative,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(Self::Empirical),
            "generative" => Ok(Self::Generative),
            other => Err(Error::Config(format!("unknown sampling strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    pub size: usize,
    pub mode: CropMode,
    /// Pixels added around the proposal's keypoint box.
    pub margin: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            size: 64,
            mode: CropMode::PadSquare,
            margin: 5.0,
        }
    }
}

impl CropConfig {
    pub fn box_config(&self) -> BoxConfig {
        BoxConfig::with_margin(self.margin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub strategy: Strategy,
    pub metric: MatchMetric,
    pub floor: f64,
    pub errors: ErrorDistribution,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Empirical,
            metric: MatchMetric::Oks,
            floor: DEFAULT_MATCH_FLOOR,
            errors: ErrorDistribution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub insert_stage: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Coam,
            insert_stage: DEFAULT_INSERT_STAGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The rate is multiplied by `decay_factor` when each of these epochs starts.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Per-sample gradients are computed on this many threads and always
    /// summed in sample order; 1 runs everything on the calling thread.
    pub workers: usize,
    /// Cap on samples per epoch (0 = no cap).
    pub max_samples: usize,
}

impl TrainConfig {
    pub fn adam(&self, steps_per_epoch: usize) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            decay_steps: self.decay_epochs.iter().map(|e| e * steps_per_epoch).collect(),
            decay_factor: self.decay_factor,
            ..AdamConfig::default()
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            lr: 2e-3,
            decay_epochs: vec![4],
            decay_factor: 0.2,
            workers: 1,
            max_samples: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuConfig {
    pub train: TrainConfig,
    pub decode: BuDecodeConfig,
    /// How many end-of-epoch checkpoints feed the empirical condition pool.
    pub snapshots: usize,
}

impl Default for BuConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 15,
                decay_epochs: vec![11],
                ..TrainConfig::default()
            },
            decode: BuDecodeConfig::default(),
            snapshots: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub iterations: usize,
    /// Re-derive the crop box from each refined pose (otherwise keep the first crop).
    pub rederive_box: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            rederive_box: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub thresholds: Vec<f64>,
    pub band_boundaries: Vec<f64>,
    pub max_detections: usize,
    pub scale_source: ScaleSource,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            thresholds: default_thresholds(),
            band_boundaries: vec![0.3, 0.6],
            max_detections: 20,
            scale_source: ScaleSource::BboxArea,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub schema: String,
    pub data: DataConfig,
    pub crop: CropConfig,
    pub condition: ConditionConfig,
    pub sampling: SamplingConfig,
    pub model: ModelConfig,
    pub bu: BuConfig,
    pub ctd: TrainConfig,
    pub refine: RefineConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schema: "stick11".into(),
            data: DataConfig::default(),
            crop: CropConfig::default(),
            condition: ConditionConfig::default(),
            sampling: SamplingConfig::default(),
            model: ModelConfig::default(),
            bu: BuConfig::default(),
            ctd: TrainConfig::default(),
            refine: RefineConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and validates; relative data paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Parse {
                path: path.display().to_string(),
                msg,
            },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train, &mut cfg.data.test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn schema(&self) -> Result<KeypointSchema> {
        KeypointSchema::by_name(&self.schema)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let schema = self.schema()?;
        let cfg = EvalConfig {
            thresholds: self.eval.thresholds.clone(),
            band_boundaries: self.eval.band_boundaries.clone(),
            max_detections: self.eval.max_detections,
            oks: OksParams {
                kappas: schema.kappas.clone(),
                scale_source: self.eval.scale_source,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn oks_params(&self) -> Result<OksParams> {
        Ok(self.eval_config()?.oks)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema()?.validate()?;
        self.sampling.errors.validate()?;
        self.eval_config()?;
        if self.crop.size == 0 || self.crop.size % 8 != 0 {
            return Err(Error::Config("crop size must be a positive multiple of 8".into()));
        }
        if self.crop.margin < 0.0 {
            return Err(Error::Config("crop margin must be non-negative".into()));
        }
        if !(self.condition.sigma > 0.0) {
            return Err(Error::Config("condition sigma must be positive".into()));
        }
        if !(1..=crate::nets::backbone::NUM_STAGES).contains(&self.model.insert_stage) {
            return Err(Error::Config(format!(
                "insert_stage must be in 1..={}",
                crate::nets::backbone::NUM_STAGES
            )));
        }
        if self.refine.iterations == 0 {
            return Err(Error::Config("refine.iterations must be at least 1".into()));
        }
        for t in [&self.bu.train, &self.ctd] {
            if t.batch_size == 0 || t.workers == 0 || !(t.lr > 0.0) {
                return Err(Error::Config("batch_size, workers and lr must be positive".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.sampling.floor) {
            return Err(Error::Config("sampling.floor must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
        assert!(RunConfig::from_toml("[crop]\nsize = 64\nmargn = 3").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.model.arch = Arch::Tokens;
        c.refine.iterations = 3;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn missing_data_file_fails_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[data]\ntrain = \"nope.json\"\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
    }
}
