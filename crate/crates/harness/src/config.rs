//! Run configuration: JSON on disk, strict keys, defaults from a profile.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spgnn_model::detect_head::HeadConfig;
use spgnn_model::detector::{FusionConfig, SuperpixelConfig};
use spgnn_model::msgcn::MsgcnConfig;
use spgnn_model::sprpn::{FusionMode, RpnConfig};
use spgnn_model::DetectorConfig;

use crate::error::{io_err, HarnessError, Result};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "SPGNN_SEED";

/// Learning rate per image; the default rate is this times the batch size.
pub const LR_PER_IMAGE: f64 = 0.02 / 16.0;

/// Starting point that a config file is merged over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-width backbone with the standard depths.
    #[default]
    Full,
    /// Reduced depths and widths for single-core runs.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// `None` derives the rate from the batch size.
    pub lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr: None, momentum: 0.9, weight_decay: 1e-4, clip_grad_norm: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Linear warmup from a tenth of the rate over this many steps.
    pub warmup_steps: usize,
    /// Epochs (0-based) at whose start the rate drops tenfold.
    pub lr_decay_epochs: Vec<usize>,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Shuffle image order every epoch.
    pub shuffle: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 12,
            batch_size: 2,
            warmup_steps: 100,
            lr_decay_epochs: vec![8, 11],
            max_steps: None,
            shuffle: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory holding `annotations.json` and `images/`.
    pub data: PathBuf,
    /// Run directory for the loss log and checkpoints.
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data: PathBuf::from("data"), output: PathBuf::from("runs/spgnn") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: MsgcnConfig,
    pub superpixel: SuperpixelConfig,
    pub fusion: FusionMode,
    pub rpn: RpnConfig,
    pub head: HeadConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_detector(&DetectorConfig::default())
    }
}

impl RunConfig {
    pub fn from_detector(d: &DetectorConfig) -> Self {
        RunConfig {
            model: d.model.clone(),
            superpixel: d.superpixel.clone(),
            fusion: d.fusion.mode,
            rpn: d.rpn.clone(),
            head: d.head.clone(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            seed: 0,
            paths: PathsConfig::default(),
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Full => RunConfig::default(),
            Profile::Desk => RunConfig::from_detector(&DetectorConfig::desk()),
        }
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            model: self.model.clone(),
            superpixel: self.superpixel.clone(),
            fusion: FusionConfig { mode: self.fusion },
            rpn: self.rpn.clone(),
            head: self.head.clone(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.optimizer.lr.unwrap_or(LR_PER_IMAGE * self.schedule.batch_size as f64)
    }

    pub fn validate(&self) -> Result<()> {
        self.detector().validate()?;
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        let o = &self.optimizer;
        if !(self.learning_rate() > 0.0 && self.learning_rate().is_finite()) {
            return bad("optimizer.lr must be positive");
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return bad("optimizer.momentum must be in [0, 1)");
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return bad("optimizer.weight_decay must be non-negative");
        }
        if o.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("optimizer.clip_grad_norm must be positive");
        }
        let s = &self.schedule;
        if s.epochs == 0 || s.batch_size == 0 {
            return bad("schedule.epochs and schedule.batch_size must be positive");
        }
        if s.max_steps == Some(0) {
            return bad("schedule.max_steps must be positive");
        }
        Ok(())
    }

    /// Replace the seed from the environment when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse config JSON over the defaults of `profile`. Unknown keys and type
/// errors are reported with their key path. The result is validated.
pub fn config_from_str(text: &str, profile: Profile) -> Result<RunConfig> {
    let over: serde_json::Value =
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("invalid JSON: {e}")))?;
    if !over.is_object() {
        return Err(HarnessError::Config("top level must be an object".into()));
    }
    let mut value = serde_json::to_value(RunConfig::profile(profile))?;
    merge(&mut value, over);
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        HarnessError::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a config file, apply the seed override and validate.
pub fn config_load(path: &Path, profile: Profile) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut cfg = config_from_str(&text, profile)?;
    cfg.apply_env()?;
    Ok(cfg)
}
