//! Training configuration and the flat key=value config file format.

use crate::error::{Error, Result};
use crate::matching::LossWeights;
use crate::model::{FusionStrategy, Modality};
use crate::text::AttributeKind;

/// Everything a training run needs beyond the corpus itself.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub data_seed: u64,
    pub model_seed: u64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta_box: f64,
    pub beta_attr: f64,
    pub sigma_init: f64,
    pub queries: usize,
    pub channels: usize,
    pub visual_patch: usize,
    pub modality: Modality,
    /// IoU threshold used by evaluation.
    pub theta: f64,
    pub pwm_on: bool,
    pub maf_on: bool,
    pub moee_on: bool,
    pub fusion_strategy: FusionStrategy,
    pub attributes: Vec<AttributeKind>,
    /// Global gradient-norm clip applied to each batch update; 0 disables it.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_seed: 42,
            model_seed: 1,
            learning_rate: 0.05,
            steps: 2000,
            batch_size: 4,
            beta_box: 2.0,
            beta_attr: 1.0,
            sigma_init: 0.1,
            queries: 16,
            channels: 32,
            visual_patch: 8,
            modality: Modality::Fusion,
            theta: 0.95,
            pwm_on: true,
            maf_on: true,
            moee_on: true,
            fusion_strategy: FusionStrategy::Moee,
            attributes: AttributeKind::ALL.to_vec(),
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfiguration("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfiguration("batch size must be positive".into()));
        }
        if self.queries == 0 || self.channels < 4 {
            return Err(Error::InvalidConfiguration("queries >= 1 and channels >= 4 required".into()));
        }
        if !(0.0..1.0).contains(&self.theta) || self.theta <= 0.0 {
            return Err(Error::InvalidConfiguration("theta must lie in (0, 1)".into()));
        }
        if self.attributes.is_empty() {
            return Err(Error::InvalidConfiguration("attribute subset must be non-empty".into()));
        }
        if self.moee_on != (self.fusion_strategy == FusionStrategy::Moee) {
            return Err(Error::InvalidConfiguration(
                "moee_on must agree with fusion_strategy (set moee_on=false to pick another strategy)"
                    .into(),
            ));
        }
        if self.sigma_init < 0.0 {
            return Err(Error::InvalidConfiguration("sigma_init must be non-negative".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::InvalidConfiguration("clip_norm must be non-negative".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { beta_box: self.beta_box, beta_attr: self.beta_attr }
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_u64 = |v: &str| -> Result<u64> {
            v.parse().map_err(|_| Error::InvalidConfiguration(format!("'{v}' is not an integer")))
        };
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::InvalidConfiguration(format!("'{v}' is not a number")))
        };
        let parse_bool = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                other => Err(Error::InvalidConfiguration(format!("'{other}' is not a boolean"))),
            }
        };
        match key {
            "data_seed" => self.data_seed = parse_u64(value)?,
            "model_seed" => self.model_seed = parse_u64(value)?,
            "learning_rate" => self.learning_rate = parse_f64(value)?,
            "steps" => self.steps = parse_u64(value)? as usize,
            "batch_size" => self.batch_size = parse_u64(value)? as usize,
            "beta_box" => self.beta_box = parse_f64(value)?,
            "beta_attr" => self.beta_attr = parse_f64(value)?,
            "sigma_init" => self.sigma_init = parse_f64(value)?,
            "queries" => self.queries = parse_u64(value)? as usize,
            "channels" => self.channels = parse_u64(value)? as usize,
            "visual_patch" => self.visual_patch = parse_u64(value)? as usize,
            "modality" => self.modality = Modality::parse(value)?,
            "theta" => self.theta = parse_f64(value)?,
            "pwm_on" => self.pwm_on = parse_bool(value)?,
            "maf_on" => self.maf_on = parse_bool(value)?,
            "moee_on" => {
                self.moee_on = parse_bool(value)?;
                // keep the shortcut and the strategy in sync when the
                // strategy key is left at its default
                if !self.moee_on && self.fusion_strategy == FusionStrategy::Moee {
                    self.fusion_strategy = FusionStrategy::Add;
                }
                if self.moee_on {
                    self.fusion_strategy = FusionStrategy::Moee;
                }
            }
            "fusion_strategy" => {
                self.fusion_strategy = FusionStrategy::parse(value)?;
                self.moee_on = self.fusion_strategy == FusionStrategy::Moee;
            }
            "clip_norm" => self.clip_norm = parse_f64(value)?,
            "attributes" => {
                let mut attrs = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    let kind = AttributeKind::ALL
                        .iter()
                        .find(|k| k.name() == part)
                        .ok_or_else(|| {
                            Error::InvalidConfiguration(format!("unknown attribute '{part}'"))
                        })?;
                    attrs.push(*kind);
                }
                attrs.sort_by_key(|a| a.index());
                attrs.dedup();
                self.attributes = attrs;
            }
            other => {
                return Err(Error::InvalidConfiguration(format!("unknown config key '{other}'")))
            }
        }
        Ok(())
    }

    /// Parse the flat `key=value` format. Blank lines and `#` comments are
    /// skipped; unknown keys are errors.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut config = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfiguration(format!("config line {} lacks '=': {line}", lineno + 1))
            })?;
            config.set_key(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }
}
