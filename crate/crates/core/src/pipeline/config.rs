use serde::{Deserialize, Serialize};

use crate::aarn::{AarnTrainConfig, ARTIFACT_THRESHOLD};
use crate::error::{Error, Result};
use crate::idsn::IdsnTrainConfig;
use crate::metrics::Region;

/// Every knob of a run. Missing JSON fields take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub pair_count: usize,
    pub identity_fraction: f64,
    /// Augmented classifier samples per class.
    pub augment_per_class: usize,
    pub idsn_max_epochs: usize,
    pub idsn_patience: usize,
    pub idsn_batch_size: usize,
    pub idsn_holdout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    /// Samples per forward pass inside a batch; memory only, not semantics.
    pub chunk_size: usize,
    pub attention_enabled: bool,
    pub classify_stride: usize,
    pub pool_stride: usize,
    pub threshold: f64,
    /// Regions scored after the run; empty means the A-labelled ROI windows.
    pub eval_regions: Vec<Region>,
    pub save_pairs: bool,
    pub save_checkpoint: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let idsn = IdsnTrainConfig::default();
        let aarn = AarnTrainConfig::default();
        PipelineConfig {
            seed: 7,
            pair_count: 100_000,
            identity_fraction: 0.1,
            augment_per_class: 500,
            idsn_max_epochs: idsn.max_epochs,
            idsn_patience: idsn.patience,
            idsn_batch_size: idsn.batch_size,
            idsn_holdout: idsn.holdout_fraction,
            batch_size: aarn.batch_size,
            max_epochs: aarn.max_epochs,
            lr: aarn.lr,
            chunk_size: aarn.chunk_size,
            attention_enabled: true,
            classify_stride: 32,
            pool_stride: 16,
            threshold: ARTIFACT_THRESHOLD,
            eval_regions: Vec::new(),
            save_pairs: false,
            save_checkpoint: true,
        }
    }
}

/// Named starting points for a configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 100,000 pairs, 500 augmented patches per class.
    #[default]
    Full,
    /// 5,000 pairs, 200 augmented patches per class.
    Desk,
}

impl Profile {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Config(format!(
                "unknown profile {name:?} (expected full or desk)"
            ))),
        }
    }

    pub fn config(self) -> PipelineConfig {
        match self {
            Profile::Full => PipelineConfig::default(),
            Profile::Desk => PipelineConfig {
                pair_count: 5_000,
                augment_per_class: 200,
                ..PipelineConfig::default()
            },
        }
    }
}

impl PipelineConfig {
    pub fn desk() -> Self {
        Profile::Desk.config()
    }

    /// Applies the fields present in a JSON object on top of `self`.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self> {
        let serde_json::Value::Object(fields) = overrides else {
            if overrides.is_null() {
                return Ok(self.clone());
            }
            return Err(Error::Config(
                "config overrides must be a JSON object".into(),
            ));
        };
        let mut base = serde_json::to_value(self)?;
        let target = base
            .as_object_mut()
            .expect("config serializes to an object");
        for (k, v) in fields {
            if !target.contains_key(k) {
                return Err(Error::Config(format!("unknown config field {k:?}")));
            }
            target.insert(k.clone(), v.clone());
        }
        let merged: PipelineConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        merged.validate()?;
        Ok(merged)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pair_count", self.pair_count),
            ("augment_per_class", self.augment_per_class),
            ("idsn_max_epochs", self.idsn_max_epochs),
            ("idsn_patience", self.idsn_patience),
            ("idsn_batch_size", self.idsn_batch_size),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("chunk_size", self.chunk_size),
            ("classify_stride", self.classify_stride),
            ("pool_stride", self.pool_stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.identity_fraction) {
            return Err(Error::Config("identity_fraction outside [0, 1]".into()));
        }
        if !(self.idsn_holdout > 0.0 && self.idsn_holdout < 1.0) {
            return Err(Error::Config("idsn_holdout outside (0, 1)".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn idsn(&self) -> IdsnTrainConfig {
        IdsnTrainConfig {
            max_epochs: self.idsn_max_epochs,
            patience: self.idsn_patience,
            batch_size: self.idsn_batch_size,
            holdout_fraction: self.idsn_holdout,
            lr: self.lr,
        }
    }

    pub fn aarn(&self) -> AarnTrainConfig {
        AarnTrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            lr: self.lr,
            threshold: self.threshold,
            attention: self.attention_enabled,
            chunk_size: self.chunk_size,
        }
    }
}
