use std::fs;
use std::path::{Path, PathBuf};

use dsse_tensor::AdadeltaConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ConsistencyBackward, LevelReduction, LossWeights};
use crate::model::{digest_of, hex, ArchitectureConfig, PreprocessConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub rho: f32,
    pub eps: f32,
    pub lr: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let d = AdadeltaConfig::default();
        Self { rho: d.rho, eps: d.eps, lr: d.lr }
    }
}

impl From<OptimizerConfig> for AdadeltaConfig {
    fn from(c: OptimizerConfig) -> Self {
        AdadeltaConfig { rho: c.rho, eps: c.eps, lr: c.lr }
    }
}

/// Training run settings, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Labeled pages (with masks).
    pub synthetic: Option<PathBuf>,
    /// Pages with boxes but no masks.
    pub real: Option<PathBuf>,
    /// Skip-gram table; required when the model takes text.
    pub embeddings: Option<PathBuf>,
    pub model: ArchitectureConfig,
    pub preprocess: PreprocessConfig,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub level_reduction: LevelReduction,
    pub consistency: ConsistencyBackward,
    pub optimizer: OptimizerConfig,
    /// Inverse-frequency class weights from the synthetic masks; uniform
    /// when off.
    pub class_weights: bool,
    pub seed: u64,
    pub max_steps: u64,
    /// Steps between snapshots; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            synthetic: None,
            real: None,
            embeddings: None,
            model: ArchitectureConfig::default(),
            preprocess: PreprocessConfig::default(),
            batch_size: 2,
            loss: LossWeights::default(),
            level_reduction: LevelReduction::default(),
            consistency: ConsistencyBackward::default(),
            optimizer: OptimizerConfig::default(),
            class_weights: true,
            seed: 0,
            max_steps: 1000,
            checkpoint_every: 0,
        }
    }
}

/// Fields that determine the trajectory of a run.
#[derive(Serialize)]
struct Identity<'a> {
    synthetic: &'a Option<PathBuf>,
    real: &'a Option<PathBuf>,
    embeddings: &'a Option<PathBuf>,
    model: &'a ArchitectureConfig,
    preprocess: &'a PreprocessConfig,
    batch_size: usize,
    loss: &'a LossWeights,
    level_reduction: LevelReduction,
    consistency: ConsistencyBackward,
    optimizer: &'a OptimizerConfig,
    class_weights: bool,
    seed: u64,
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        let l = self.loss;
        if [l.cls, l.rec, l.cons].iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if self.synthetic.is_none() && self.real.is_none() {
            return bad("at least one of synthetic and real datasets is required");
        }
        if self.model.embedding_dim > 0 && self.embeddings.is_none() {
            return bad("a model with text input needs an embeddings table");
        }
        if !(self.optimizer.rho > 0.0 && self.optimizer.rho < 1.0 && self.optimizer.eps > 0.0) {
            return bad("optimizer needs 0 < rho < 1 and eps > 0");
        }
        Ok(())
    }

    /// Digest of everything that shapes the run; step budget and snapshot
    /// cadence are left out so a run can be extended.
    pub fn digest(&self) -> String {
        hex(&digest_of(&Identity {
            synthetic: &self.synthetic,
            real: &self.real,
            embeddings: &self.embeddings,
            model: &self.model,
            preprocess: &self.preprocess,
            batch_size: self.batch_size,
            loss: &self.loss,
            level_reduction: self.level_reduction,
            consistency: self.consistency,
            optimizer: &self.optimizer,
            class_weights: self.class_weights,
            seed: self.seed,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_digest_scope() {
        let cfg = TrainConfig { synthetic: Some("data/synth".into()), model: ArchitectureConfig { embedding_dim: 0, ..Default::default() }, ..Default::default() };
        let back: TrainConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let longer = TrainConfig { max_steps: 5000, checkpoint_every: 10, ..cfg.clone() };
        assert_eq!(longer.digest(), cfg.digest());
        let reseeded = TrainConfig { seed: 1, ..cfg.clone() };
        assert_ne!(reseeded.digest(), cfg.digest());
    }

    #[test]
    fn invalid_configs() {
        let base = TrainConfig { synthetic: Some("s".into()), model: ArchitectureConfig { embedding_dim: 0, ..Default::default() }, ..Default::default() };
        base.validate().unwrap();
        assert!(TrainConfig { synthetic: None, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..base.clone() }.validate().is_err());
        let neg = LossWeights { rec: -1.0, ..Default::default() };
        assert!(TrainConfig { loss: neg, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { model: ArchitectureConfig::default(), ..base.clone() }.validate().is_err());
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }
}
