//! Experiment configuration. Every field has a default, so a JSON file only
//! needs the values it overrides.

use std::path::Path;

use hrt_core::capsule::VoteMode;
use hrt_core::dataset::ZslDataset;
use hrt_core::loss::{GammaProfile, LossConfig};
use hrt_core::model::{HrtModel, ModelConfig};
use hrt_core::optim::OptimizerConfig;
use hrt_core::semantics::CompactionConfig;
use hrt_core::synthetic::SyntheticSpec;
use hrt_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HrtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GammaPreset {
    /// Seen −0.5, unseen +1.
    #[default]
    CubSun,
    /// Seen −0.8, unseen +1.
    Awa2,
    Zero,
    Custom { seen: f64, unseen: f64 },
}

impl GammaPreset {
    pub fn profile(self) -> GammaProfile {
        match self {
            GammaPreset::CubSun => GammaProfile::CUB_SUN,
            GammaPreset::Awa2 => GammaProfile::AWA2,
            GammaPreset::Zero => GammaProfile::ZERO,
            GammaPreset::Custom { seen, unseen } => GammaProfile { seen, unseen },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: GammaPreset,
    /// Normalise the plain cross-entropy over seen classes only.
    pub ce_over_seen: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            lambda1: LossConfig::LAMBDA1,
            lambda2: LossConfig::LAMBDA2,
            gamma: GammaPreset::CubSun,
            ce_over_seen: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticSpec,
    pub data_seed: u64,
    pub model: ModelConfig,
    pub compaction: CompactionConfig,
    pub init_seed: u64,
    pub loss: LossSettings,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synthetic: SyntheticSpec::default(),
            data_seed: 0,
            model: ModelConfig::default(),
            compaction: CompactionConfig::default(),
            init_seed: 0,
            loss: LossSettings::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The small configuration used for gradient checking: R=4, D=16, d=8
    /// vector-transform capsules, A=6, 5 seen and 2 unseen classes, τ=8,
    /// two iterations of each routing.
    pub fn tiny() -> Self {
        let mut c = ExperimentConfig::default();
        c.synthetic = SyntheticSpec {
            seen_classes: 5,
            unseen_classes: 2,
            num_attributes: 6,
            num_patches: 4,
            feature_dim: 16,
            semantic_dim: 8,
            samples_per_class: 2,
            attributes_per_class: 2,
            ..SyntheticSpec::default()
        };
        c.model.feature_dim = 16;
        c.model.capsule_dim = 8;
        c.model.num_primary = 4;
        c.model.encoder.em.iterations = 2;
        c.model.encoder.em.vote_mode = VoteMode::VectorTransform;
        c.model.encoder.td_iterations = 2;
        c.compaction.dim = 8;
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HrtError::io(path, e))?;
        let c: ExperimentConfig = serde_json::from_str(&text).map_err(|e| HrtError::Json { path: path.into(), source: e })?;
        c.validate().map_err(|e| HrtError::format(path, e.to_string()))?;
        Ok(c)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> hrt_core::Result<()> {
        self.model.encoder.em.validate()?;
        self.optimizer.validate()?;
        if self.compaction.dim != self.model.capsule_dim {
            return Err(hrt_core::Error::Config(format!(
                "compaction.dim ({}) must equal model.capsule_dim ({})",
                self.compaction.dim, self.model.capsule_dim
            )));
        }
        if !(self.loss.lambda1 >= 0.0 && self.loss.lambda2 >= 0.0) {
            return Err(hrt_core::Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }

    /// Pretty JSON of the fully resolved configuration.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    /// SHA-256 of [`to_json`](Self::to_json), hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join("config.json");
        std::fs::write(&p, self.to_json()).map_err(|e| HrtError::io(p, e))
    }

    /// Model dimensions taken from the dataset; routing settings from the
    /// configuration.
    pub fn model_config_for(&self, dataset: &ZslDataset) -> hrt_core::Result<ModelConfig> {
        let (_, d_feat) = dataset
            .feature_shape()
            .ok_or_else(|| hrt_core::Error::Config("dataset has no samples".into()))?;
        Ok(ModelConfig { feature_dim: d_feat, ..self.model })
    }

    pub fn build_model(&self, dataset: &ZslDataset) -> hrt_core::Result<HrtModel> {
        self.validate()?;
        let semantics = dataset.semantic_space(&self.compaction, None)?;
        HrtModel::init(self.model_config_for(dataset)?, semantics, self.init_seed)
    }

    pub fn loss_config(&self, dataset: &ZslDataset) -> hrt_core::Result<LossConfig> {
        let mut lc = LossConfig::new(
            dataset.num_classes(),
            dataset.seen_classes(),
            dataset.unseen_classes(),
            self.loss.gamma.profile(),
        )?;
        lc.lambda1 = self.loss.lambda1;
        lc.lambda2 = self.loss.lambda2;
        if !self.loss.ce_over_seen {
            lc.ce_classes = None;
        }
        Ok(lc)
    }
}
