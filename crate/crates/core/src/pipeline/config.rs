use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clipping::{ClipMode, ClipSpec};
use crate::error::{invalid_arg, Error, Result};
use crate::evaluation::ClassifierConfig;
use crate::mechanisms::{Epsilon, PrivacyParams};
use crate::model::train::TrainConfig;
use crate::model::{Architecture, ModelConfig};
use crate::pruning::PruneSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Recurrent autoencoder, whole-latent norm clipping.
    #[serde(rename = "baseline")]
    BaselineNormClip,
    #[serde(rename = "clv")]
    Clv,
    #[serde(rename = "pr")]
    Pr,
    #[serde(rename = "pr-plus")]
    PrPlus,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::BaselineNormClip, Variant::Clv, Variant::Pr, Variant::PrPlus];

    pub fn architecture(self) -> Architecture {
        match self {
            Variant::BaselineNormClip => Architecture::RecurrentBaseline,
            _ => Architecture::TinyTransformer,
        }
    }

    pub fn is_pruned(self) -> bool {
        matches!(self, Variant::Pr | Variant::PrPlus)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::BaselineNormClip => "baseline",
            Variant::Clv => "clv",
            Variant::Pr => "pr",
            Variant::PrPlus => "pr-plus",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::BaselineNormClip),
            "clv" => Ok(Variant::Clv),
            "pr" => Ok(Variant::Pr),
            "pr-plus" | "pr+" => Ok(Variant::PrPlus),
            other => invalid_arg(format!("unknown variant `{other}` (baseline, clv, pr, pr-plus)")),
        }
    }
}

/// How documents sharing an `individual_id` are accounted for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Every document is its own unit and is charged ε.
    PerDocument,
    /// Each document is rewritten separately; all of an individual's records
    /// are charged `k·ε`.
    ComposeBudget,
    /// An individual's documents are joined and rewritten once for ε.
    Concatenate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Extra public text appended to the generated public corpus: JSONL, or
    /// plain text with one document per line.
    pub public_path: Option<PathBuf>,
    /// Downstream dataset (JSONL). Generated when absent.
    pub dataset_path: Option<PathBuf>,
    pub public_docs: usize,
    pub public_seed: u64,
    pub dataset_docs: usize,
    pub dataset_seed: u64,
    /// Train / validation / test fractions of the downstream dataset.
    pub split: (f64, f64, f64),
    pub max_vocab: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            public_path: None,
            dataset_path: None,
            public_docs: 10_000,
            public_seed: 1,
            dataset_docs: 600,
            dataset_seed: 2,
            split: (0.6, 0.2, 0.2),
            max_vocab: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    /// Apply the experiment's clipping to the encoder output while pretraining.
    pub clip_in_loop: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            train: TrainConfig::default(),
            max_epochs: 12,
            patience: 2,
            val_fraction: 0.05,
            clip_in_loop: true,
        }
    }
}

/// Noisy continued training: `epochs = min(max_epochs, ⌈base_epochs · ε_ref / ε⌉)`,
/// one epoch being `steps_per_epoch` batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrPlusConfig {
    pub base_epochs: f64,
    pub epsilon_ref: f64,
    pub max_epochs: usize,
    pub steps_per_epoch: usize,
    pub train: TrainConfig,
}

impl Default for PrPlusConfig {
    fn default() -> Self {
        PrPlusConfig {
            base_epochs: 1.0,
            epsilon_ref: 1000.0,
            max_epochs: 100,
            steps_per_epoch: 50,
            train: TrainConfig::default(),
        }
    }
}

impl PrPlusConfig {
    pub fn epochs_for(&self, epsilon: Epsilon) -> Result<usize> {
        let Some(eps) = epsilon.finite() else {
            return invalid_arg("noisy training needs a finite epsilon");
        };
        let raw = (self.base_epochs * self.epsilon_ref / eps).ceil();
        Ok((raw.max(1.0) as usize).min(self.max_epochs.max(1)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// `vocab_size` is replaced by the size of the vocabulary built from the
    /// public corpus; `architecture` follows the variant.
    pub model: ModelConfig,
    pub clip: ClipSpec,
    pub privacy: PrivacyParams,
    #[serde(default)]
    pub schedule: Option<PruneSchedule>,
    /// Fixed number of noisy-training epochs; overrides `prplus`'s schedule.
    #[serde(default)]
    pub prplus_epochs: Option<usize>,
    #[serde(default)]
    pub prplus: PrPlusConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    pub seed: u64,
    #[serde(default = "default_beam")]
    pub beam: usize,
    #[serde(default = "default_grouping")]
    pub grouping: Grouping,
    #[serde(default)]
    pub audit: bool,
    pub output_dir: PathBuf,
    /// Stage checkpoints; defaults to `<output_dir>/checkpoints`.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

fn default_beam() -> usize {
    10
}

fn default_grouping() -> Grouping {
    Grouping::PerDocument
}

impl ExperimentConfig {
    /// Desk-scale defaults for `variant`.
    pub fn toy(variant: Variant, output_dir: impl Into<PathBuf>) -> Self {
        let model = ModelConfig {
            hidden: 128,
            embed_dim: 64,
            d_tok: 64,
            ..ModelConfig::transformer(0)
        }
        .with_architecture(variant.architecture());
        let clip = match variant {
            Variant::BaselineNormClip => ClipSpec::by_norm(5.0),
            _ => ClipSpec::by_value(0.1),
        }
        .expect("constant clip spec is valid");
        let schedule = variant.is_pruned().then(|| PruneSchedule {
            total_iterations: 5,
            use_iteration: 5,
            quantile: 0.25,
            retrain_steps: 1000,
            retrain_clip_c: 0.1,
        });
        let epsilon = match variant {
            Variant::PrPlus => Epsilon::Finite(500.0),
            _ => Epsilon::Infinite,
        };
        ExperimentConfig {
            variant,
            model,
            clip,
            privacy: PrivacyParams::gaussian(epsilon, 1e-5).expect("constant privacy params are valid"),
            schedule,
            prplus_epochs: None,
            prplus: PrPlusConfig::default(),
            pretrain: PretrainConfig {
                max_epochs: match variant.architecture() {
                    Architecture::TinyTransformer => 8,
                    Architecture::RecurrentBaseline => 12,
                },
                ..PretrainConfig::default()
            },
            data: DataConfig::default(),
            classifier: ClassifierConfig::default(),
            seed: 0,
            beam: default_beam(),
            grouping: Grouping::PerDocument,
            audit: false,
            output_dir: output_dir.into(),
            checkpoint_dir: None,
        }
    }

    pub fn checkpoint_root(&self) -> PathBuf {
        self.checkpoint_dir.clone().unwrap_or_else(|| self.output_dir.join("checkpoints"))
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            ..self.model.clone()
        }
        .with_architecture(self.variant.architecture())
    }

    pub fn prplus_epoch_count(&self) -> Result<usize> {
        match self.prplus_epochs {
            Some(0) => invalid_arg("prplus_epochs must be positive"),
            Some(e) => Ok(e),
            None => self.prplus.epochs_for(self.privacy.epsilon),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        self.privacy.validate()?;
        let mut probe = self.model_config(usize::MAX);
        probe.vocab_size = 64;
        probe.validate()?;
        if self.beam == 0 {
            return invalid_arg("beam width must be at least 1");
        }
        if self.variant.is_pruned() {
            match &self.schedule {
                Some(s) => s.validate()?,
                None => return invalid_arg(format!("variant {} needs a prune schedule", self.variant)),
            }
        }
        if self.variant == Variant::PrPlus {
            if self.privacy.epsilon.is_infinite() {
                return invalid_arg("pr-plus trains against finite-ε noise; set a finite epsilon");
            }
            self.prplus_epoch_count()?;
        }
        if self.variant == Variant::BaselineNormClip && self.clip.mode != ClipMode::ByNorm {
            return invalid_arg("the baseline variant clips by norm");
        }
        if self.variant != Variant::BaselineNormClip && self.clip.mode != ClipMode::ByValue {
            return invalid_arg(format!("variant {} clips by value", self.variant));
        }
        if let (Some(p), Some(d)) = (&self.data.public_path, &self.data.dataset_path) {
            if p == d {
                return invalid_arg("the public corpus and the downstream dataset are the same file");
            }
        }
        if self.pretrain.max_epochs == 0 {
            return invalid_arg("pretraining needs at least one epoch");
        }
        if !(self.pretrain.val_fraction > 0.0 && self.pretrain.val_fraction < 1.0) {
            return invalid_arg("pretrain.val_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_configs_validate_and_round_trip() {
        for v in Variant::ALL {
            let c = ExperimentConfig::toy(v, "out");
            c.validate().unwrap();
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), c);
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn invariants_are_enforced() {
        let mut c = ExperimentConfig::toy(Variant::Pr, "out");
        c.schedule = None;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::toy(Variant::PrPlus, "out");
        c.privacy.epsilon = Epsilon::Infinite;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::toy(Variant::Clv, "out");
        c.clip = ClipSpec::by_norm(1.0).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn lower_epsilon_means_more_noisy_epochs() {
        let p = PrPlusConfig {
            base_epochs: 10.0,
            epsilon_ref: 1000.0,
            max_epochs: 100,
            ..PrPlusConfig::default()
        };
        let at = |e: f64| p.epochs_for(Epsilon::Finite(e)).unwrap();
        assert_eq!(at(1000.0), 10);
        assert_eq!(at(100.0), 100);
        let eps = [5000.0, 2000.0, 1000.0, 700.0, 500.0, 250.0, 100.0, 10.0];
        assert!(eps.windows(2).all(|w| at(w[0]) <= at(w[1])));
        assert!(p.epochs_for(Epsilon::Infinite).is_err());
    }
}
