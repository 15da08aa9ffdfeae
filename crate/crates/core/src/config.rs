//! Training and experiment configuration, loadable from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::causes::ExtractionConfig;
use crate::error::TrainError;
use crate::graph::{gen_planted_dataset, DataSplits, PlantedConfig};
use crate::losses::{LossWeights, Reduction};
use crate::model::ModelConfig;
use crate::noise;
use crate::rng;
use crate::theorem::ProfileEntry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Pre-training epochs (`mu`).
    pub pretrain_epochs: usize,
    pub aux_epochs: usize,
    pub lambda: u32,
    /// Cosine threshold for matching nodes to prototypes.
    pub beta: f64,
    /// Epochs between extractions (`t`).
    pub period: usize,
    pub max_extraction_rounds: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// How the guidance loss combines the graphs of a batch.
    pub g_reduction: Reduction,
    pub extraction: ExtractionConfig,
    /// Hidden sizes; input and class counts come from the data.
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 5,
            aux_epochs: 20,
            lambda: 4,
            beta: 0.7,
            period: 4,
            max_extraction_rounds: 5,
            lr: 1e-4,
            batch_size: 32,
            weights: LossWeights::default(),
            g_reduction: Reduction::Sum,
            extraction: ExtractionConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.pretrain_epochs + self.aux_epochs
    }

    /// `floor(mu / 2)` as the extraction period instead of `period`.
    pub fn with_half_mu_period(mut self) -> Self {
        self.period = (self.pretrain_epochs / 2).max(1);
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.pretrain_epochs < 1 {
            return bad("pretrain_epochs must be at least 1");
        }
        if self.period < 1 {
            return bad("period must be at least 1");
        }
        if !(1..=7).contains(&self.lambda) {
            return bad("lambda must lie in 1..=7");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return bad("lr must be positive and batch_size non-zero");
        }
        let e = &self.extraction;
        if !(e.delta0 > 0.0 && e.delta0 < 1.0) || e.delta_step < 0.0 {
            return bad("delta0 must lie in (0, 1) and delta_step be non-negative");
        }
        if !(e.elbow.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NoiseConfig {
    /// Candidates are the ground truth alone.
    None,
    Random { k: usize },
    Annotator { accuracies: Vec<f64> },
    Competitive {
        rho: f64,
        /// Semantic order of the classes; class-index order when absent.
        #[serde(default)]
        order: Option<Vec<usize>>,
    },
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig::Random { k: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 500,
            validation: 100,
            test: 100,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `n_samples` and `seed` are overridden by the split sizes and the
    /// experiment seed.
    pub planted: PlantedConfig,
    pub noise: NoiseConfig,
    pub splits: SplitSizes,
}

const DATA_SEED_TAG: u64 = 0x20;
const NOISE_SEED_TAG: u64 = 0x21;

impl DataConfig {
    /// Generates, adds noise and splits, all seeded from `seed`.
    pub fn build(&self, seed: u64) -> Result<DataSplits, TrainError> {
        let planted = PlantedConfig {
            n_samples: self.splits.total(),
            seed: rng::derive_seed(seed, DATA_SEED_TAG, 0),
            ..self.planted.clone()
        };
        let ds = gen_planted_dataset(&planted)?;
        let noise_seed = rng::derive_seed(seed, NOISE_SEED_TAG, 0);
        let noisy = match &self.noise {
            NoiseConfig::None => Ok(ds),
            NoiseConfig::Random { k } => noise::add_random_pll(&ds, *k, noise_seed),
            NoiseConfig::Annotator { accuracies } => noise::add_annotator_pll(&ds, accuracies, noise_seed),
            NoiseConfig::Competitive { rho, order } => {
                let order = order.clone().unwrap_or_else(|| noise::identity_order(ds.num_classes));
                noise::add_competitive_pll(&ds, &order, *rho, noise_seed)
            }
        }
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(noisy.split_sizes(self.splits.train, self.splits.validation, self.splits.test)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremConfig {
    pub num_classes: usize,
    pub profile: Vec<ProfileEntry>,
    pub lambdas: Vec<u32>,
    pub grid_step: f64,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            profile: vec![ProfileEntry::new(0, &[1]), ProfileEntry::new(0, &[2])],
            lambdas: (1..=7).collect(),
            grid_step: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Graphs in the checked batch, taken from the start of the training
    /// split.
    pub graphs: usize,
    pub probes: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { graphs: 2, probes: 200 }
    }
}

/// Everything a CLI run needs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub theorem: TheoremConfig,
    pub gradcheck: GradcheckConfig,
    /// Seeds for multi-seed commands; the single `train.seed` otherwise.
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `[only]` when given, else `seeds`, else `[train.seed]`.
    pub fn resolve_seeds(&self, only: Option<u64>) -> Vec<u64> {
        match only {
            Some(s) => vec![s],
            None if !self.seeds.is_empty() => self.seeds.clone(),
            None => vec![self.train.seed],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        assert_eq!(TrainConfig::default().total_epochs(), 25);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for cfg in [
            TrainConfig { pretrain_epochs: 0, ..Default::default() },
            TrainConfig { period: 0, ..Default::default() },
            TrainConfig { lambda: 0, ..Default::default() },
            TrainConfig { beta: 1.0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn half_mu_preset() {
        let cfg = TrainConfig { pretrain_epochs: 5, ..Default::default() }.with_half_mu_period();
        assert_eq!(cfg.period, 2);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);

        let partial = ExperimentConfig::from_toml_str(
            "[train]\nlambda = 2\n[data.noise]\nkind = \"competitive\"\nrho = 0.7\n",
        )
        .unwrap();
        assert_eq!(partial.train.lambda, 2);
        assert_eq!(partial.train.lr, 1e-4);
        assert_eq!(partial.data.noise, NoiseConfig::Competitive { rho: 0.7, order: None });
        assert!(ExperimentConfig::from_toml_str("[train]\nbogus = 1\n").is_err());
    }

    #[test]
    fn seed_resolution() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.resolve_seeds(None), vec![0]);
        cfg.seeds = vec![3, 4];
        assert_eq!(cfg.resolve_seeds(None), vec![3, 4]);
        assert_eq!(cfg.resolve_seeds(Some(9)), vec![9]);
    }

    #[test]
    fn build_splits() {
        let cfg = DataConfig {
            splits: SplitSizes { train: 10, validation: 3, test: 2 },
            ..Default::default()
        };
        let s = cfg.build(4).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (10, 3, 2));
        assert_eq!(s.train.num_candidates, Some(2));
        assert_eq!(cfg.build(4).unwrap(), s);
    }
}
