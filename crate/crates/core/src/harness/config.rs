use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::GenerationConfig;
use crate::dissonance::{
    ClassifierKind, FeatureSource, Normalization, OutputParams, Scenario, SearchConfig,
};
use crate::error::{Error, Result};
use crate::model::{LossMask, ModelConfig, OptimizerConfig};
use crate::plasticity::{LoraConfig, Strategy, TrainHyper, UntrackedPolicy};
use crate::tracking::ReductionSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusParams {
    pub n_base: usize,
    pub n_new: usize,
    /// Facts for the control third round, taken after the new facts.
    pub n_control: usize,
    pub seed: u64,
    pub generation: GenerationConfig,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            n_base: 500,
            n_new: 250,
            n_control: 250,
            seed: 0,
            generation: GenerationConfig {
                n_subjects: 700,
                disjoint_new_subjects: true,
                ..GenerationConfig::default()
            },
        }
    }
}

/// Which facts the counterfacts of the dissonant stage contradict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DissonantTarget {
    /// Consolidated facts from the baseline stage, one fold at a time.
    Baseline,
    /// The facts learned in the non-dissonant stage.
    Recent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepParams {
    pub strategies: Vec<Strategy>,
    /// Selection sizes as fractions of all tracked neurons.
    pub fractions: Vec<f64>,
    pub include_full: bool,
    pub include_lora: bool,
    pub lora: LoraConfig,
    pub untracked: UntrackedPolicy,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            strategies: Strategy::TARGETED.to_vec(),
            fractions: vec![0.05, 0.10, 0.20, 0.50],
            include_full: true,
            include_lora: true,
            lora: LoraConfig::default(),
            untracked: UntrackedPolicy::Frozen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LotteryParams {
    /// Size of the donor fact set, disjoint from the target facts.
    pub n_donor: usize,
    pub n_facts: usize,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub donor_train: TrainHyper,
    pub train: TrainHyper,
    pub untracked: UntrackedPolicy,
}

impl Default for LotteryParams {
    fn default() -> Self {
        Self {
            n_donor: 300,
            n_facts: 200,
            fractions: vec![0.05, 0.10],
            seeds: (0..5).collect(),
            donor_train: TrainHyper {
                optimizer: OptimizerConfig::adam(3e-3),
                max_epochs: 150,
                loss_mask: LossMask::ObjectOnly,
                ..TrainHyper::default()
            },
            train: TrainHyper {
                optimizer: OptimizerConfig::adam(3e-3),
                fixed_epochs: Some(30),
                loss_mask: LossMask::ObjectOnly,
                ..TrainHyper::default()
            },
            untracked: UntrackedPolicy::Frozen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassificationParams {
    pub scenarios: Vec<Scenario>,
    pub n_per_class: usize,
    pub sources: Vec<FeatureSource>,
    pub normalizations: Vec<Normalization>,
    pub classifiers: Vec<ClassifierKind>,
    pub search: SearchConfig,
    /// Also cross-validate output-probability features.
    pub output_features: bool,
    pub output: OutputParams,
    pub shuffled_baseline: bool,
    /// Training for the model that stands in for pretraining.
    pub pretrain: TrainHyper,
}

impl Default for ClassificationParams {
    fn default() -> Self {
        Self {
            scenarios: vec![Scenario::Finetuned, Scenario::PretrainedLike],
            n_per_class: 100,
            sources: vec![
                FeatureSource::activations(),
                FeatureSource::gradients(),
                FeatureSource::both(),
            ],
            normalizations: vec![
                Normalization::Raw,
                Normalization::Layer,
                Normalization::Historical,
            ],
            classifiers: vec![ClassifierKind::RandomForest, ClassifierKind::LinearSvm],
            search: SearchConfig::default(),
            output_features: true,
            output: OutputParams::default(),
            shuffled_baseline: true,
            pretrain: RunConfig::default_baseline_hyper(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusParams,
    /// `vocab_size` is taken from the corpus.
    pub model: ModelConfig,
    pub tracking: ReductionSettings,
    pub baseline: TrainHyper,
    pub update: TrainHyper,
    pub folds: usize,
    /// Facts per update round; defaults to one fold of the baseline facts.
    pub update_size: Option<usize>,
    pub dissonant_target: DissonantTarget,
    pub control_round: bool,
    pub sweep: SweepParams,
    pub contradiction_sizes: Vec<usize>,
    pub lottery: LotteryParams,
    pub classification: ClassificationParams,
    /// Stubborn-set sizes as fractions of all tracked neurons.
    pub histogram_fractions: Vec<f64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusParams::default(),
            model: ModelConfig::new(4, 64, 4, 256, 0, 16, 0),
            tracking: ReductionSettings::default(),
            baseline: Self::default_baseline_hyper(),
            update: TrainHyper {
                optimizer: OptimizerConfig::adam(3e-4),
                max_epochs: 150,
                loss_mask: LossMask::ObjectOnly,
                ..TrainHyper::default()
            },
            folds: 5,
            update_size: None,
            dissonant_target: DissonantTarget::Baseline,
            control_round: true,
            sweep: SweepParams::default(),
            contradiction_sizes: vec![5, 25, 125],
            lottery: LotteryParams::default(),
            classification: ClassificationParams::default(),
            histogram_fractions: vec![0.01, 0.05],
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn default_baseline_hyper() -> TrainHyper {
        TrainHyper {
            optimizer: OptimizerConfig::adam(3e-3),
            max_epochs: 200,
            min_epochs: 100,
            loss_mask: LossMask::ObjectOnly,
            ..TrainHyper::default()
        }
    }

    /// Reads TOML or JSON, chosen by extension (JSON for `.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.folds < 2 {
            return fail(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.corpus.n_base < self.folds {
            return fail("fewer baseline facts than folds".into());
        }
        let m = self.update_size();
        if m == 0 || m > self.corpus.n_new || (self.control_round && m > self.corpus.n_control) {
            return fail(format!(
                "update size {m} must be positive and fit in the new ({}) and control ({}) splits",
                self.corpus.n_new, self.corpus.n_control
            ));
        }
        for f in self
            .sweep
            .fractions
            .iter()
            .chain(&self.lottery.fractions)
            .chain(&self.histogram_fractions)
        {
            if !(*f > 0.0 && *f <= 1.0) {
                return fail(format!("fraction {f} is outside (0, 1]"));
            }
        }
        if self
            .sweep
            .strategies
            .iter()
            .any(|s| !Strategy::TARGETED.contains(s))
        {
            return fail(
                "sweep strategies must be targeted strategies; use include_full for Full".into(),
            );
        }
        if self.contradiction_sizes.contains(&0) {
            return fail("contradiction sizes must be positive".into());
        }
        if self.lottery.seeds.is_empty() {
            return fail("the lottery stage needs at least one seed".into());
        }
        Ok(())
    }

    pub fn update_size(&self) -> usize {
        self.update_size
            .unwrap_or(self.corpus.n_base / self.folds.max(1))
    }

    /// Model config sized for a vocabulary.
    pub fn model_for(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            seed: self.model.seed,
            ..self.model.clone()
        }
    }

    pub fn hash(&self) -> String {
        crate::fingerprint_json(self)
    }
}

/// Converts a fraction of `total` into a count of at least one.
pub fn count_of(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64).round() as usize).clamp(1, total)
}
