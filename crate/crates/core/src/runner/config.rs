//! Experiment configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusFormat, FieldMapping};
use crate::digest::json_digest;
use crate::epr::TrainConfig;
use crate::epr::ScoringMode;
use crate::promptkit::{DemoOrder, PromptOptions};
use crate::providers::ProviderConfig;

#[derive(Debug, thiserror::Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    #[default]
    Canonical,
    RefindNative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub format: DataFormat,
    /// Field names for `refind_native`; ignored for canonical input.
    pub mapping: FieldMapping,
    /// Optional schema file replacing the schema observed in training data.
    pub schema_path: Option<PathBuf>,
    /// Evaluate only the first `n` test instances.
    pub max_test: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_path: PathBuf::from("data/train.jsonl"),
            test_path: PathBuf::from("data/test.jsonl"),
            format: DataFormat::Canonical,
            mapping: FieldMapping::default(),
            schema_path: None,
            max_test: None,
        }
    }
}

impl DataConfig {
    pub fn corpus_format(&self) -> CorpusFormat {
        match self.format {
            DataFormat::Canonical => CorpusFormat::Canonical,
            DataFormat::RefindNative => CorpusFormat::RefindNative(self.mapping.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    #[default]
    Knn,
    Epr,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverConfig {
    pub kind: RetrieverKind,
    pub k: usize,
    /// Only retrieve training instances sharing the test's entity-type pair.
    pub restrict_to_type_pair: bool,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            kind: RetrieverKind::Knn,
            k: 5,
            restrict_to_type_pair: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub r_per_class: usize,
    pub template_path: Option<PathBuf>,
    pub order: DemoOrder,
    pub token_budget: Option<usize>,
    pub max_tokens: u32,
    /// Permit runs with neither retrieved nor random demonstrations.
    pub allow_zero_shot: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            r_per_class: 4,
            template_path: None,
            order: DemoOrder::RetrievedFirst,
            token_budget: None,
            max_tokens: 32,
            allow_zero_shot: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EprConfig {
    /// Candidate pool size per anchor (L).
    pub candidates: usize,
    pub positives: usize,
    pub negatives: usize,
    pub scoring_mode: ScoringMode,
    pub train: TrainConfig,
}

impl Default for EprConfig {
    fn default() -> Self {
        Self {
            candidates: 50,
            positives: 3,
            negatives: 10,
            scoring_mode: ScoringMode::Sum,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockCompletion {
    /// Answers with the gold label of the test input (an upper bound).
    GoldLeak,
    /// Answers with the most frequent demonstration label.
    #[default]
    Majority,
    /// Always answers `scripted_answer`.
    Scripted,
}

/// Offline stand-ins used with `--mock-providers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub completion: MockCompletion,
    pub scripted_answer: String,
    pub embedding_dim: usize,
    pub embedding_seed: u64,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            completion: MockCompletion::Majority,
            scripted_answer: "no relation".into(),
            embedding_dim: 256,
            embedding_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Abort once failed records exceed this share of the test set.
    pub max_failure_fraction: f64,
    /// Write every prompt to `<output_dir>/prompts/`.
    pub dump_prompts: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("runs/default"),
            max_failure_fraction: 0.05,
            dump_prompts: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub retriever: RetrieverConfig,
    pub prompt: PromptConfig,
    pub provider: ProviderConfig,
    pub epr: EprConfig,
    pub mock: MockConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let k = match self.retriever.kind {
            RetrieverKind::None => 0,
            _ => self.retriever.k,
        };
        if k + self.prompt.r_per_class == 0 && !self.prompt.allow_zero_shot {
            return Err(ConfigError(
                "prompt would carry no demonstrations (k = 0 and r_per_class = 0); set prompt.allow_zero_shot to run zero-shot".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.run.max_failure_fraction) {
            return Err(ConfigError("run.max_failure_fraction must lie in [0, 1]".into()));
        }
        if self.mock.embedding_dim == 0 {
            return Err(ConfigError("mock.embedding_dim must be >= 1".into()));
        }
        if self.epr.candidates == 0 || self.epr.positives == 0 || self.epr.negatives == 0 {
            return Err(ConfigError("epr.candidates, positives and negatives must be >= 1".into()));
        }
        self.provider.validate().map_err(|e| ConfigError(e.to_string()))
    }

    /// Number of retrieved demonstrations actually requested.
    pub fn effective_k(&self) -> usize {
        match self.retriever.kind {
            RetrieverKind::None => 0,
            _ => self.retriever.k,
        }
    }

    pub fn prompt_options(&self) -> PromptOptions {
        PromptOptions {
            r_per_class: self.prompt.r_per_class,
            seed: self.run.seed,
            order: self.prompt.order,
            token_budget: self.prompt.token_budget,
        }
    }

    /// The configuration with settings that cannot change predictions
    /// (output and cache locations, prompt dumping, concurrency) removed.
    pub fn semantic_view(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("config serializes");
        for (section, key) in [
            ("run", "output_dir"),
            ("run", "dump_prompts"),
            ("provider", "cache_dir"),
            ("provider", "max_parallel"),
        ] {
            if let Some(obj) = value.get_mut(section).and_then(|s| s.as_object_mut()) {
                obj.remove(key);
            }
        }
        value
    }

    pub fn digest(&self) -> String {
        json_digest(&self.semantic_view()).expect("config serializes")
    }
}
