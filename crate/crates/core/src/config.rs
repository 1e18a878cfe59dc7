//! Declarative run configuration (TOML) and config hashing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ModelConfig, Vocabulary};
use crate::data::{CurationConfig, Trajectory};
use crate::env::{collect, Baselines, CollectPolicy, MazeConfig};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::train::TrainConfig;

/// SHA-256 (hex) of the JSON encoding of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config values serialize");
    hex::encode(Sha256::digest(json))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Expert,
    #[default]
    Noisy,
    Graded,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectionConfig {
    pub policy: PolicyKind,
    pub sigma: f32,
    /// Lowest per-episode expert gain of the `graded` policy.
    pub min_gain: f32,
    pub episodes: usize,
    /// Extra random-policy episodes appended after the main collection.
    pub random_episodes: usize,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::Noisy,
            sigma: 0.3,
            min_gain: 0.2,
            episodes: 200,
            random_episodes: 0,
        }
    }
}

impl CollectionConfig {
    pub fn policy(&self) -> CollectPolicy {
        match self.policy {
            PolicyKind::Expert => CollectPolicy::Expert,
            PolicyKind::Noisy => CollectPolicy::Noisy { sigma: self.sigma },
            PolicyKind::Graded => CollectPolicy::Graded {
                sigma: self.sigma,
                min_gain: self.min_gain,
            },
            PolicyKind::Random => CollectPolicy::Random,
        }
    }

    /// Main policy episodes followed by the random-policy episodes.
    pub fn collect(&self, maze: &MazeConfig, seed: u64, exec: Exec) -> Result<Vec<Trajectory>> {
        let mut data = collect(maze, self.policy(), self.episodes, seed, exec)?;
        if self.random_episodes > 0 {
            let extra = collect(maze, CollectPolicy::Random, self.random_episodes, seed ^ RANDOM_SEED_SALT, exec)?;
            data.extend(extra);
        }
        Ok(data)
    }
}

const RANDOM_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub episodes: usize,
    pub initial_rtg: f64,
    /// Commanded returns for `sweep-rtg`.
    pub rtgs: Vec<f64>,
    /// Episodes per policy when estimating the normalisation baselines.
    pub baseline_episodes: usize,
    /// Stored baselines; estimated by Monte Carlo when absent.
    pub r_random: Option<f64>,
    pub r_expert: Option<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            initial_rtg: 250.0,
            rtgs: (0..11).map(|i| 100.0 + 20.0 * i as f64).collect(),
            baseline_episodes: 100,
            r_random: None,
            r_expert: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub trajectories: usize,
    /// Timesteps per analysed trajectory segment.
    pub window: usize,
    pub pca: bool,
    pub probe: String,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            trajectories: 100,
            window: 8,
            pca: true,
            probe: crate::backbone::vocab::NULL_PROBE.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub sequences: usize,
    pub sequence_len: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 300,
            sequences: 128,
            sequence_len: 32,
            batch_size: 8,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// `[d_model, n_layers, n_heads]` per model size.
    pub models: Vec<[usize; 3]>,
    pub data_sizes: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            models: vec![[32, 2, 2], [64, 2, 2], [128, 4, 4]],
            data_sizes: vec![2000, 8000, 32000],
        }
    }
}

/// Every section of a run; every field has a default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub maze: MazeConfig,
    pub collection: CollectionConfig,
    pub curation: CurationConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub evaluation: EvaluationConfig,
    pub analysis: AnalysisConfig,
    pub pretrain: PretrainSection,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            Error::config(toml_field(&msg).unwrap_or_else(|| "config".into()), msg)
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hash of the normalised config; stamped into every artifact.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Prompt token ids of the configured task description.
    pub fn prompt_ids(&self, vocab: &Vocabulary) -> Vec<u32> {
        vocab.tokenize(self.training.prompt.text())
    }

    /// Section checks plus cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        self.maze.validate()?;
        self.curation.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        if self.collection.episodes == 0 {
            return Err(Error::config("collection.episodes", "must be at least 1"));
        }
        if !(self.collection.sigma >= 0.0 && self.collection.sigma.is_finite()) {
            return Err(Error::config("collection.sigma", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.collection.min_gain) {
            return Err(Error::config("collection.min_gain", "must lie in [0, 1]"));
        }
        if self.curation.window > self.maze.max_steps {
            return Err(Error::config(
                "curation.window",
                format!(
                    "window {} exceeds episode length maze.max_steps = {}",
                    self.curation.window, self.maze.max_steps
                ),
            ));
        }
        let vocab = Vocabulary::standard();
        if self.model.vocab_size < vocab.len() {
            return Err(Error::config(
                "model.vocab_size",
                format!("must be at least {}", vocab.len()),
            ));
        }
        let needed = self.prompt_ids(&vocab).len() + 3 * self.curation.window;
        if self.model.max_positions < needed {
            return Err(Error::config(
                "model.max_positions",
                format!("{} is below prompt + 3 * window = {needed}", self.model.max_positions),
            ));
        }
        if self.evaluation.episodes == 0 {
            return Err(Error::config("evaluation.episodes", "must be at least 1"));
        }
        if self.evaluation.baseline_episodes == 0 {
            return Err(Error::config("evaluation.baseline_episodes", "must be at least 1"));
        }
        if let (Some(r), Some(e)) = (self.evaluation.r_random, self.evaluation.r_expert) {
            if !(e > r) {
                return Err(Error::config("evaluation.r_expert", "must exceed evaluation.r_random"));
            }
        }
        if self.analysis.window == 0 {
            return Err(Error::config("analysis.window", "must be at least 1"));
        }
        if self.analysis.window > self.maze.max_steps {
            return Err(Error::config("analysis.window", "exceeds maze.max_steps"));
        }
        let text_needed = self.prompt_ids(&vocab).len()
            + crate::analysis::text_token_bound(self.analysis.window, self.maze.max_steps);
        if self.model.max_positions < text_needed {
            return Err(Error::config(
                "analysis.window",
                format!(
                    "text-serialized segments need up to {text_needed} positions, model.max_positions is {}",
                    self.model.max_positions
                ),
            ));
        }
        if self.analysis.trajectories < 2 {
            return Err(Error::config("analysis.trajectories", "must be at least 2"));
        }
        for (i, m) in self.sweep.models.iter().enumerate() {
            if m.iter().any(|&v| v == 0) || m[0] % m[2] != 0 {
                return Err(Error::config(
                    format!("sweep.models[{i}]"),
                    "needs positive [d_model, n_layers, n_heads] with n_heads dividing d_model",
                ));
            }
        }
        Ok(())
    }

    /// Baselines from the config when both are stored.
    pub fn stored_baselines(&self) -> Option<Baselines> {
        match (self.evaluation.r_random, self.evaluation.r_expert) {
            (Some(r), Some(e)) => Some(Baselines {
                r_random: r,
                r_random_std: 0.0,
                r_expert: e,
                r_expert_std: 0.0,
            }),
            _ => None,
        }
    }
}

/// Best-effort field name from a serde error message.
fn toml_field(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let end = start + msg[start..].find('`')?;
    Some(msg[start..end].to_string())
}

/// Reads, parses and validates a config file.
pub fn validate_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = RunConfig::from_toml(&text)?;
    cfg.validate()?;
    Ok(cfg)
}
