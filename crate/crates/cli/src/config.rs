//! Flat JSON experiment configuration. Every field has a default; a config
//! file only lists the overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use riff_core::classifier::TuningMode;
use riff_core::decoding::{DecodeConfig, DecodeScheme};
use riff_core::estimators::EstimatorKind;
use riff_core::experiment::SetupConfig;
use riff_core::trainer::{default_beta, ClassifierTrainConfig, Regime, RunConfig};

/// Bad or missing configuration. Reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Task, pretraining and classifier shape, plus the run seed.
    #[serde(flatten)]
    pub setup: SetupConfig,

    pub estimator: EstimatorKind,
    pub regime: Regime,
    pub decoder: DecodeScheme,
    pub normalize: bool,
    pub m: usize,
    /// KL weight; `null` picks the estimator's default.
    pub beta: Option<f64>,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_interval: usize,
    pub weight_decay: f64,
    pub top_p: f64,
    pub temperature: f64,
    pub diversity_penalty: f64,
    pub repetition_penalty: f64,
    pub eval_m: usize,

    pub mode: TuningMode,
    pub classifier_m: usize,
    pub classifier_lr: f64,
    pub classifier_steps: usize,
    pub gs_k: usize,
    pub gs_batch: usize,
    /// Initial instruction tokens for the task template.
    pub instruction: Vec<u32>,

    /// Load these instead of the freshly built setup models.
    pub policy_checkpoint: Option<PathBuf>,
    pub classifier_checkpoint: Option<PathBuf>,
    /// Parallel grid runs; 0 uses every core.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let run = RunConfig::riff(0);
        let cls = ClassifierTrainConfig::new(TuningMode::AllTune, 8, 0);
        Self {
            name: "riff".into(),
            setup: SetupConfig::default(),
            estimator: run.estimator,
            regime: run.regime,
            decoder: run.decoder,
            normalize: run.normalize,
            m: run.m,
            beta: None,
            lr: run.lr,
            steps: run.steps,
            batch_size: run.batch_size,
            checkpoint_interval: run.checkpoint_interval,
            weight_decay: run.weight_decay,
            top_p: run.top_p,
            temperature: run.temperature,
            diversity_penalty: run.diversity_penalty,
            repetition_penalty: run.repetition_penalty,
            eval_m: run.eval_m,
            mode: cls.mode,
            classifier_m: cls.m,
            classifier_lr: cls.lr,
            classifier_steps: cls.steps,
            gs_k: cls.gs_k,
            gs_batch: cls.gs_batch,
            instruction: Vec::new(),
            policy_checkpoint: None,
            classifier_checkpoint: None,
            workers: 0,
        }
    }
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

impl ExperimentConfig {
    /// Parses a JSON object of overrides. Unknown keys and ill-typed values
    /// are rejected with the offending field named.
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| config_err(format!("config is not valid JSON: {e}")))?;
        let Value::Object(overrides) = value else {
            return Err(config_err("config must be a JSON object"));
        };
        let Value::Object(known) = serde_json::to_value(Self::default())? else {
            unreachable!("config serializes to an object")
        };
        for (key, v) in &overrides {
            if !known.contains_key(key) {
                return Err(config_err(format!("unknown config field `{key}`")));
            }
            let single: Map<String, Value> = [(key.clone(), v.clone())].into_iter().collect();
            serde_json::from_value::<Self>(Value::Object(single))
                .map_err(|e| config_err(format!("config field `{key}`: {e}")))?;
        }
        let cfg: Self = serde_json::from_value(Value::Object(overrides)).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(config_err("config field `name`: must be a plain directory name"));
        }
        let wrap = |r: riff_core::Result<()>| r.map_err(|e| config_err(e.to_string()));
        wrap(self.setup.validate())?;
        wrap(self.run_config().validate())?;
        wrap(self.classifier_config().validate())?;
        wrap(self.decode_config(self.eval_m).validate())?;
        let text_vocab = self.setup.vocab_size.saturating_sub(3) as u32;
        if let Some(&bad) = self.instruction.iter().find(|&&t| t == 0 || t >= text_vocab) {
            return Err(config_err(format!("config field `instruction`: token {bad} is not a text token")));
        }
        if self.mode == TuningMode::Gs && self.instruction.is_empty() {
            return Err(config_err("config field `instruction`: instruction search needs at least one token"));
        }
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            estimator: self.estimator,
            regime: self.regime,
            decoder: self.decoder,
            normalize: self.normalize,
            m: self.m,
            beta: self.beta.unwrap_or_else(|| default_beta(self.estimator)),
            lr: self.lr,
            steps: self.steps,
            batch_size: self.batch_size,
            checkpoint_interval: self.checkpoint_interval,
            weight_decay: self.weight_decay,
            seed: self.setup.seed,
            top_p: self.top_p,
            temperature: self.temperature,
            diversity_penalty: self.diversity_penalty,
            repetition_penalty: self.repetition_penalty,
            eval_m: self.eval_m,
        }
    }

    pub fn classifier_config(&self) -> ClassifierTrainConfig {
        ClassifierTrainConfig {
            lr: self.classifier_lr,
            steps: self.classifier_steps,
            batch_size: self.batch_size,
            checkpoint_interval: self.checkpoint_interval,
            weight_decay: self.weight_decay,
            gs_k: self.gs_k,
            gs_batch: self.gs_batch,
            ..ClassifierTrainConfig::new(self.mode, self.classifier_m, self.setup.seed)
        }
    }

    pub fn decode_config(&self, m: usize) -> DecodeConfig {
        self.run_config().decode_config(m.max(1), self.setup.seed)
    }

    pub fn seed(&self) -> u64 {
        self.setup.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { setup: SetupConfig { seed, ..self.setup }, ..self.clone() }
    }
}
