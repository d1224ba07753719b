//! Run configuration: a strict `key = value` text format whose keys mirror
//! the RunConfig fields one to one. Unknown keys are rejected so typos fail
//! loudly instead of silently falling back to defaults.

use std::path::{Path, PathBuf};

use thiserror::Error;

use foresight::datagen::{self, ActivityGrammar};
use foresight::optim::OptimizerKind;
use foresight::predictor::{Branches, PredictorConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: bad value for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("missing required config key `{0}` for this command")]
    MissingKey(&'static str),
    #[error("FORESIGHT_THREADS must be a positive integer, got `{0}`")]
    BadThreads(String),
}

/// Everything a run can configure, command-line overrides included.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Predictor architecture. `num_classes = 0` means "take it from the
    // dataset manifest".
    pub num_classes: usize,
    pub window: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub scene_branch: bool,
    pub time_branch: bool,
    pub unknown_threshold: f64,
    pub lambda_time: f64,
    pub time_standardize: bool,

    // Captioner architecture.
    pub cap_layers: usize,
    pub cap_hidden: usize,
    pub max_decode_len: usize,
    pub vocab_max: usize,

    // Training.
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub cap_batch: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,

    // Data generation.
    pub grammar: String,
    pub n_videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub train_frac: f64,

    // Paths.
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub cap_checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_classes: 0,
            window: 3,
            horizon: 3,
            hidden: 256,
            dropout: 0.2,
            scene_branch: true,
            time_branch: true,
            unknown_threshold: 0.1,
            lambda_time: 1.0,
            time_standardize: false,
            cap_layers: 3,
            cap_hidden: 1000,
            max_decode_len: 20,
            vocab_max: 20000,
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            epochs: 10,
            batch: 128,
            cap_batch: 1000,
            seed: 0,
            clip_norm: None,
            grammar: "disambiguation".into(),
            n_videos: 100,
            min_len: 8,
            max_len: 12,
            feature_dim: 16,
            noise_sigma: 0.25,
            train_frac: 0.8,
            dataset: None,
            checkpoint: None,
            cap_checkpoint: None,
            predictions: None,
            report: None,
            pairs: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed {
                    line,
                    text: trimmed.to_string(),
                })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value, line)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::BadValue {
            line,
            key: key.to_string(),
            reason: reason.to_string(),
        };
        macro_rules! parse {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|e| bad(&e.to_string()))?
            };
        }
        match key {
            "num_classes" => self.num_classes = parse!(usize),
            "window" => self.window = parse!(usize),
            "horizon" => self.horizon = parse!(usize),
            "hidden" => self.hidden = parse!(usize),
            "dropout" => self.dropout = parse!(f64),
            "scene_branch" => self.scene_branch = parse!(bool),
            "time_branch" => self.time_branch = parse!(bool),
            "unknown_threshold" => self.unknown_threshold = parse!(f64),
            "lambda_time" => self.lambda_time = parse!(f64),
            "time_standardize" => self.time_standardize = parse!(bool),
            "cap_layers" => self.cap_layers = parse!(usize),
            "cap_hidden" => self.cap_hidden = parse!(usize),
            "max_decode_len" => self.max_decode_len = parse!(usize),
            "vocab_max" => self.vocab_max = parse!(usize),
            "optimizer" => {
                self.optimizer = value.parse::<OptimizerKind>().map_err(|e| bad(&e.to_string()))?
            }
            "lr" => self.lr = parse!(f64),
            "epochs" => self.epochs = parse!(usize),
            "batch" => self.batch = parse!(usize),
            "cap_batch" => self.cap_batch = parse!(usize),
            "seed" => self.seed = parse!(u64),
            "clip_norm" => {
                self.clip_norm = if value == "none" {
                    None
                } else {
                    Some(parse!(f64))
                }
            }
            "grammar" => self.grammar = value.to_string(),
            "n_videos" => self.n_videos = parse!(usize),
            "min_len" => self.min_len = parse!(usize),
            "max_len" => self.max_len = parse!(usize),
            "feature_dim" => self.feature_dim = parse!(usize),
            "noise_sigma" => self.noise_sigma = parse!(f64),
            "train_frac" => self.train_frac = parse!(f64),
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "cap_checkpoint" => self.cap_checkpoint = Some(PathBuf::from(value)),
            "predictions" => self.predictions = Some(PathBuf::from(value)),
            "report" => self.report = Some(PathBuf::from(value)),
            "pairs" => self.pairs = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            other => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: other.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Structural validation, run before any command touches data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.window < 1 {
            return Err(ConfigError::Invalid("window must be >= 1".into()));
        }
        if self.horizon < 1 {
            return Err(ConfigError::Invalid("horizon must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Invalid(
                "dropout must lie in [0, 1)".into(),
            ));
        }
        if !(0.0 < self.unknown_threshold && self.unknown_threshold < 1.0) {
            return Err(ConfigError::Invalid(
                "unknown_threshold must lie in (0, 1)".into(),
            ));
        }
        if self.hidden < 1 || self.cap_hidden < 1 || self.cap_layers < 1 {
            return Err(ConfigError::Invalid("layer sizes must be >= 1".into()));
        }
        if self.max_decode_len < 1 {
            return Err(ConfigError::Invalid("max_decode_len must be >= 1".into()));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(ConfigError::Invalid("lr must be a finite >= 0".into()));
        }
        if self.batch < 1 || self.cap_batch < 1 {
            return Err(ConfigError::Invalid("batch sizes must be >= 1".into()));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(ConfigError::Invalid("bad video length range".into()));
        }
        if !(0.0 < self.train_frac && self.train_frac < 1.0) {
            return Err(ConfigError::Invalid(
                "train_frac must lie in (0, 1)".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 || !c.is_finite() {
                return Err(ConfigError::Invalid(
                    "clip_norm must be positive or `none`".into(),
                ));
            }
        }
        Ok(())
    }

    /// Assemble the predictor config for `num_classes` actual classes.
    pub fn predictor_config(&self, num_classes: usize) -> PredictorConfig {
        PredictorConfig {
            num_classes,
            window: self.window,
            horizon: self.horizon,
            hidden: self.hidden,
            dropout: self.dropout,
            branches: Branches {
                scene: self.scene_branch,
                sequence: true,
                time: self.time_branch,
            },
            unknown_threshold: self.unknown_threshold,
            lambda_time: self.lambda_time,
            time_standardize: self.time_standardize,
        }
    }

    /// Resolve the grammar key: a built-in name or a JSON grammar file path.
    pub fn resolve_grammar(&self) -> Result<ActivityGrammar, ConfigError> {
        match self.grammar.as_str() {
            "disambiguation" => Ok(datagen::make_disambiguation_grammar(self.seed)),
            "stochastic" => Ok(datagen::make_stochastic_grammar(self.seed)),
            "caption" => Ok(datagen::make_caption_grammar(self.seed)),
            path if path.ends_with(".json") => {
                let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
                    path: path.to_string(),
                    source: e,
                })?;
                let grammar: ActivityGrammar = serde_json::from_str(&text)
                    .map_err(|e| ConfigError::Invalid(format!("grammar file: {e}")))?;
                grammar
                    .validate()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(grammar)
            }
            other => Err(ConfigError::Invalid(format!(
                "unknown grammar `{other}` (expected disambiguation, stochastic, caption or a .json path)"
            ))),
        }
    }

    pub fn require(
        path: &Option<PathBuf>,
        key: &'static str,
    ) -> Result<PathBuf, ConfigError> {
        path.clone().ok_or(ConfigError::MissingKey(key))
    }
}

/// Worker-thread cap from FORESIGHT_THREADS, defaulting to the machine's
/// parallelism.
pub fn worker_threads() -> Result<usize, ConfigError> {
    match std::env::var("FORESIGHT_THREADS") {
        Err(_) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
        Ok(raw) => raw
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or(ConfigError::BadThreads(raw)),
    }
}
