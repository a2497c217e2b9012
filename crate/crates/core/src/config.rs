//! The run configuration: every section a command needs, in one document.

use crate::data::CorpusSpec;
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{Profile, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Share of training occurrences assigned to the tail.
    pub tail_threshold: f64,
    /// Domain rows of the domain table; empty means the domains found in the references.
    pub domains: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tail_threshold: 0.95,
            domains: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Corpus directory; defaults to `<out_dir>/data`.
    pub data_dir: Option<PathBuf>,
    /// Sememe lexicon file; defaults to the corpus lexicon.
    pub lexicon: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            out_dir: PathBuf::from("run"),
            data_dir: None,
            lexicon: None,
            corpus: CorpusSpec::default(),
            model: profile.model_config(),
            train: profile.train_config(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Replaces the model shape and optimisation settings with `profile`'s,
    /// keeping the mode, vocabulary and seed.
    pub fn apply_profile(&mut self, profile: Profile) {
        let shape = profile.model_config();
        self.model = ModelConfig {
            mode: self.model.mode,
            sememe_prediction: self.model.sememe_prediction,
            vocab_size: self.model.vocab_size,
            sememe_count: self.model.sememe_count,
            feature_dim: self.model.feature_dim,
            ..shape
        };
        let seed = self.train.seed;
        self.train = TrainConfig {
            seed,
            ..profile.train_config()
        };
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    /// Checks every section and their agreement; all failures are config errors.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Argument(m) => Error::Config(m),
            other => other,
        };
        self.corpus.validate().map_err(|e| as_config(e).prefixed("corpus"))?;
        self.model.validate().map_err(as_config)?;
        self.train.validate()?;
        let d = &self.decode;
        if d.beam == 0 || d.max_len == 0 || !(0.0..=1.0).contains(&d.ctc_weight) {
            return Err(Error::config("decode needs beam >= 1, max_len >= 1 and ctc_weight in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.eval.tail_threshold) {
            return Err(Error::config("eval.tail_threshold must lie in [0, 1]"));
        }
        let pairs = [
            ("vocab_size", self.model.vocab_size, self.corpus.vocab_size),
            ("sememe_count", self.model.sememe_count, self.corpus.sememe_count),
            ("feature_dim", self.model.feature_dim, self.corpus.feature_dim),
        ];
        for (name, m, c) in pairs {
            if m != c {
                return Err(Error::config(format!("model.{name} = {m} but corpus.{name} = {c}")));
            }
        }
        Ok(())
    }
}

impl Error {
    fn prefixed(self, section: &str) -> Self {
        match self {
            Error::Config(m) => Error::Config(format!("{section}: {m}")),
            other => other,
        }
    }
}
