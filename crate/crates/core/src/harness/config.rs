use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic, load_corpus, Corpus, SyntheticConfig};
use crate::ded::DecodeConfig;
use crate::error::{Error, Result};
use crate::gated::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Precomputed embeddings from a GXEB corpus file.
    ClapFile,
    #[default]
    Synthetic,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::ClapFile => "clap-file",
            FeatureMode::Synthetic => "synthetic",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    #[default]
    None,
    Ded,
}

impl DecoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::None => "none",
            DecoderKind::Ded => "ded",
        }
    }
}

/// Feed-forward activation. GELU is the only one implemented; the key exists
/// so configs can state it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfActivation {
    #[default]
    Gelu,
}

/// Everything one experiment needs. Serialized as TOML with `[model]`,
/// `[decode]` and `[synthetic]` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub feature_mode: FeatureMode,
    /// Required when `feature_mode = "clap-file"`.
    pub corpus_path: Option<PathBuf>,
    pub split_seed: u64,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Upper bound; training stops earlier once validation F1 stalls.
    pub epochs: usize,
    pub patience: usize,
    pub activation: FfActivation,
    pub decoder: DecoderKind,
    /// Mixing weight of per-utterance random noise into evaluated
    /// posteriors, in `[0, 1)`. 0 leaves them untouched.
    pub posterior_noise: f64,
    pub model: ModelConfig,
    pub decode: DecodeConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            feature_mode: FeatureMode::Synthetic,
            corpus_path: None,
            split_seed: 42,
            seeds: vec![42, 43, 45, 46, 50],
            batch_size: 32,
            learning_rate: 1e-3,
            epochs: 30,
            patience: 5,
            activation: FfActivation::Gelu,
            decoder: DecoderKind::None,
            posterior_noise: 0.0,
            decode: DecodeConfig::default(),
            synthetic: SyntheticConfig {
                embedding_dim: model.embedding_dim,
                ..SyntheticConfig::default()
            },
            model,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Usage(m) => Error::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.decode.validate()?;
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.seeds.is_empty() {
            return Err(Error::usage("at least one seed is required"));
        }
        if !(0.0..1.0).contains(&self.posterior_noise) {
            return Err(Error::usage(format!(
                "posterior_noise {} outside [0, 1)",
                self.posterior_noise
            )));
        }
        match self.feature_mode {
            FeatureMode::ClapFile if self.corpus_path.is_none() => {
                Err(Error::usage("feature_mode clap-file needs corpus_path"))
            }
            FeatureMode::Synthetic if self.synthetic.embedding_dim != self.model.embedding_dim => {
                Err(Error::usage(format!(
                    "synthetic.embedding_dim {} != model.embedding_dim {}",
                    self.synthetic.embedding_dim, self.model.embedding_dim
                )))
            }
            FeatureMode::Synthetic => self.synthetic.validate(),
            FeatureMode::ClapFile => Ok(()),
        }
    }

    /// Loads or generates the corpus this config describes.
    pub fn load_corpus(&self) -> Result<Corpus> {
        let corpus = match self.feature_mode {
            FeatureMode::Synthetic => generate_synthetic(&self.synthetic)?,
            FeatureMode::ClapFile => {
                let path = self
                    .corpus_path
                    .as_ref()
                    .ok_or_else(|| Error::usage("feature_mode clap-file needs corpus_path"))?;
                load_corpus(path)?
            }
        };
        if corpus.embedding_dim() != self.model.embedding_dim {
            return Err(Error::Validation(format!(
                "corpus embedding_dim {} != model.embedding_dim {}",
                corpus.embedding_dim(),
                self.model.embedding_dim
            )));
        }
        Ok(corpus)
    }
}
