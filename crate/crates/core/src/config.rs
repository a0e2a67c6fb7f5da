//! Model, loss, evaluation and run configuration.
//!
//! Defaults reproduce the production setting: 768-wide sentence and latent
//! states, 1536-wide interaction states, temperatures 10 and 20, AdamW at
//! 3e-5 with batch size 8 for 50 epochs under 5 folds.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ablation variants of the matching network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoAia,
    NoLim,
    NoBim,
    OnlyAia,
    LimNoAia,
    LegalUnit,
    LegalRandom,
    LegalEmbeddingDistance,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::NoAia,
        Variant::NoLim,
        Variant::NoBim,
        Variant::OnlyAia,
        Variant::LimNoAia,
        Variant::LegalUnit,
        Variant::LegalRandom,
        Variant::LegalEmbeddingDistance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAia => "no_aia",
            Variant::NoLim => "no_lim",
            Variant::NoBim => "no_bim",
            Variant::OnlyAia => "only_aia",
            Variant::LimNoAia => "lim_no_aia",
            Variant::LegalUnit => "legal_unit",
            Variant::LegalRandom => "legal_random",
            Variant::LegalEmbeddingDistance => "legal_embedding_distance",
        }
    }

    pub fn uses_semantic(self) -> bool {
        matches!(
            self,
            Variant::Full
                | Variant::NoAia
                | Variant::NoLim
                | Variant::LegalUnit
                | Variant::LegalRandom
                | Variant::LegalEmbeddingDistance
        )
    }

    pub fn uses_legal(self) -> bool {
        !matches!(self, Variant::NoLim | Variant::OnlyAia)
    }

    pub fn uses_aia(self) -> bool {
        !matches!(self, Variant::NoAia | Variant::NoLim | Variant::LimNoAia)
    }

    /// Whether the legal branch (and the article subtask) runs at all.
    pub fn has_lim(self) -> bool {
        self != Variant::NoLim
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Ranking candidates by graded relevance.
    Lcr,
    /// Classifying pairs into match levels.
    #[default]
    Lcm,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Lcr => "lcr",
            Task::Lcm => "lcm",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lcr" => Ok(Task::Lcr),
            "lcm" => Ok(Task::Lcm),
            other => Err(Error::Config(format!("unknown task `{other}` (expected lcr or lcm)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Article-prediction temperature.
    pub tau_a: f64,
    /// Ranking temperature.
    pub tau_m: f64,
    pub enable_rationale: bool,
    pub enable_align: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau_a: 10.0, tau_m: 20.0, enable_rationale: false, enable_align: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_b: usize,
    pub d_h: usize,
    pub d_s: usize,
    pub d_l: usize,
    pub max_sentences: usize,
    pub max_tokens: usize,
    pub variant: Variant,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub folds: usize,
    /// Use gold article sets for article-intervened attention during training.
    pub teacher_forcing: bool,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_b: 768,
            d_h: 768,
            d_s: 2 * 768,
            d_l: 2 * 768,
            max_sentences: 15,
            max_tokens: 150,
            variant: Variant::Full,
            learning_rate: 3e-5,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            folds: 5,
            teacher_forcing: false,
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration for desk-scale experiments: `d_h = d_b`, interaction widths `2·d_b`.
    pub fn tiny(d_b: usize) -> Self {
        Self { d_b, d_h: d_b, d_s: 2 * d_b, d_l: 2 * d_b, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let even = |name: &str, v: usize| {
            if v == 0 || !v.is_multiple_of(2) {
                Err(Error::Config(format!("{name} must be a positive even number, got {v}")))
            } else {
                Ok(())
            }
        };
        even("d_b", self.d_b)?;
        even("d_s", self.d_s)?;
        even("d_l", self.d_l)?;
        if self.d_h == 0 {
            return Err(Error::Config("d_h must be positive".into()));
        }
        if self.loss.tau_a <= 0.0 || self.loss.tau_m <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if self.max_sentences == 0 || self.max_tokens == 0 {
            return Err(Error::Config("truncation limits must be positive".into()));
        }
        Ok(())
    }

    /// Width of one final case representation under the configured variant.
    pub fn final_width(&self) -> usize {
        let v = self.variant;
        let mut w = 0;
        if v.uses_semantic() {
            w += self.d_s;
        }
        if v.uses_legal() {
            w += self.d_l;
        }
        if v.uses_aia() {
            w += self.d_l;
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GainKind {
    /// `2^rel − 1`
    #[default]
    Exponential,
    /// `rel`
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Lowest grade counted as relevant for P@k and MAP; `None` means only the top grade.
    pub relevant_min_grade: Option<u32>,
    pub gain: GainKind,
    /// Average the match distribution over both pair orders.
    pub symmetric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderConfig {
    /// Hashed character n-gram features.
    Hash { seed: u64 },
    /// Pre-exported sentence embeddings (`{"text": str, "vector": [f64]}` per line).
    Table { name: String, path: PathBuf },
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Hash { seed: 0 }
    }
}

/// Complete experiment configuration, persisted next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub min_support: usize,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Lcm,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            cache_dir: None,
            min_support: 10,
            encoder: EncoderConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}
