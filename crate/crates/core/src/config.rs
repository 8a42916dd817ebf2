//! Run configuration: TOML with one section per stage.
//!
//! Every key is optional and falls back to the module default; unknown keys
//! are rejected. A single top-level `seed` drives every random stream.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::correct::ProblemConfig;
use crate::error::{invalid, Error, Result};
use crate::identify::RecallConfig;
use crate::numerics::Rng;
use crate::router::RouterConfig;
use crate::sae::SaeTrainConfig;
use crate::steering::{AlphaSearchConfig, RepetitionRule};
use crate::toylm::ToyLmConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Passes over the strategy cycle.
    pub rounds: usize,
    pub segment_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            rounds: 20,
            segment_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeywordSection {
    pub top_n: usize,
}

impl Default for KeywordSection {
    fn default() -> Self {
        Self { top_n: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub validation_size: usize,
    pub prefix_len: usize,
    pub horizon: usize,
    pub alpha_start: f64,
    pub min_gram: usize,
    pub min_repeats: usize,
    pub m_min: usize,
    /// A candidate counts as recovered at this success rate or above.
    pub min_success: f64,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            validation_size: 16,
            prefix_len: 32,
            horizon: 64,
            alpha_start: 15.0,
            min_gram: 3,
            min_repeats: 3,
            m_min: 3,
            min_success: 0.5,
        }
    }
}

impl Stage2Section {
    pub fn alpha_search(&self) -> AlphaSearchConfig {
        AlphaSearchConfig {
            alpha_start: self.alpha_start,
            rule: RepetitionRule {
                min_gram: self.min_gram,
                min_repeats: self.min_repeats,
            },
            horizon: self.horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectSection {
    pub per_strategy: usize,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self { per_strategy: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterSection {
    pub hidden: usize,
    pub embed: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_problems: usize,
    pub heldout_contexts: usize,
}

impl Default for RouterSection {
    fn default() -> Self {
        let r = RouterConfig::default();
        Self {
            hidden: r.hidden,
            embed: r.embed,
            steps: r.steps,
            batch_size: r.batch_size,
            learning_rate: r.learning_rate,
            train_problems: 1_000,
            heldout_contexts: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectSection {
    pub problems: usize,
    pub horizon: usize,
    pub prefix_len: usize,
    pub cue_gain: f64,
}

impl Default for CorrectSection {
    fn default() -> Self {
        let p = ProblemConfig::default();
        Self {
            problems: 500,
            horizon: 128,
            prefix_len: p.prefix_len,
            cue_gain: p.cue_gain,
        }
    }
}

impl CorrectSection {
    pub fn problem_config(&self) -> ProblemConfig {
        ProblemConfig {
            prefix_len: self.prefix_len,
            cue_gain: self.cue_gain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory; the CLI flag and the output-root variable override it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ToyLmConfig,
    pub corpus: CorpusSection,
    pub sae: SaeTrainConfig,
    pub keywords: KeywordSection,
    pub recall: RecallConfig,
    pub stage2: Stage2Section,
    pub select: SelectSection,
    pub router: RouterSection,
    pub correct: CorrectSection,
}

/// Independent random streams, one per consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Model = 1,
    Corpus,
    Sae,
    Validation,
    Stage2Noise,
    Router,
    TrainProblems,
    LabelNoise,
    Heldout,
    EvalProblems,
    EvalNoise,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Parse `text` (possibly empty), apply `section.key=value` overrides,
    /// then validate.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| invalid(format!("config: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_toml(&toml::to_string(&table).map_err(|e| invalid(e.to_string()))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn stream_seed(&self, stream: Stream) -> u64 {
        Rng::derive(self.seed, stream as u64).next_u64()
    }

    pub fn model_config(&self) -> ToyLmConfig {
        ToyLmConfig {
            seed: self.stream_seed(Stream::Model),
            ..self.model.clone()
        }
    }

    pub fn sae_config(&self) -> SaeTrainConfig {
        SaeTrainConfig {
            seed: self.stream_seed(Stream::Sae),
            ..self.sae.clone()
        }
    }

    pub fn router_config(&self) -> RouterConfig {
        RouterConfig {
            hidden: self.router.hidden,
            embed: self.router.embed,
            steps: self.router.steps,
            batch_size: self.router.batch_size,
            learning_rate: self.router.learning_rate,
            seed: self.stream_seed(Stream::Router),
        }
    }

    /// Range checks for every section; runs before any stage.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sae.validate()?;
        self.recall.validate()?;
        self.stage2.alpha_search().validate()?;
        self.router_config().validate()?;
        let positive = [
            ("corpus.rounds", self.corpus.rounds),
            ("corpus.segment_len", self.corpus.segment_len),
            ("keywords.top_n", self.keywords.top_n),
            ("stage2.validation_size", self.stage2.validation_size),
            ("stage2.horizon", self.stage2.horizon),
            ("stage2.m_min", self.stage2.m_min),
            ("select.per_strategy", self.select.per_strategy),
            ("router.train_problems", self.router.train_problems),
            ("router.heldout_contexts", self.router.heldout_contexts),
            ("correct.problems", self.correct.problems),
            ("correct.horizon", self.correct.horizon),
            ("correct.prefix_len", self.correct.prefix_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.stage2.prefix_len < 2 {
            return Err(invalid("stage2.prefix_len must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.stage2.min_success) {
            return Err(invalid("stage2.min_success must lie in [0, 1]"));
        }
        if self.model.n_strategies < 2 {
            return Err(invalid("correction problems need model.n_strategies >= 2"));
        }
        if self.sae.m_dim < self.sae.k {
            return Err(invalid("sae.k exceeds sae.m_dim"));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| invalid(format!("override `{spec}` is not key=value")))?;
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("override `{spec}`: `{k}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
