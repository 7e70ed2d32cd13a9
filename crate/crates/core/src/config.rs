//! Whole-pipeline configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusConfig, Label};
use crate::error::{Error, Result};
use crate::gradcheck::GradcheckConfig;
use crate::model::TinyLmConfig;
use crate::prompt::PromptVariant;
use crate::teacher::{ExternalTeacher, SimulatedTeacher, Teacher, TeacherEndpointConfig, TeacherProfile};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeacherSpec {
    Simulated(TeacherProfile),
    External(TeacherEndpointConfig),
}

impl TeacherSpec {
    pub fn name(&self) -> &str {
        match self {
            TeacherSpec::Simulated(p) => &p.name,
            TeacherSpec::External(e) => &e.name,
        }
    }

    pub fn build(&self) -> Box<dyn Teacher> {
        match self {
            TeacherSpec::Simulated(p) => Box::new(SimulatedTeacher(p.clone())),
            TeacherSpec::External(e) => Box::new(ExternalTeacher(e.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Label assigned when the student's answer has no verdict.
    pub fallback_label: Label,
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fallback_label: Label::OutOfContext,
            max_new_tokens: 24,
        }
    }
}

/// Externally supplied data used instead of the synthetic generator.
/// Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub train: PathBuf,
    pub val: Option<PathBuf>,
    pub test: PathBuf,
    /// Gold labels for conflict items that carry none in the corpus.
    pub annotations: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub prompt_variant: PromptVariant,
    /// Teacher whose answers supervise the agree items in Stage 1.
    pub primary_teacher: String,
    pub corpus: CorpusConfig,
    pub teachers: Vec<TeacherSpec>,
    /// `text_vocab_size` is replaced by the size of the built vocabulary.
    pub model: TinyLmConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
    pub ingest: Option<IngestConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let teacher = |name: &str, seed| {
            TeacherSpec::Simulated(TeacherProfile {
                difficulty_sensitivity: 0.2,
                ..TeacherProfile::new(name, 0.9, seed)
            })
        };
        PipelineConfig {
            prompt_variant: PromptVariant::default(),
            primary_teacher: "teacher_a".into(),
            corpus: CorpusConfig::default(),
            teachers: vec![teacher("teacher_a", 11), teacher("teacher_b", 23)],
            model: TinyLmConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
            ingest: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        if self.teachers.is_empty() {
            return Err(Error::Config("no teachers configured".into()));
        }
        if !self.teachers.iter().any(|t| t.name() == self.primary_teacher) {
            return Err(Error::Config(format!(
                "primary teacher `{}` is not configured",
                self.primary_teacher
            )));
        }
        let mut names: Vec<&str> = self.teachers.iter().map(TeacherSpec::name).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("teacher names must be unique".into()));
        }
        if self.eval.max_new_tokens == 0 {
            return Err(Error::Config("eval.max_new_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Applies one seed to the corpus, the model and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        if let (Some(ingest), Some(dir)) = (cfg.ingest.as_mut(), path.parent()) {
            for p in [Some(&mut ingest.train), ingest.val.as_mut(), Some(&mut ingest.test), ingest.annotations.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
