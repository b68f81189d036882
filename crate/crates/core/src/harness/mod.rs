//! Orchestration behind the `creval` CLI: run configuration, QA generation,
//! resumable evaluation, reports, alignment and the annotation service.

pub mod annotate;
mod ledger;
mod pipeline;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Deserializer};
use thiserror::Error;

use crate::alignment::AlignmentError;
use crate::jsonl::JsonlError;
use crate::judge::{BackendConfig, DiskCache, JudgeClient, JudgeError};
use crate::model::{ModelError, WeightTriple};
use crate::qagen::{PromptSet, QaGenError, DEFAULT_QA_RETRIES};
use crate::scoring::ScoringError;

pub use ledger::{Ledger, LedgerEntry};
pub use pipeline::{
    cmd_evaluate, cmd_gen_instructions, cmd_gen_qa, edited_image_path, evaluate_with, EvalSummary, GenQaSummary, InstructionSource,
    Unevaluated,
};
pub use report::{
    cmd_align, cmd_report, cmd_sweep_weights, load_metric_table, load_scores, render_report, sweep_table, AlignOutput,
    ReportOutput,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("{what} not found: {}", path.display())]
    MissingPath { what: &'static str, path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no data: {0}")]
    NoData(String),
    #[error("{0}")]
    Input(String),
    #[error("sample {sample_id}: {source}")]
    Sample {
        sample_id: String,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    QaGen(#[from] QaGenError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

fn weights_from_str<'de, D: Deserializer<'de>>(d: D) -> Result<WeightTriple, D::Error> {
    let s = String::deserialize(d)?;
    WeightTriple::parse(&s).map_err(serde::de::Error::custom)
}

fn default_run_dir() -> PathBuf {
    PathBuf::from("run")
}
fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}
fn default_qa_retries() -> u32 {
    DEFAULT_QA_RETRIES
}
fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

/// Inputs of `gen-instructions`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionConfig {
    /// JSONL of `{"id","image","dimension"}`.
    pub images: PathBuf,
    /// JSON object: dimension → list of example instructions.
    pub examples: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    /// Defaults to `<run_dir>/ratings.jsonl`.
    #[serde(default)]
    pub ratings: Option<PathBuf>,
    /// Defaults to `<run_dir>/blind_map.json`; generated when absent.
    #[serde(default)]
    pub blind_map: Option<PathBuf>,
    /// Static UI bundle served under `/assets/`.
    #[serde(default)]
    pub assets_dir: Option<PathBuf>,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self { bind: default_bind(), ratings: None, blind_map: None, assets_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    /// Wide CSV `model,<scorer>,...` of extra score columns.
    #[serde(default)]
    pub external_scores: Option<PathBuf>,
}

/// Contents of the run TOML file. Relative paths are resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub bench_manifest: PathBuf,
    pub qa_bank: PathBuf,
    /// `<outputs_root>/<model_id>/<sample_id>.<png|jpg|jpeg|webp>`.
    pub outputs_root: PathBuf,
    /// Ledger, score records, reports.
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
    /// Scoring judge.
    pub judge: BackendConfig,
    /// Question/instruction generator; the scoring judge when absent.
    #[serde(default)]
    pub generator: Option<BackendConfig>,
    #[serde(default, deserialize_with = "weights_from_str")]
    pub weights: WeightTriple,
    /// Overrides the backends' own `concurrency_limit`.
    #[serde(default)]
    pub concurrency: Option<usize>,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_qa_retries")]
    pub qa_retries: u32,
    /// Re-ask once when a judge reply has no leading yes/no.
    #[serde(default)]
    pub requery_unparseable: bool,
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
    /// Model ids to evaluate; all subdirectories of `outputs_root` when absent.
    #[serde(default)]
    pub models: Option<Vec<String>>,
    #[serde(default)]
    pub instructions: Option<InstructionConfig>,
    #[serde(default)]
    pub annotation: AnnotationConfig,
    #[serde(default)]
    pub align: AlignConfig,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub models: Option<Vec<String>>,
    pub weights: Option<WeightTriple>,
    pub concurrency: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).map_err(|message| HarnessError::Config { path: path.display().to_string(), message })
    }

    /// Parses TOML text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.bench_manifest, &mut self.qa_bank, &mut self.outputs_root, &mut self.run_dir, &mut self.cache_dir] {
            *p = base.join(&*p);
        }
        for p in [&mut self.prompt_dir, &mut self.annotation.ratings, &mut self.annotation.blind_map, &mut self.annotation.assets_dir, &mut self.align.external_scores]
            .into_iter()
            .flatten()
        {
            *p = base.join(&*p);
        }
        if let Some(i) = &mut self.instructions {
            i.images = base.join(&i.images);
            i.examples = base.join(&i.examples);
        }
        self.judge.resolve_paths(base);
        if let Some(g) = &mut self.generator {
            g.resolve_paths(base);
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.concurrency == Some(0) {
            return Err("concurrency must be positive".into());
        }
        self.judge.validate().map_err(|e| e.to_string())?;
        if let Some(g) = &self.generator {
            g.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    pub fn apply(&mut self, o: Overrides) -> Result<(), HarnessError> {
        if let Some(m) = o.models {
            self.models = Some(m);
        }
        if let Some(w) = o.weights {
            self.weights = w;
        }
        if let Some(c) = o.concurrency {
            if c == 0 {
                return Err(HarnessError::Input("--concurrency must be positive".into()));
            }
            self.concurrency = Some(c);
        }
        if let Some(d) = o.cache_dir {
            self.cache_dir = d;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        Ok(())
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.run_dir.join("ledger.jsonl")
    }
    pub fn scores_path(&self) -> PathBuf {
        self.run_dir.join("scores.jsonl")
    }
    pub fn unevaluated_path(&self) -> PathBuf {
        self.run_dir.join("unevaluated.jsonl")
    }
    pub fn ratings_path(&self) -> PathBuf {
        self.annotation.ratings.clone().unwrap_or_else(|| self.run_dir.join("ratings.jsonl"))
    }
    pub fn blind_map_path(&self) -> PathBuf {
        self.annotation.blind_map.clone().unwrap_or_else(|| self.run_dir.join("blind_map.json"))
    }

    pub fn prompts(&self) -> Result<PromptSet, HarnessError> {
        Ok(match &self.prompt_dir {
            Some(dir) => PromptSet::with_overrides(dir)?,
            None => PromptSet::default(),
        })
    }

    fn client_for(&self, backend: &BackendConfig) -> Result<JudgeClient, HarnessError> {
        let mut backend = backend.clone();
        if let Some(c) = self.concurrency {
            backend.concurrency_limit = c;
        }
        let cache = DiskCache::open(&self.cache_dir).map_err(|e| HarnessError::io(&self.cache_dir, e))?;
        Ok(JudgeClient::from_config(&backend, Some(Arc::new(cache)))?)
    }

    pub fn judge_client(&self) -> Result<JudgeClient, HarnessError> {
        self.client_for(&self.judge)
    }

    pub fn generator_client(&self) -> Result<JudgeClient, HarnessError> {
        self.client_for(self.generator.as_ref().unwrap_or(&self.judge))
    }

    /// Configured models, or every subdirectory of `outputs_root` in name order.
    pub fn model_ids(&self) -> Result<Vec<String>, HarnessError> {
        if let Some(m) = &self.models {
            return Ok(m.clone());
        }
        require(&self.outputs_root, "outputs_root")?;
        let mut ids = Vec::new();
        for e in fs::read_dir(&self.outputs_root).map_err(|e| HarnessError::io(&self.outputs_root, e))? {
            let e = e.map_err(|e| HarnessError::io(&self.outputs_root, e))?;
            if e.path().is_dir() {
                ids.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }
}

pub(crate) fn require(path: &Path, what: &'static str) -> Result<(), HarnessError> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::MissingPath { what, path: path.to_path_buf() })
    }
}
