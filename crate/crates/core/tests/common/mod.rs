//! Fixture bench shared by the integration suites: one sample per dimension, the
//! resin-bust question bank for every sample, and judges that answer from the bank.
#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use creval_core::harness::RunConfig;
use creval_core::jsonl;
use creval_core::judge::{BackendConfig, DiskCache, JudgeClient, JudgeRequest, MockBackend};
use creval_core::model::{sha256_hex, Answer, Dimension, EvalQuestion, ManifestRecord, Metric};
use creval_core::qagen::{parse_qa_output, QaRecord};
use tempfile::TempDir;

pub const IF_FIXTURE: &str = include_str!("../fixtures/bust_if.txt");
pub const VC_FIXTURE: &str = include_str!("../fixtures/bust_vc.txt");
pub const VQ_FIXTURE: &str = include_str!("../fixtures/bust_vq.txt");

pub fn fixture(metric: Metric) -> &'static str {
    match metric {
        Metric::If => IF_FIXTURE,
        Metric::Vc => VC_FIXTURE,
        Metric::Vq => VQ_FIXTURE,
    }
}

/// Picks the fixture a generation prompt asks for.
pub fn fixture_for_prompt(prompt: &str) -> &'static str {
    if prompt.contains("FOLLOWS") {
        IF_FIXTURE
    } else if prompt.contains("CONSISTENT") {
        VC_FIXTURE
    } else {
        VQ_FIXTURE
    }
}

pub fn bank_questions(sample_id: &str) -> Vec<EvalQuestion> {
    Metric::ALL.iter().flat_map(|m| parse_qa_output(fixture(*m), *m, sample_id).unwrap()).collect()
}

pub struct Bench {
    _dir: TempDir,
    pub root: PathBuf,
    pub config_path: PathBuf,
    pub sample_ids: Vec<String>,
    pub models: Vec<String>,
}

impl Bench {
    /// `n` samples cycling through the dimensions, outputs for every model, QA bank written.
    pub fn new(n: usize, models: &[&str]) -> Self {
        Self::build(n, models, true, "")
    }

    /// Same bench with extra top-level TOML keys (placed before the judge table).
    pub fn with_config(n: usize, models: &[&str], extra: &str) -> Self {
        Self::build(n, models, true, extra)
    }

    /// No QA bank yet.
    pub fn unbanked(n: usize, models: &[&str]) -> Self {
        Self::build(n, models, false, "")
    }

    fn build(n: usize, models: &[&str], with_bank: bool, extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::create_dir_all(root.join("src")).unwrap();
        let mut records = Vec::new();
        let mut sample_ids = Vec::new();
        for i in 0..n {
            let dim = Dimension::ALL[i % Dimension::ALL.len()];
            let id = format!("s{i:02}");
            fs::write(root.join(format!("src/{id}.png")), format!("source pixels {i}")).unwrap();
            records.push(ManifestRecord {
                id: id.clone(),
                image: format!("src/{id}.png"),
                instruction: format!("Turn the figure into a chibi resin bust, variant {i}."),
                category: dim.category(),
                dimension: dim,
            });
            sample_ids.push(id);
        }
        jsonl::write_jsonl(&root.join("bench.jsonl"), &records).unwrap();
        for m in models {
            fs::create_dir_all(root.join("outputs").join(m)).unwrap();
            for id in &sample_ids {
                fs::write(root.join("outputs").join(m).join(format!("{id}.png")), format!("{m} edit of {id}")).unwrap();
            }
        }
        if with_bank {
            let qa: Vec<QaRecord> =
                sample_ids.iter().flat_map(|id| bank_questions(id)).map(|q| QaRecord::from(&q)).collect();
            jsonl::write_jsonl(&root.join("qa.jsonl"), &qa).unwrap();
        }
        let config = format!(
            "bench_manifest = \"bench.jsonl\"\nqa_bank = \"qa.jsonl\"\noutputs_root = \"outputs\"\nseed = 7\n{extra}\n\
             [judge]\nkind = \"mock\"\nmodel_name = \"mock-judge\"\n\n[judge.retry]\nmax_attempts = 2\nbase_backoff_ms = 1\n"
        );
        let config_path = root.join("creval.toml");
        fs::write(&config_path, config).unwrap();
        Bench { _dir: dir, root, config_path, sample_ids, models: models.iter().map(|m| m.to_string()).collect() }
    }

    pub fn config(&self) -> RunConfig {
        RunConfig::load(&self.config_path).unwrap()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn remove_output(&self, model: &str, sample: &str) {
        fs::remove_file(self.root.join("outputs").join(model).join(format!("{sample}.png"))).unwrap();
    }
}

/// Question text carried by a judge prompt.
pub fn question_text(prompt: &str) -> &str {
    let start = prompt.find("Question: ").expect("judge prompt carries a question") + "Question: ".len();
    prompt[start..].lines().next().unwrap_or_default().trim()
}

/// Questions of the fixture bank keyed by text (texts are unique within the bank).
pub fn questions_by_text() -> HashMap<String, EvalQuestion> {
    bank_questions("any").into_iter().map(|q| (q.text.clone(), q)).collect()
}

fn reply(a: Answer) -> String {
    match a {
        Answer::Yes => "Yes.".into(),
        Answer::No => "No.".into(),
    }
}

fn flip(a: Answer) -> Answer {
    match a {
        Answer::Yes => Answer::No,
        Answer::No => Answer::Yes,
    }
}

/// A judge whose answer to each bank question is `policy(question)`.
pub fn policy_judge(policy: impl Fn(&EvalQuestion) -> Answer + Send + Sync + 'static) -> MockBackend {
    let by_text = questions_by_text();
    MockBackend::from_fn(move |req: &JudgeRequest| {
        let q = by_text.get(question_text(&req.prompt)).expect("question from the fixture bank");
        Ok(reply(policy(q)))
    })
}

pub fn always_correct() -> MockBackend {
    policy_judge(|q| q.reference)
}

pub fn always_wrong() -> MockBackend {
    policy_judge(|q| flip(q.reference))
}

/// Wrong exactly on the weight-3 VC questions.
pub fn flip_heavy_vc() -> MockBackend {
    policy_judge(|q| if q.metric == Metric::Vc && q.weight == 3 { flip(q.reference) } else { q.reference })
}

/// Deterministic mixed answer that depends on the prompt and both images.
pub fn hashed_reply(req: &JudgeRequest) -> String {
    let mut material = req.prompt.clone();
    for img in &req.images {
        material.push_str(&img.sha256);
    }
    let h = sha256_hex(material.as_bytes());
    if h.as_bytes()[0].is_multiple_of(3) { "No, it does not.".into() } else { "Yes, it does.".into() }
}

pub fn hashed_judge() -> MockBackend {
    MockBackend::from_fn(|req: &JudgeRequest| Ok(hashed_reply(req)))
}

pub fn client(backend: &Arc<MockBackend>, cfg: &RunConfig) -> Arc<JudgeClient> {
    Arc::new(JudgeClient::new(backend.clone(), &cfg.judge, None).unwrap())
}

pub fn cached_client(backend: Arc<dyn creval_core::judge::JudgeBackend>, config: &BackendConfig, cache: &Path) -> Arc<JudgeClient> {
    let cache = DiskCache::open(cache).unwrap();
    Arc::new(JudgeClient::new(backend, config, Some(Arc::new(cache))).unwrap())
}

pub fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
