//! `gen-instructions`, `gen-qa` and `evaluate`.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tokio::task::JoinSet;

use super::ledger::{Ledger, LedgerEntry};
use super::{require, HarnessError, RunConfig};
use crate::judge::{prompt_hash, JudgeClient};
use crate::jsonl;
use crate::model::{load_manifest, write_manifest, BenchmarkSample, Dimension, EvalQuestion, ImageRef, ParsedAnswer, SampleScore};
use crate::qagen::{
    build_qa_bank, generate_instruction, read_banks, render_judge_prompt, GenerationTrace, PromptSet, QaBank, QaRecord,
    TemplateName,
};
use crate::scoring::{parse_answer, score_sample};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "webp", "gif"];
const REQUERY_SUFFIX: &str = "\nReply with exactly one word: Yes or No.\n";

/// Runs futures concurrently (bounded by the judge client's permits) and returns results in input order.
async fn run_all<T, F>(futures: Vec<F>) -> Vec<T>
where
    F: Future<Output = T> + Send + 'static,
    T: Send + 'static,
{
    let n = futures.len();
    let mut set = JoinSet::new();
    for (i, f) in futures.into_iter().enumerate() {
        set.spawn(async move { (i, f.await) });
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    while let Some(joined) = set.join_next().await {
        match joined {
            Ok((i, v)) => out[i] = Some(v),
            Err(e) => std::panic::resume_unwind(e.into_panic()),
        }
    }
    out.into_iter().map(|v| v.expect("every task joined")).collect()
}

/// One line of the `gen-instructions` image list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionSource {
    pub id: String,
    pub image: PathBuf,
    pub dimension: Dimension,
}

#[derive(Debug, Serialize)]
struct InstructionProvenance<'a> {
    sample_id: &'a str,
    instruction: &'a str,
    judge_id: &'a str,
    prompt_hash: &'a str,
    cache_key: &'a str,
}

/// Writes the benchmark manifest from an image list and per-dimension examples.
/// Samples already present in the manifest keep their instruction. Returns how many were generated.
pub async fn cmd_gen_instructions(cfg: &RunConfig) -> Result<usize, HarnessError> {
    let icfg = cfg
        .instructions
        .as_ref()
        .ok_or_else(|| HarnessError::Input("gen-instructions needs an [instructions] section".into()))?;
    require(&icfg.images, "image list")?;
    require(&icfg.examples, "examples file")?;
    let sources: Vec<InstructionSource> = jsonl::read_jsonl(&icfg.images)?;
    let examples_text = std::fs::read_to_string(&icfg.examples).map_err(|e| HarnessError::io(&icfg.examples, e))?;
    let raw_examples: BTreeMap<String, Vec<String>> = serde_json::from_str(&examples_text)
        .map_err(|e| HarnessError::Input(format!("{}: {e}", icfg.examples.display())))?;
    let mut examples: HashMap<Dimension, Vec<String>> = HashMap::new();
    for (k, v) in raw_examples {
        examples.insert(k.parse()?, v);
    }

    let existing: HashMap<String, BenchmarkSample> = if cfg.bench_manifest.exists() {
        load_manifest(&cfg.bench_manifest)?.into_iter().map(|s| (s.id.clone(), s)).collect()
    } else {
        HashMap::new()
    };
    let base = icfg.images.parent().unwrap_or(Path::new("."));
    let client = Arc::new(cfg.generator_client()?);
    let prompts = Arc::new(cfg.prompts()?);

    let mut jobs = Vec::new();
    for src in &sources {
        if existing.contains_key(&src.id) {
            continue;
        }
        let image = ImageRef::from_path(base.join(&src.image))?;
        let ex = examples.get(&src.dimension).cloned().unwrap_or_default();
        let (client, prompts, src) = (client.clone(), prompts.clone(), src.clone());
        jobs.push(async move {
            let got = generate_instruction(&image, src.dimension, &ex, &client, &prompts).await;
            (src, image, got)
        });
    }
    let results = run_all(jobs).await;
    let generated = results.len();
    let mut fresh = HashMap::new();
    let mut provenance = Vec::new();
    for (src, image, got) in results {
        let got = got.map_err(|e| HarnessError::Sample { sample_id: src.id.clone(), source: Box::new(e.into()) })?;
        provenance.push(
            serde_json::to_string(&InstructionProvenance {
                sample_id: &src.id,
                instruction: &got.instruction,
                judge_id: &got.judge_id,
                prompt_hash: &got.prompt_hash,
                cache_key: &got.cache_key,
            })
            .expect("serializable"),
        );
        fresh.insert(
            src.id.clone(),
            BenchmarkSample { id: src.id, source_image: image, instruction: got.instruction, dimension: src.dimension },
        );
    }
    let samples: Vec<BenchmarkSample> = sources
        .iter()
        .filter_map(|s| existing.get(&s.id).or_else(|| fresh.get(&s.id)).cloned())
        .collect();
    write_manifest(&cfg.bench_manifest, &samples)?;
    append_lines(&cfg.run_dir.join("instructions.jsonl"), &provenance)?;
    Ok(generated)
}

fn append_lines(path: &Path, lines: &[String]) -> Result<(), HarnessError> {
    use std::io::Write;
    if lines.is_empty() {
        return Ok(());
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut buf = String::new();
    for l in lines {
        buf.push_str(l);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| HarnessError::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenQaSummary {
    pub generated: Vec<String>,
    pub skipped: Vec<String>,
    /// `(sample_id, error)`.
    pub failed: Vec<(String, String)>,
}

#[derive(Debug, Serialize)]
struct TraceLine<'a> {
    sample_id: &'a str,
    #[serde(flatten)]
    trace: &'a GenerationTrace,
}

/// Builds a question bank for every manifest sample without a valid one, then rewrites the
/// bank file in manifest order. Failures are listed in `<run_dir>/qa_failures.jsonl`.
pub async fn cmd_gen_qa(cfg: &RunConfig) -> Result<GenQaSummary, HarnessError> {
    require(&cfg.bench_manifest, "bench_manifest")?;
    let samples = load_manifest(&cfg.bench_manifest)?;
    let mut have: HashMap<String, QaBank> = HashMap::new();
    if cfg.qa_bank.exists() {
        for bank in read_banks(&cfg.qa_bank)? {
            if bank.validate().is_ok() {
                have.insert(bank.sample_id.clone(), bank);
            } else {
                log::warn!("existing bank for {} is invalid and will be regenerated", bank.sample_id);
            }
        }
    }

    let mut summary = GenQaSummary::default();
    let todo: Vec<&BenchmarkSample> = samples.iter().filter(|s| !have.contains_key(&s.id)).collect();
    summary.skipped = samples.iter().filter(|s| have.contains_key(&s.id)).map(|s| s.id.clone()).collect();
    if !todo.is_empty() {
        let client = Arc::new(cfg.generator_client()?);
        let prompts = Arc::new(cfg.prompts()?);
        let retries = cfg.qa_retries;
        let jobs: Vec<_> = todo
            .iter()
            .map(|s| {
                let (client, prompts, sample) = (client.clone(), prompts.clone(), (*s).clone());
                async move {
                    let out = build_qa_bank(&sample, &client, &prompts, retries).await;
                    (sample.id, out)
                }
            })
            .collect();
        let mut traces = Vec::new();
        let mut failures = Vec::new();
        for (id, out) in run_all(jobs).await {
            match out {
                Ok(o) => {
                    traces.extend(o.traces.iter().map(|t| {
                        serde_json::to_string(&TraceLine { sample_id: &id, trace: t }).expect("serializable")
                    }));
                    summary.generated.push(id.clone());
                    have.insert(id, o.bank);
                }
                Err(e) => {
                    failures.push(serde_json::json!({"sample_id": id, "error": e.to_string()}).to_string());
                    summary.failed.push((id, e.to_string()));
                }
            }
        }
        append_lines(&cfg.run_dir.join("qa_trace.jsonl"), &traces)?;
        let fail_path = cfg.run_dir.join("qa_failures.jsonl");
        if failures.is_empty() {
            if fail_path.exists() {
                std::fs::remove_file(&fail_path).map_err(|e| HarnessError::io(&fail_path, e))?;
            }
        } else {
            std::fs::create_dir_all(&cfg.run_dir).map_err(|e| HarnessError::io(&cfg.run_dir, e))?;
            jsonl::write_atomic(&fail_path, (failures.join("\n") + "\n").as_bytes())?;
        }
    }

    let records: Vec<QaRecord> = samples
        .iter()
        .filter_map(|s| have.get(&s.id))
        .flat_map(|b| b.questions.iter().map(QaRecord::from))
        .collect();
    if summary.generated.is_empty() && cfg.qa_bank.exists() {
        // nothing new: leave the file untouched
        return Ok(summary);
    }
    jsonl::write_jsonl(&cfg.qa_bank, &records)?;
    Ok(summary)
}

/// `<outputs_root>/<model_id>/<sample_id>.<ext>`, first existing extension wins.
pub fn edited_image_path(outputs_root: &Path, model_id: &str, sample_id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| outputs_root.join(model_id).join(format!("{sample_id}.{ext}")))
        .find(|p| p.is_file())
}

/// A (sample, model) pair left out of scoring.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Unevaluated {
    pub model_id: String,
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalSummary {
    /// Judge calls made in this run.
    pub queried: usize,
    /// Verdicts taken from the existing ledger.
    pub reused: usize,
    /// Verdicts (old or new) whose answer could not be parsed; they score as misses.
    pub unparseable: usize,
    /// Judge failures, one message per question; these pairs stay unscored until a rerun.
    pub failed: Vec<String>,
    pub scored: usize,
    pub unevaluated: Vec<Unevaluated>,
}

struct Job {
    sample_id: String,
    model_id: String,
    question: EvalQuestion,
    prompt: String,
    images: Vec<ImageRef>,
}

async fn run_job(job: Job, client: Arc<JudgeClient>, ledger: Arc<Ledger>, requery: bool) -> Result<LedgerEntry, String> {
    let label = format!("{}/{}/{}", job.model_id, job.sample_id, job.question.id);
    let ctx = |e: &dyn std::fmt::Display| format!("{label}: {e}");
    let mut request = client.request(job.prompt.clone(), job.images.clone());
    let mut response = client.submit(&request).await.map_err(|e| ctx(&e))?;
    let mut parsed = parse_answer(&response.raw_text);
    let mut requeried = false;
    if parsed == ParsedAnswer::Unparseable && requery {
        request = client.request(format!("{}{REQUERY_SUFFIX}", job.prompt), job.images.clone());
        response = client.submit(&request).await.map_err(|e| ctx(&e))?;
        parsed = parse_answer(&response.raw_text);
        requeried = true;
    }
    let entry = LedgerEntry {
        sample_id: job.sample_id,
        model_id: job.model_id,
        question_id: job.question.id.clone(),
        metric: job.question.metric,
        judge_id: client.judge_id().to_string(),
        raw_text: response.raw_text,
        parsed_answer: parsed,
        is_match: parsed.matches(job.question.reference),
        prompt_hash: prompt_hash(&request.prompt),
        cache_key: client.cache_key(&request).to_string(),
        from_cache: response.from_cache,
        requeried,
    };
    ledger.append(&entry).map_err(|e| ctx(&e))?;
    Ok(entry)
}

fn load_banks_for(cfg: &RunConfig, samples: &[BenchmarkSample]) -> Result<HashMap<String, QaBank>, HarnessError> {
    let banks: HashMap<String, QaBank> = read_banks(&cfg.qa_bank)?.into_iter().map(|b| (b.sample_id.clone(), b)).collect();
    let missing: Vec<&str> = samples.iter().filter(|s| !banks.contains_key(&s.id)).map(|s| s.id.as_str()).collect();
    if !missing.is_empty() {
        return Err(HarnessError::Input(format!("no question bank for samples: {}", missing.join(", "))));
    }
    for s in samples {
        banks[&s.id].validate()?;
    }
    Ok(banks)
}

/// Judges every question for every (sample, model) pair not already in the ledger, then
/// recomputes all score records from the ledger.
pub async fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalSummary, HarnessError> {
    require(&cfg.bench_manifest, "bench_manifest")?;
    require(&cfg.qa_bank, "qa_bank")?;
    require(&cfg.outputs_root, "outputs_root")?;
    let client = Arc::new(cfg.judge_client()?);
    evaluate_with(cfg, client).await
}

/// [`cmd_evaluate`] with a caller-supplied judge client.
pub async fn evaluate_with(cfg: &RunConfig, client: Arc<JudgeClient>) -> Result<EvalSummary, HarnessError> {
    let samples = load_manifest(&cfg.bench_manifest)?;
    let banks = load_banks_for(cfg, &samples)?;
    let models = cfg.model_ids()?;
    if models.is_empty() {
        return Err(HarnessError::NoData(format!("no model outputs under {}", cfg.outputs_root.display())));
    }
    let prompts: PromptSet = cfg.prompts()?;
    let judge_template = prompts.get(TemplateName::JudgeAnswer);

    let (ledger, entries) = Ledger::open(&cfg.ledger_path())?;
    let ledger = Arc::new(ledger);
    let mut latest: HashMap<(String, String, String), LedgerEntry> = HashMap::new();
    for e in entries {
        latest.insert(e.key(), e);
    }

    let mut summary = EvalSummary::default();
    let mut evaluable: Vec<(String, String)> = Vec::new();
    let mut jobs = Vec::new();
    for model in &models {
        for sample in &samples {
            let Some(path) = edited_image_path(&cfg.outputs_root, model, &sample.id) else {
                summary.unevaluated.push(Unevaluated {
                    model_id: model.clone(),
                    sample_id: sample.id.clone(),
                    reason: "missing edited image".into(),
                });
                continue;
            };
            let edited = match ImageRef::from_path(&path) {
                Ok(img) => img,
                Err(e) => {
                    summary.unevaluated.push(Unevaluated {
                        model_id: model.clone(),
                        sample_id: sample.id.clone(),
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            evaluable.push((model.clone(), sample.id.clone()));
            for q in &banks[&sample.id].questions {
                let key = (sample.id.clone(), model.clone(), q.id.clone());
                match latest.get(&key) {
                    Some(e) if !(cfg.requery_unparseable && e.parsed_answer == ParsedAnswer::Unparseable) => {
                        summary.reused += 1;
                    }
                    _ => jobs.push(Job {
                        sample_id: sample.id.clone(),
                        model_id: model.clone(),
                        question: q.clone(),
                        prompt: render_judge_prompt(judge_template, sample, q)?,
                        images: vec![sample.source_image.clone(), edited.clone()],
                    }),
                }
            }
        }
    }

    summary.queried = jobs.len();
    let requery = cfg.requery_unparseable;
    let futures: Vec<_> = jobs.into_iter().map(|j| run_job(j, client.clone(), ledger.clone(), requery)).collect();
    for result in run_all(futures).await {
        match result {
            Ok(entry) => {
                latest.insert(entry.key(), entry);
            }
            Err(msg) => {
                log::error!("{msg}");
                summary.failed.push(msg);
            }
        }
    }
    summary.failed.sort();

    evaluable.sort();
    let mut scores: Vec<SampleScore> = Vec::new();
    for (model, sample_id) in &evaluable {
        let bank = &banks[sample_id];
        let verdicts: Option<Vec<_>> = bank
            .questions
            .iter()
            .map(|q| latest.get(&(sample_id.clone(), model.clone(), q.id.clone())).map(|e| e.verdict(q)))
            .collect();
        let Some(verdicts) = verdicts else { continue };
        summary.unparseable += verdicts.iter().filter(|v| v.parsed_answer == ParsedAnswer::Unparseable).count();
        scores.push(score_sample(&bank.questions, &verdicts, model, &cfg.weights)?);
    }
    summary.scored = scores.len();
    summary.unevaluated.sort();
    jsonl::write_jsonl(&cfg.scores_path(), &scores)?;
    jsonl::write_jsonl(&cfg.unevaluated_path(), &summary.unevaluated)?;
    Ok(summary)
}
