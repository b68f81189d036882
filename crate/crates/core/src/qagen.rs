//! Instruction and evaluation-question generation.
//!
//! Prompts are rendered from templates, sent to a judge together with the source
//! image, and the numbered free-text reply is parsed into [`EvalQuestion`]s.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::judge::{prompt_hash, JudgeClient, JudgeError};
use crate::model::{Answer, BenchmarkSample, Dimension, EvalQuestion, ImageRef, Metric, ModelError};

pub const MIN_QUESTIONS_PER_METRIC: usize = 5;
pub const MIN_QUESTIONS_TOTAL: usize = 15;
pub const DEFAULT_QA_RETRIES: u32 = 2;

#[derive(Debug, Error)]
pub enum QaGenError {
    #[error("template {template}: unbound placeholder {{{placeholder}}}")]
    UnboundPlaceholder { template: TemplateName, placeholder: String },
    #[error("{} output line {line_no}: {reason}: {line:?}", metric.label())]
    Parse { metric: Metric, line_no: usize, line: String, reason: String },
    #[error("no {} questions found in output: {raw:?}", metric.label())]
    NoQuestions { metric: Metric, raw: String },
    #[error("question bank for {sample_id} is invalid: {}", deficits.join("; "))]
    InvalidBank { sample_id: String, deficits: Vec<String> },
    #[error("no few-shot examples for dimension {0}")]
    NoExamples(Dimension),
    #[error("judge returned an empty instruction for {0}")]
    EmptyInstruction(String),
    #[error("prompt file {path}: {source}")]
    PromptFile { path: String, source: std::io::Error },
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateName {
    InstructionGen,
    IfQuestions,
    VcQuestions,
    VqQuestions,
    JudgeAnswer,
}

impl TemplateName {
    pub const ALL: [TemplateName; 5] = [
        TemplateName::InstructionGen,
        TemplateName::IfQuestions,
        TemplateName::VcQuestions,
        TemplateName::VqQuestions,
        TemplateName::JudgeAnswer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::InstructionGen => "instruction_gen",
            TemplateName::IfQuestions => "if_questions",
            TemplateName::VcQuestions => "vc_questions",
            TemplateName::VqQuestions => "vq_questions",
            TemplateName::JudgeAnswer => "judge_answer",
        }
    }

    pub fn for_metric(metric: Metric) -> Self {
        match metric {
            Metric::If => TemplateName::IfQuestions,
            Metric::Vc => TemplateName::VcQuestions,
            Metric::Vq => TemplateName::VqQuestions,
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ModelError::UnknownName { kind: "template", value: s.to_string() })
    }
}

const INSTRUCTION_GEN: &str = "\
You are designing creative image-editing tasks.
Look at the attached image and write ONE new editing instruction for the dimension \"{dimension}\".
The instruction must be imaginative yet feasible, refer to concrete content in the image, and state
what should change as well as what should stay recognisable.

Examples of instructions for this dimension:
{examples}

Reply with the instruction only, as a single paragraph, without numbering, quotes or commentary.
";

const IF_QUESTIONS: &str = "\
The attached image will be edited with this instruction:
\"{instruction}\"

Write yes/no questions that check whether an edited image FOLLOWS the instruction.
Each question must target one concrete requirement of the instruction and be answerable
by looking at the edited image. Write at least 5 questions.

Output format, one question per line and nothing else:
Q1: <question ending with ?> Answer: Yes
Q2: <question ending with ?> Answer: Yes
Use \"Answer: No\" only when the correct edit should make the answer No.
";

const VC_QUESTIONS: &str = "\
The attached image will be edited with this instruction:
\"{instruction}\"

Write yes/no questions that check whether an edited image stays CONSISTENT with the original:
identity, key objects, colours, layout and details that the instruction does not ask to change.
Write at least 5 questions, and rate how important each preserved element is:
Weight: 3 for essential elements, Weight: 2 for clearly visible secondary elements,
Weight: 1 for minor details.

Output format, one question per line and nothing else. Every line MUST end with \"Weight: N\"
where N is 1, 2 or 3:
Q1: <question ending with ?> Answer: Yes Weight: 3
Q2: <question ending with ?> Answer: Yes Weight: 1
";

const VQ_QUESTIONS: &str = "\
The attached image will be edited with this instruction:
\"{instruction}\"

Write yes/no questions that check the VISUAL QUALITY of the edited result: plausible structure
and anatomy, clean textures, no artifacts, distortions, missing parts or broken geometry in the
regions the instruction affects. Write at least 5 questions.

Output format, one question per line and nothing else:
Q1: <question ending with ?> Answer: Yes
Q2: <question ending with ?> Answer: Yes
";

const JUDGE_ANSWER: &str = "\
The first image is the original and the second image is the result of editing it with
this instruction:
\"{instruction}\"

Answer the question about the edited (second) image. Start your reply with Yes or No.

Question: {question}
";

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"));

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(name: TemplateName, body: impl Into<String>) -> Self {
        Self { name, body: body.into() }
    }

    pub fn builtin(name: TemplateName) -> Self {
        let body = match name {
            TemplateName::InstructionGen => INSTRUCTION_GEN,
            TemplateName::IfQuestions => IF_QUESTIONS,
            TemplateName::VcQuestions => VC_QUESTIONS,
            TemplateName::VqQuestions => VQ_QUESTIONS,
            TemplateName::JudgeAnswer => JUDGE_ANSWER,
        };
        Self::new(name, body)
    }

    pub fn placeholders(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for cap in PLACEHOLDER.captures_iter(&self.body) {
            let p = cap[1].to_string();
            if !seen.contains(&p) {
                seen.push(p);
            }
        }
        seen
    }

    /// Substitutes every `{name}`; single pass, so bound values are never re-expanded.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, QaGenError> {
        if let Some(missing) = self.placeholders().into_iter().find(|p| !bindings.contains_key(p.as_str())) {
            return Err(QaGenError::UnboundPlaceholder { template: self.name, placeholder: missing });
        }
        Ok(PLACEHOLDER.replace_all(&self.body, |cap: &regex::Captures| bindings[&cap[1]].clone()).into_owned())
    }
}

/// The five templates in use, built-in unless overridden from a directory of `<name>.txt` files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self { templates: TemplateName::ALL.into_iter().map(|n| (n, PromptTemplate::builtin(n))).collect() }
    }
}

impl PromptSet {
    pub fn with_overrides(dir: &Path) -> Result<Self, QaGenError> {
        let mut set = Self::default();
        for name in TemplateName::ALL {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let body = fs::read_to_string(&path)
                    .map_err(|source| QaGenError::PromptFile { path: path.display().to_string(), source })?;
                set.set(PromptTemplate::new(name, body));
            }
        }
        Ok(set)
    }

    pub fn set(&mut self, template: PromptTemplate) {
        self.templates.insert(template.name, template);
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }
}

fn sample_bindings(sample: &BenchmarkSample, metric: Option<Metric>) -> BTreeMap<&'static str, String> {
    let mut b = BTreeMap::new();
    b.insert("instruction", sample.instruction.clone());
    b.insert("dimension", sample.dimension.label().to_string());
    if let Some(m) = metric {
        b.insert("metric", m.label().to_string());
    }
    b
}

pub fn render_prompt(template: &PromptTemplate, sample: &BenchmarkSample, metric: Option<Metric>) -> Result<String, QaGenError> {
    template.render(&sample_bindings(sample, metric))
}

/// Prompt asking the judge to answer one question about `[source, edited]`.
pub fn render_judge_prompt(template: &PromptTemplate, sample: &BenchmarkSample, question: &EvalQuestion) -> Result<String, QaGenError> {
    let mut b = sample_bindings(sample, Some(question.metric));
    b.insert("question", question.text.clone());
    template.render(&b)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedInstruction {
    pub instruction: String,
    pub judge_id: String,
    pub prompt_hash: String,
    pub cache_key: String,
}

fn clean_instruction(raw: &str) -> String {
    let mut text = raw.trim();
    if text.len() >= 12 && text[..12].eq_ignore_ascii_case("instruction:") {
        text = text[12..].trim();
    }
    for (open, close) in [('"', '"'), ('\u{201c}', '\u{201d}')] {
        if text.len() >= 2 && text.starts_with(open) && text.ends_with(close) {
            text = text[open.len_utf8()..text.len() - close.len_utf8()].trim();
        }
    }
    text.to_string()
}

pub async fn generate_instruction(
    image: &ImageRef,
    dimension: Dimension,
    examples: &[String],
    client: &JudgeClient,
    prompts: &PromptSet,
) -> Result<GeneratedInstruction, QaGenError> {
    if examples.iter().all(|e| e.trim().is_empty()) {
        return Err(QaGenError::NoExamples(dimension));
    }
    let mut b = BTreeMap::new();
    b.insert("dimension", dimension.label().to_string());
    b.insert("examples", examples.iter().map(|e| format!("- {}", e.trim())).collect::<Vec<_>>().join("\n"));
    let prompt = prompts.get(TemplateName::InstructionGen).render(&b)?;
    let request = client.request(prompt, vec![image.clone()]);
    let response = client.submit(&request).await?;
    let instruction = clean_instruction(&response.raw_text);
    if instruction.is_empty() {
        return Err(QaGenError::EmptyInstruction(image.path.display().to_string()));
    }
    Ok(GeneratedInstruction {
        instruction,
        judge_id: client.judge_id().to_string(),
        prompt_hash: prompt_hash(&request.prompt),
        cache_key: client.cache_key(&request).to_string(),
    })
}

static NUMBERED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^[\s*#>-]*(?:q\s*(\d+)\s*[:.)]|(\d+)\s*[.)])\s*(.*)$").expect("valid regex")
});
static SUFFIX: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)[\s,;|(\[*]*\b(weight|answer)\s*[:=]\s*([^\s,;|)\]*]*)[\s)\]*.,;]*$").expect("valid regex")
});
static WEIGHT_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bweight\s*[:=]").expect("valid regex"));

/// Parses numbered questions (`Q1:`, `1.`, `1)`), with optional trailing
/// `Answer: Yes|No` and, for VC, a mandatory `Weight: N`.
///
/// Numbered lines that are not questions are skipped with a warning.
pub fn parse_qa_output(raw: &str, metric: Metric, sample_id: &str) -> Result<Vec<EvalQuestion>, QaGenError> {
    let mut out = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        let Some(cap) = NUMBERED.captures(line) else { continue };
        let err = |reason: String| QaGenError::Parse { metric, line_no, line: line.to_string(), reason };

        let mut text = cap[3].trim().trim_end_matches("**").trim().to_string();
        let mut weight: Option<String> = None;
        let mut answer: Option<String> = None;
        while let Some(m) = SUFFIX.captures(&text) {
            let value = m[2].to_string();
            let slot = if m[1].eq_ignore_ascii_case("weight") { &mut weight } else { &mut answer };
            if slot.is_some() {
                return Err(err(format!("repeated {} suffix", m[1].to_ascii_lowercase())));
            }
            *slot = Some(value);
            let start = m.get(0).expect("whole match").start();
            text.truncate(start);
            text = text.trim_end().to_string();
        }
        let text = text.trim().trim_start_matches("**").trim().to_string();

        if !text.ends_with('?') {
            log::warn!("{} output line {line_no} skipped, not a question: {line:?}", metric.label());
            continue;
        }
        if WEIGHT_TOKEN.is_match(&text) {
            return Err(err("misplaced weight annotation".into()));
        }
        let reference = match answer.as_deref().map(str::to_ascii_lowercase).as_deref() {
            None => Answer::Yes,
            Some("yes") => Answer::Yes,
            Some("no") => Answer::No,
            Some(other) => return Err(err(format!("answer must be Yes or No, got {other:?}"))),
        };
        let weight = match (metric, weight) {
            (Metric::Vc, None) => return Err(err("missing Weight: N".into())),
            (_, None) => 1,
            (_, Some(w)) => match w.parse::<u8>() {
                Ok(n) if metric.allows_weight(n) => n,
                _ if metric == Metric::Vc => return Err(err(format!("weight {w:?} outside 1..3"))),
                _ => return Err(err(format!("weight {w:?} not allowed for {}", metric.label()))),
            },
        };
        let id = format!("{sample_id}-{}-{}", metric.as_str(), out.len() + 1);
        out.push(EvalQuestion::new(id, sample_id, metric, &text, reference, weight)?);
    }
    if out.is_empty() {
        return Err(QaGenError::NoQuestions { metric, raw: raw.to_string() });
    }
    Ok(out)
}

/// Canonical text form accepted by [`parse_qa_output`].
pub fn serialize_qa(questions: &[EvalQuestion]) -> String {
    let mut s = String::new();
    for (i, q) in questions.iter().enumerate() {
        let answer = match q.reference {
            Answer::Yes => "Yes",
            Answer::No => "No",
        };
        s.push_str(&format!("Q{}: {} Answer: {answer}", i + 1, q.text));
        if q.metric == Metric::Vc {
            s.push_str(&format!(" Weight: {}", q.weight));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaBank {
    pub sample_id: String,
    pub questions: Vec<EvalQuestion>,
}

impl QaBank {
    pub fn questions_for(&self, metric: Metric) -> impl Iterator<Item = &EvalQuestion> {
        self.questions.iter().filter(move |q| q.metric == metric)
    }

    pub fn count(&self, metric: Metric) -> usize {
        self.questions_for(metric).count()
    }

    /// Invariant violations, e.g. `"IF: 4 < 5"`. Empty when valid.
    pub fn deficits(&self) -> Vec<String> {
        let mut out = Vec::new();
        for m in Metric::ALL {
            let n = self.count(m);
            if n < MIN_QUESTIONS_PER_METRIC {
                out.push(format!("{}: {n} < {MIN_QUESTIONS_PER_METRIC}", m.label()));
            }
        }
        if self.questions.len() < MIN_QUESTIONS_TOTAL {
            out.push(format!("total: {} < {MIN_QUESTIONS_TOTAL}", self.questions.len()));
        }
        let mut ids = HashSet::new();
        for q in &self.questions {
            if !ids.insert(q.id.as_str()) {
                out.push(format!("duplicate question id {}", q.id));
            }
            if q.sample_id != self.sample_id {
                out.push(format!("question {} belongs to sample {}", q.id, q.sample_id));
            }
            if !q.metric.allows_weight(q.weight) {
                out.push(format!("question {} has weight {}", q.id, q.weight));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), QaGenError> {
        let deficits = self.deficits();
        if deficits.is_empty() {
            Ok(())
        } else {
            Err(QaGenError::InvalidBank { sample_id: self.sample_id.clone(), deficits })
        }
    }
}

/// One judge call made while building a bank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GenerationTrace {
    pub metric: Metric,
    pub attempt: u32,
    pub prompt_hash: String,
    pub cache_key: String,
    pub from_cache: bool,
    pub questions: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BankOutcome {
    pub bank: QaBank,
    pub traces: Vec<GenerationTrace>,
}

fn retry_prompt(base: &str, attempt: u32) -> String {
    if attempt == 0 {
        base.to_string()
    } else {
        // a changed prompt gives a fresh cache key, so regeneration is not a cache hit
        format!("{base}\nThis is regeneration attempt {attempt}: write at least {MIN_QUESTIONS_PER_METRIC} well-formed questions.\n")
    }
}

/// Render, submit and parse each metric, regenerating up to `retries` times when a
/// metric yields too few questions or unparseable output.
pub async fn build_qa_bank(
    sample: &BenchmarkSample,
    client: &JudgeClient,
    prompts: &PromptSet,
    retries: u32,
) -> Result<BankOutcome, QaGenError> {
    let mut questions = Vec::new();
    let mut traces = Vec::new();
    for metric in Metric::ALL {
        let base = render_prompt(prompts.get(TemplateName::for_metric(metric)), sample, Some(metric))?;
        let mut best: Vec<EvalQuestion> = Vec::new();
        for attempt in 0..=retries {
            let request = client.request(retry_prompt(&base, attempt), vec![sample.source_image.clone()]);
            let response = client.submit(&request).await?;
            let parsed = parse_qa_output(&response.raw_text, metric, &sample.id);
            let mut trace = GenerationTrace {
                metric,
                attempt,
                prompt_hash: prompt_hash(&request.prompt),
                cache_key: client.cache_key(&request).to_string(),
                from_cache: response.from_cache,
                questions: 0,
                error: None,
            };
            match parsed {
                Ok(qs) => {
                    trace.questions = qs.len();
                    if qs.len() > best.len() {
                        best = qs;
                    }
                }
                Err(e) => {
                    log::warn!("sample {} {} attempt {attempt}: {e}", sample.id, metric.label());
                    trace.error = Some(e.to_string());
                }
            }
            traces.push(trace);
            if best.len() >= MIN_QUESTIONS_PER_METRIC {
                break;
            }
        }
        questions.extend(best);
    }
    let bank = QaBank { sample_id: sample.id.clone(), questions };
    bank.validate()?;
    Ok(BankOutcome { bank, traces })
}

/// One line of a QA bank file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub sample_id: String,
    pub question_id: String,
    pub metric: Metric,
    pub text: String,
    pub reference: Answer,
    pub weight: u8,
}

impl From<&EvalQuestion> for QaRecord {
    fn from(q: &EvalQuestion) -> Self {
        Self {
            sample_id: q.sample_id.clone(),
            question_id: q.id.clone(),
            metric: q.metric,
            text: q.text.clone(),
            reference: q.reference,
            weight: q.weight,
        }
    }
}

impl TryFrom<QaRecord> for EvalQuestion {
    type Error = ModelError;

    fn try_from(r: QaRecord) -> Result<Self, Self::Error> {
        EvalQuestion::new(r.question_id, r.sample_id, r.metric, &r.text, r.reference, r.weight)
    }
}

pub fn write_bank(path: &Path, bank: &QaBank) -> Result<(), QaGenError> {
    let records: Vec<QaRecord> = bank.questions.iter().map(QaRecord::from).collect();
    jsonl::write_jsonl(path, &records)?;
    Ok(())
}

/// Reads QA records, grouped per sample in order of first appearance.
pub fn read_banks(path: &Path) -> Result<Vec<QaBank>, QaGenError> {
    let records: Vec<QaRecord> = jsonl::read_jsonl(path)?;
    let mut banks: Vec<QaBank> = Vec::new();
    for r in records {
        let q = EvalQuestion::try_from(r)?;
        match banks.iter_mut().find(|b| b.sample_id == q.sample_id) {
            Some(b) => b.questions.push(q),
            None => banks.push(QaBank { sample_id: q.sample_id.clone(), questions: vec![q] }),
        }
    }
    Ok(banks)
}
