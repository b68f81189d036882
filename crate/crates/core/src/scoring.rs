//! Deterministic scoring: answer parsing, weighted metric scores, the
//! IF/VC/VQ combination, taxonomy aggregation and weight sweeps.
//!
//! Everything here is pure and works on exact rationals.

use std::collections::{BTreeMap, HashMap, HashSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use thiserror::Error;

use crate::decimal::Percent;
use crate::model::{
    BenchmarkSample, Category, Dimension, EvalQuestion, Metric, MetricScore, ParsedAnswer, SampleScore, Verdict,
    WeightTriple,
};

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("no questions given for {0}")]
    NoQuestions(&'static str),
    #[error("questions mix metrics ({0} and {1})")]
    MixedMetrics(&'static str, &'static str),
    #[error("no verdict for question {0}")]
    MissingVerdict(String),
    #[error("duplicate verdict for question {0}")]
    DuplicateVerdict(String),
    #[error("verdict for unknown question {0}")]
    UnknownVerdict(String),
    #[error("score {0} outside [0, 100]")]
    OutOfRange(String),
    #[error("score references unknown sample {0}")]
    UnknownSample(String),
    #[error("need at least two models to rank, got {0}")]
    TooFewModels(usize),
}

/// First alphabetic token, lowercased: `yes` / `no`, anything else is unparseable.
pub fn parse_answer(raw: &str) -> ParsedAnswer {
    let token: String = raw
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .flat_map(char::to_lowercase)
        .collect();
    match token.as_str() {
        "yes" => ParsedAnswer::Yes,
        "no" => ParsedAnswer::No,
        _ => ParsedAnswer::Unparseable,
    }
}

/// `100 * Σ(wᵢ·matchᵢ) / Σwᵢ` over one metric's questions.
///
/// Verdicts must cover the questions exactly once each. Unparseable answers stay in
/// the denominator.
pub fn score_metric(questions: &[EvalQuestion], verdicts: &[Verdict]) -> Result<MetricScore, ScoringError> {
    let first = questions.first().ok_or(ScoringError::NoQuestions("metric"))?;
    let metric = first.metric;
    if let Some(q) = questions.iter().find(|q| q.metric != metric) {
        return Err(ScoringError::MixedMetrics(metric.label(), q.metric.label()));
    }
    let by_question: HashMap<&str, &EvalQuestion> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut earned = 0u64;
    for v in verdicts {
        let q = by_question
            .get(v.question_id.as_str())
            .ok_or_else(|| ScoringError::UnknownVerdict(v.question_id.clone()))?;
        if !seen.insert(&v.question_id) {
            return Err(ScoringError::DuplicateVerdict(v.question_id.clone()));
        }
        if v.parsed_answer.matches(q.reference) {
            earned += u64::from(q.weight);
        }
    }
    if let Some(q) = questions.iter().find(|q| !seen.contains(q.id.as_str())) {
        return Err(ScoringError::MissingVerdict(q.id.clone()));
    }
    let total: u64 = questions.iter().map(|q| u64::from(q.weight)).sum();
    Ok(MetricScore { metric, earned_weight: earned, total_weight: total, value: Percent::from_fraction(earned, total) })
}

/// Exact weighted average of the three metric scores.
pub fn combine(s_if: &Percent, s_vc: &Percent, s_vq: &Percent, weights: &WeightTriple) -> Result<Percent, ScoringError> {
    for s in [s_if, s_vc, s_vq] {
        if !s.in_range() {
            return Err(ScoringError::OutOfRange(s.exact()));
        }
    }
    Ok(combine_unchecked(s_if, s_vc, s_vq, weights))
}

fn combine_unchecked(s_if: &Percent, s_vc: &Percent, s_vq: &Percent, weights: &WeightTriple) -> Percent {
    Percent::new(
        weights.get(Metric::If) * s_if.value()
            + weights.get(Metric::Vc) * s_vc.value()
            + weights.get(Metric::Vq) * s_vq.value(),
    )
}

/// Scores one (sample, model) pair from that sample's questions and the judge verdicts.
pub fn score_sample(
    questions: &[EvalQuestion],
    verdicts: &[Verdict],
    model_id: &str,
    weights: &WeightTriple,
) -> Result<SampleScore, ScoringError> {
    let sample_id = questions.first().ok_or(ScoringError::NoQuestions("sample"))?.sample_id.clone();
    let metric_of: HashMap<&str, Metric> = questions.iter().map(|q| (q.id.as_str(), q.metric)).collect();
    let mut by_metric: HashMap<Metric, Vec<Verdict>> = HashMap::new();
    for v in verdicts {
        let metric = metric_of
            .get(v.question_id.as_str())
            .ok_or_else(|| ScoringError::UnknownVerdict(v.question_id.clone()))?;
        by_metric.entry(*metric).or_default().push(v.clone());
    }
    let mut scores = Vec::with_capacity(3);
    for metric in Metric::ALL {
        let qs: Vec<EvalQuestion> = questions.iter().filter(|q| q.metric == metric).cloned().collect();
        if qs.is_empty() {
            return Err(ScoringError::NoQuestions(metric.label()));
        }
        let vs = by_metric.remove(&metric).unwrap_or_default();
        scores.push(score_metric(&qs, &vs)?.value);
    }
    let [s_if, s_vc, s_vq]: [Percent; 3] = scores.try_into().expect("three metrics");
    let s_combined = combine(&s_if, &s_vc, &s_vq, weights)?;
    Ok(SampleScore { sample_id, model_id: model_id.to_string(), s_if, s_vc, s_vq, s_combined })
}

/// IF / VC / VQ / combined values for one report cell group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreRow {
    pub s_if: Percent,
    pub s_vc: Percent,
    pub s_vq: Percent,
    pub avg: Percent,
}

impl ScoreRow {
    pub fn from_sample(s: &SampleScore) -> Self {
        Self { s_if: s.s_if.clone(), s_vc: s.s_vc.clone(), s_vq: s.s_vq.clone(), avg: s.s_combined.clone() }
    }

    /// Column-wise arithmetic mean. `None` when `rows` is empty.
    pub fn mean<'a>(rows: impl IntoIterator<Item = &'a ScoreRow> + Clone) -> Option<ScoreRow> {
        Some(ScoreRow {
            s_if: Percent::mean(rows.clone().into_iter().map(|r| &r.s_if))?,
            s_vc: Percent::mean(rows.clone().into_iter().map(|r| &r.s_vc))?,
            s_vq: Percent::mean(rows.clone().into_iter().map(|r| &r.s_vq))?,
            avg: Percent::mean(rows.into_iter().map(|r| &r.avg))?,
        })
    }

    pub fn metric(&self, metric: Metric) -> &Percent {
        match metric {
            Metric::If => &self.s_if,
            Metric::Vc => &self.s_vc,
            Metric::Vq => &self.s_vq,
        }
    }
}

/// Macro average of a category: the plain mean of whichever of its dimension rows are present.
pub fn category_macro(dimensions: &BTreeMap<Dimension, ScoreRow>, category: Category) -> Option<ScoreRow> {
    let rows: Vec<&ScoreRow> = category.dimensions().filter_map(|d| dimensions.get(&d)).collect();
    ScoreRow::mean(rows.iter().copied())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelAggregate {
    pub model_id: String,
    pub dimensions: BTreeMap<Dimension, ScoreRow>,
    pub dimension_counts: BTreeMap<Dimension, usize>,
    pub categories: BTreeMap<Category, ScoreRow>,
    /// Mean over all scored samples.
    pub overall_micro: ScoreRow,
    /// Mean over the dimension rows.
    pub overall_macro: ScoreRow,
    /// Dimensions with no scored sample; omitted above rather than counted as zero.
    pub missing_dimensions: Vec<Dimension>,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregateReport {
    pub models: BTreeMap<String, ModelAggregate>,
}

/// Rolls sample scores up to dimension (mean of samples), category (mean of its dimensions)
/// and overall (micro over samples, plus the macro mean of dimensions).
pub fn aggregate(sample_scores: &[SampleScore], samples: &[BenchmarkSample]) -> Result<AggregateReport, ScoringError> {
    let dimension_of: HashMap<&str, Dimension> = samples.iter().map(|s| (s.id.as_str(), s.dimension)).collect();
    let mut grouped: BTreeMap<&str, BTreeMap<Dimension, Vec<ScoreRow>>> = BTreeMap::new();
    for s in sample_scores {
        let dim = dimension_of
            .get(s.sample_id.as_str())
            .ok_or_else(|| ScoringError::UnknownSample(s.sample_id.clone()))?;
        grouped.entry(&s.model_id).or_default().entry(*dim).or_default().push(ScoreRow::from_sample(s));
    }
    let mut report = AggregateReport::default();
    for (model_id, by_dim) in grouped {
        let dimensions: BTreeMap<Dimension, ScoreRow> =
            by_dim.iter().filter_map(|(d, rows)| ScoreRow::mean(rows.iter()).map(|r| (*d, r))).collect();
        let dimension_counts = by_dim.iter().map(|(d, rows)| (*d, rows.len())).collect();
        let categories =
            Category::ALL.iter().filter_map(|c| category_macro(&dimensions, *c).map(|r| (*c, r))).collect();
        let all_rows: Vec<&ScoreRow> = by_dim.values().flatten().collect();
        let overall_micro = ScoreRow::mean(all_rows.iter().copied()).expect("model has at least one sample");
        let overall_macro = ScoreRow::mean(dimensions.values()).expect("model has at least one dimension");
        let missing_dimensions = Dimension::ALL.iter().filter(|d| !dimensions.contains_key(d)).copied().collect();
        report.models.insert(
            model_id.to_string(),
            ModelAggregate {
                model_id: model_id.to_string(),
                dimensions,
                dimension_counts,
                categories,
                overall_micro,
                overall_macro,
                missing_dimensions,
                sample_count: all_rows.len(),
            },
        );
    }
    Ok(report)
}

/// The three metric scores of one model, input to a weight sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricTriple {
    pub s_if: Percent,
    pub s_vc: Percent,
    pub s_vq: Percent,
}

impl MetricTriple {
    pub fn parse(s_if: &str, s_vc: &str, s_vq: &str) -> Result<Self, crate::decimal::DecimalParseError> {
        Ok(Self { s_if: Percent::parse(s_if)?, s_vc: Percent::parse(s_vc)?, s_vq: Percent::parse(s_vq)? })
    }

    pub fn scaled(&self, factor: &BigRational) -> Self {
        let s = |p: &Percent| Percent::new(p.value() * factor);
        Self { s_if: s(&self.s_if), s_vc: s(&self.s_vc), s_vq: s(&self.s_vq) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub weights: WeightTriple,
    /// Model ids by combined score, descending; equal scores ordered by model id.
    pub ordering: Vec<String>,
    pub scores: BTreeMap<String, Percent>,
    /// Groups of models sharing an identical combined score.
    pub ties: Vec<Vec<String>>,
}

impl RankingResult {
    pub fn rank_of(&self, model_id: &str) -> Option<usize> {
        self.ordering.iter().position(|m| m == model_id)
    }
}

/// Ranks every model under each weight triple.
pub fn weight_sensitivity(
    per_model: &BTreeMap<String, MetricTriple>,
    triples: &[WeightTriple],
) -> Result<Vec<RankingResult>, ScoringError> {
    if per_model.len() < 2 {
        return Err(ScoringError::TooFewModels(per_model.len()));
    }
    triples
        .iter()
        .map(|w| {
            // Sweeps also accept scaled inputs, so only the lower bound is enforced here.
            let mut scores = BTreeMap::new();
            for (model, m) in per_model {
                for s in [&m.s_if, &m.s_vc, &m.s_vq] {
                    if s.value() < &BigRational::zero() {
                        return Err(ScoringError::OutOfRange(s.exact()));
                    }
                }
                scores.insert(model.clone(), combine_unchecked(&m.s_if, &m.s_vc, &m.s_vq, w));
            }
            let mut ordering: Vec<String> = scores.keys().cloned().collect();
            // BTreeMap keys are already lexicographic; a stable sort keeps that order for ties.
            ordering.sort_by(|a, b| scores[b].cmp(&scores[a]));
            let mut ties: Vec<Vec<String>> = Vec::new();
            for pair in ordering.windows(2) {
                if scores[&pair[0]] == scores[&pair[1]] {
                    match ties.last_mut() {
                        Some(group) if group.last() == Some(&pair[0]) => group.push(pair[1].clone()),
                        _ => ties.push(vec![pair[0].clone(), pair[1].clone()]),
                    }
                }
            }
            Ok(RankingResult { weights: w.clone(), ordering, scores, ties })
        })
        .collect()
}

pub fn ratio(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}
