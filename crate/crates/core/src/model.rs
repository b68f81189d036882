//! Shared domain types: the editing taxonomy, benchmark samples, evaluation
//! questions, judge verdicts and score records.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decimal::{format_exact, parse_rational, Percent};
use crate::jsonl::{self, JsonlError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown {kind} {value:?}")]
    UnknownName { kind: &'static str, value: String },
    #[error("sample {id}: dimension {dimension} belongs to {expected}, manifest says {found}")]
    CategoryMismatch { id: String, dimension: Dimension, expected: Category, found: Category },
    #[error("sample {0}: instruction is empty")]
    EmptyInstruction(String),
    #[error("duplicate sample ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("unreadable image {path}: {source}")]
    UnreadableImage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid question {id}: {reason}")]
    InvalidQuestion { id: String, reason: String },
    #[error("invalid weight triple: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

macro_rules! named_enum {
    ($kind:literal, $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ModelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    _ => Err(ModelError::UnknownName { kind: $kind, value: s.to_string() }),
                }
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Customization,
    Contextualization,
    Stylization,
}

named_enum!("category", Category {
    Customization => "customization",
    Contextualization => "contextualization",
    Stylization => "stylization",
});

impl Category {
    pub const ALL: [Category; 3] = [Category::Customization, Category::Contextualization, Category::Stylization];

    pub fn dimensions(self) -> impl Iterator<Item = Dimension> {
        Dimension::ALL.into_iter().filter(move |d| d.category() == self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dimension {
    DerivativeCharacters,
    ReimaginedRepresentations,
    SurrealFantasy,
    ContainerizedScenario,
    CommercialDesign,
    InformationalNarrativeExpression,
    ArtisticStyleTransformation,
    IdentityCulturalTransformation,
    MaterialTransformation,
}

named_enum!("dimension", Dimension {
    DerivativeCharacters => "derivative_characters",
    ReimaginedRepresentations => "reimagined_representations",
    SurrealFantasy => "surreal_fantasy",
    ContainerizedScenario => "containerized_scenario",
    CommercialDesign => "commercial_design",
    InformationalNarrativeExpression => "informational_narrative_expression",
    ArtisticStyleTransformation => "artistic_style_transformation",
    IdentityCulturalTransformation => "identity_cultural_transformation",
    MaterialTransformation => "material_transformation",
});

impl Dimension {
    /// Taxonomy order; also the row order of every report.
    pub const ALL: [Dimension; 9] = [
        Dimension::DerivativeCharacters,
        Dimension::ReimaginedRepresentations,
        Dimension::SurrealFantasy,
        Dimension::ContainerizedScenario,
        Dimension::CommercialDesign,
        Dimension::InformationalNarrativeExpression,
        Dimension::ArtisticStyleTransformation,
        Dimension::IdentityCulturalTransformation,
        Dimension::MaterialTransformation,
    ];

    pub fn category(self) -> Category {
        use Dimension::*;
        match self {
            DerivativeCharacters | ReimaginedRepresentations | SurrealFantasy => Category::Customization,
            ContainerizedScenario | CommercialDesign | InformationalNarrativeExpression => Category::Contextualization,
            ArtisticStyleTransformation | IdentityCulturalTransformation | MaterialTransformation => {
                Category::Stylization
            }
        }
    }

    /// Human-readable label used inside prompts.
    pub fn label(self) -> &'static str {
        use Dimension::*;
        match self {
            DerivativeCharacters => "Derivative Characters",
            ReimaginedRepresentations => "Reimagined Representations",
            SurrealFantasy => "Surreal Fantasy",
            ContainerizedScenario => "Containerized Scenario",
            CommercialDesign => "Commercial Design",
            InformationalNarrativeExpression => "Informational & Narrative Expression",
            ArtisticStyleTransformation => "Artistic Style Transformation",
            IdentityCulturalTransformation => "Identity & Cultural Transformation",
            MaterialTransformation => "Material Transformation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    If,
    Vc,
    Vq,
}

named_enum!("metric", Metric { If => "if", Vc => "vc", Vq => "vq" });

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::If, Metric::Vc, Metric::Vq];

    /// Upper-case label as used in tables and error messages ("IF").
    pub fn label(self) -> &'static str {
        match self {
            Metric::If => "IF",
            Metric::Vc => "VC",
            Metric::Vq => "VQ",
        }
    }

    pub fn allows_weight(self, weight: u8) -> bool {
        match self {
            Metric::Vc => (1..=3).contains(&weight),
            Metric::If | Metric::Vq => weight == 1,
        }
    }
}

/// A reference answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Answer {
    Yes,
    No,
}

named_enum!("answer", Answer { Yes => "yes", No => "no" });

/// What the judge said, after parsing its free text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParsedAnswer {
    Yes,
    No,
    Unparseable,
}

named_enum!("parsed answer", ParsedAnswer { Yes => "yes", No => "no", Unparseable => "unparseable" });

impl ParsedAnswer {
    /// An unparseable answer never matches.
    pub fn matches(self, reference: Answer) -> bool {
        matches!(
            (self, reference),
            (ParsedAnswer::Yes, Answer::Yes) | (ParsedAnswer::No, Answer::No)
        )
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// An image on disk identified by path and SHA-256 of its bytes. Pixels are never held.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl ImageRef {
    pub fn from_path(path: impl Into<PathBuf>) -> Result<Self, ModelError> {
        let path = path.into();
        let bytes = fs::read(&path).map_err(|source| ModelError::UnreadableImage { path: path.clone(), source })?;
        Ok(Self { sha256: sha256_hex(&bytes), path })
    }

    pub fn read_bytes(&self) -> Result<Vec<u8>, ModelError> {
        fs::read(&self.path).map_err(|source| ModelError::UnreadableImage { path: self.path.clone(), source })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkSample {
    pub id: String,
    pub source_image: ImageRef,
    pub instruction: String,
    pub dimension: Dimension,
}

impl BenchmarkSample {
    pub fn category(&self) -> Category {
        self.dimension.category()
    }
}

/// One manifest line, exactly as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub instruction: String,
    pub category: Category,
    pub dimension: Dimension,
}

impl ManifestRecord {
    pub fn from_sample(sample: &BenchmarkSample, base: &Path) -> Self {
        let image = sample.source_image.path.strip_prefix(base).unwrap_or(&sample.source_image.path);
        Self {
            id: sample.id.clone(),
            image: image.to_string_lossy().into_owned(),
            instruction: sample.instruction.clone(),
            category: sample.category(),
            dimension: sample.dimension,
        }
    }

    /// Checks record-level invariants and hashes the image (relative paths resolve against `base`).
    pub fn resolve(self, base: &Path) -> Result<BenchmarkSample, ModelError> {
        if self.dimension.category() != self.category {
            return Err(ModelError::CategoryMismatch {
                id: self.id,
                dimension: self.dimension,
                expected: self.dimension.category(),
                found: self.category,
            });
        }
        if self.instruction.trim().is_empty() {
            return Err(ModelError::EmptyInstruction(self.id));
        }
        Ok(BenchmarkSample {
            source_image: ImageRef::from_path(base.join(&self.image))?,
            id: self.id,
            instruction: self.instruction,
            dimension: self.dimension,
        })
    }
}

/// Loads a benchmark manifest, resolving image paths relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<BenchmarkSample>, ModelError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let records: Vec<ManifestRecord> = jsonl::read_jsonl(path)?;
    let samples = records.into_iter().map(|r| r.resolve(base)).collect::<Result<Vec<_>, _>>()?;
    let dups = duplicate_ids(&samples);
    if !dups.is_empty() {
        return Err(ModelError::DuplicateIds(dups));
    }
    Ok(samples)
}

pub fn write_manifest(path: &Path, samples: &[BenchmarkSample]) -> Result<(), ModelError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let records: Vec<_> = samples.iter().map(|s| ManifestRecord::from_sample(s, base)).collect();
    Ok(jsonl::write_jsonl(path, &records)?)
}

fn duplicate_ids(samples: &[BenchmarkSample]) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(&s.id).or_default() += 1;
    }
    counts.into_iter().filter(|(_, n)| *n > 1).map(|(id, _)| id.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditedOutput {
    pub sample_id: String,
    pub model_id: String,
    pub image: ImageRef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalQuestion {
    pub id: String,
    pub sample_id: String,
    pub metric: Metric,
    pub text: String,
    pub reference: Answer,
    pub weight: u8,
}

impl EvalQuestion {
    /// Builds a question, trimming the text and enforcing the weight domain of the metric.
    pub fn new(
        id: impl Into<String>,
        sample_id: impl Into<String>,
        metric: Metric,
        text: &str,
        reference: Answer,
        weight: u8,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        let text = text.trim();
        let invalid = |reason: String| ModelError::InvalidQuestion { id: id.clone(), reason };
        if text.is_empty() {
            return Err(invalid("empty text".into()));
        }
        if !text.ends_with('?') {
            return Err(invalid(format!("text does not end with '?': {text:?}")));
        }
        if !metric.allows_weight(weight) {
            return Err(invalid(format!("weight {weight} not allowed for {}", metric.label())));
        }
        Ok(Self { sample_id: sample_id.into(), metric, text: text.to_string(), reference, weight, id })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub question_id: String,
    pub sample_id: String,
    pub model_id: String,
    pub judge_id: String,
    pub raw_text: String,
    pub parsed_answer: ParsedAnswer,
    pub is_match: bool,
}

impl Verdict {
    /// `is_match` is derived from the question's reference, never supplied by the caller.
    pub fn new(
        question: &EvalQuestion,
        model_id: impl Into<String>,
        judge_id: impl Into<String>,
        raw_text: impl Into<String>,
        parsed_answer: ParsedAnswer,
    ) -> Self {
        Self {
            question_id: question.id.clone(),
            sample_id: question.sample_id.clone(),
            model_id: model_id.into(),
            judge_id: judge_id.into(),
            raw_text: raw_text.into(),
            is_match: parsed_answer.matches(question.reference),
            parsed_answer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricScore {
    pub metric: Metric,
    pub earned_weight: u64,
    pub total_weight: u64,
    pub value: Percent,
}

/// Coefficients of the IF/VC/VQ linear combination. Always sums to exactly one.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WeightTriple {
    w_if: BigRational,
    w_vc: BigRational,
    w_vq: BigRational,
}

impl WeightTriple {
    pub fn new(w_if: BigRational, w_vc: BigRational, w_vq: BigRational) -> Result<Self, ModelError> {
        if w_if.is_negative() || w_vc.is_negative() || w_vq.is_negative() {
            return Err(ModelError::InvalidWeights("weights must be nonnegative".into()));
        }
        let sum = &w_if + &w_vc + &w_vq;
        if !sum.is_one() {
            return Err(ModelError::InvalidWeights(format!("weights sum to {}, not 1", format_exact(&sum))));
        }
        Ok(Self { w_if, w_vc, w_vq })
    }

    /// The default 0.4 / 0.4 / 0.2 split.
    pub fn standard() -> Self {
        let r = |n: i64| BigRational::new(n.into(), 10.into());
        Self { w_if: r(4), w_vc: r(4), w_vq: r(2) }
    }

    /// Accepts `"0.4,0.4,0.2"` (must sum to one) or a ratio `"4:4:2"` (normalised).
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let bad = || ModelError::InvalidWeights(format!("cannot parse {text:?}"));
        let (sep, ratio) = if text.contains(':') { (':', true) } else { (',', false) };
        let parts = text
            .split(sep)
            .map(|p| parse_rational(p).map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        let [a, b, c]: [BigRational; 3] = parts.try_into().map_err(|_| bad())?;
        if ratio {
            let total = &a + &b + &c;
            if total.is_zero() || a.is_negative() || b.is_negative() || c.is_negative() {
                return Err(ModelError::InvalidWeights(format!("degenerate ratio {text:?}")));
            }
            Self::new(a / &total, b / &total, c / &total)
        } else {
            Self::new(a, b, c)
        }
    }

    pub fn get(&self, metric: Metric) -> &BigRational {
        match metric {
            Metric::If => &self.w_if,
            Metric::Vc => &self.w_vc,
            Metric::Vq => &self.w_vq,
        }
    }
}

impl Default for WeightTriple {
    fn default() -> Self {
        Self::standard()
    }
}

impl fmt::Display for WeightTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", format_exact(&self.w_if), format_exact(&self.w_vc), format_exact(&self.w_vq))
    }
}

/// Per (sample, model) scores. Serialized as one score-record line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub model_id: String,
    pub s_if: Percent,
    pub s_vc: Percent,
    pub s_vq: Percent,
    #[serde(rename = "s")]
    pub s_combined: Percent,
}

impl SampleScore {
    pub fn metric(&self, metric: Metric) -> &Percent {
        match metric {
            Metric::If => &self.s_if,
            Metric::Vc => &self.s_vc,
            Metric::Vq => &self.s_vq,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub counts: BTreeMap<Dimension, usize>,
    pub mean_count: f64,
    /// Dimensions with no samples at all.
    pub missing: Vec<Dimension>,
    /// Dimensions whose count deviates from the mean by more than the threshold ratio.
    pub imbalanced: Vec<Dimension>,
}

impl BalanceReport {
    pub fn is_balanced(&self) -> bool {
        self.missing.is_empty() && self.imbalanced.is_empty()
    }
}

pub const DEFAULT_BALANCE_RATIO: f64 = 0.25;

/// Counts samples per dimension and flags coverage gaps, imbalance and duplicate ids.
pub fn validate_manifest(samples: &[BenchmarkSample], max_deviation: f64) -> Result<BalanceReport, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyManifest);
    }
    let dups = duplicate_ids(samples);
    if !dups.is_empty() {
        return Err(ModelError::DuplicateIds(dups));
    }
    let mut by_dim: HashMap<Dimension, usize> = HashMap::new();
    for s in samples {
        *by_dim.entry(s.dimension).or_default() += 1;
    }
    let counts: BTreeMap<Dimension, usize> =
        Dimension::ALL.iter().map(|d| (*d, by_dim.get(d).copied().unwrap_or(0))).collect();
    let mean_count = samples.len() as f64 / Dimension::ALL.len() as f64;
    let missing = counts.iter().filter(|(_, n)| **n == 0).map(|(d, _)| *d).collect();
    let imbalanced = counts
        .iter()
        .filter(|(_, n)| **n > 0 && ((**n as f64 - mean_count).abs() / mean_count) > max_deviation)
        .map(|(d, _)| *d)
        .collect();
    Ok(BalanceReport { counts, mean_count, missing, imbalanced })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn sample(id: &str, dimension: Dimension) -> BenchmarkSample {
        BenchmarkSample {
            id: id.into(),
            source_image: ImageRef { path: format!("{id}.png").into(), sha256: sha256_hex(id.as_bytes()) },
            instruction: format!("edit {id}"),
            dimension,
        }
    }

    #[test]
    fn taxonomy_closure() {
        assert_eq!(Category::ALL.len(), 3);
        assert_eq!(Dimension::ALL.len(), 9);
        for c in Category::ALL {
            assert_eq!(c.dimensions().count(), 3, "{c}");
        }
        let mut seen: Vec<_> = Category::ALL.iter().flat_map(|c| c.dimensions()).collect();
        seen.sort();
        let mut all = Dimension::ALL.to_vec();
        all.sort();
        assert_eq!(seen, all);
    }

    #[test]
    fn names_round_trip() {
        for d in Dimension::ALL {
            assert_eq!(d.as_str().parse::<Dimension>().unwrap(), d);
        }
        for m in Metric::ALL {
            assert_eq!(m.label().parse::<Metric>().unwrap(), m);
        }
        assert!("painting".parse::<Dimension>().is_err());
    }

    #[test]
    fn match_is_pure_over_all_combinations() {
        let cases = [
            (ParsedAnswer::Yes, Answer::Yes, true),
            (ParsedAnswer::Yes, Answer::No, false),
            (ParsedAnswer::No, Answer::Yes, false),
            (ParsedAnswer::No, Answer::No, true),
            (ParsedAnswer::Unparseable, Answer::Yes, false),
            (ParsedAnswer::Unparseable, Answer::No, false),
        ];
        for (parsed, reference, expected) in cases {
            let q = EvalQuestion::new("q", "s", Metric::If, "Ok?", reference, 1).unwrap();
            let v = Verdict::new(&q, "m", "j", "raw", parsed);
            assert_eq!(v.is_match, expected, "{parsed:?} vs {reference:?}");
            assert_eq!(parsed.matches(reference), expected);
        }
    }

    #[test]
    fn question_invariants() {
        assert!(EvalQuestion::new("q", "s", Metric::Vc, "  Kept?  ", Answer::Yes, 3).is_ok());
        assert_eq!(EvalQuestion::new("q", "s", Metric::Vc, "  Kept?  ", Answer::Yes, 3).unwrap().text, "Kept?");
        assert!(EvalQuestion::new("q", "s", Metric::Vc, "Kept?", Answer::Yes, 4).is_err());
        assert!(EvalQuestion::new("q", "s", Metric::If, "Kept?", Answer::Yes, 2).is_err());
        assert!(EvalQuestion::new("q", "s", Metric::Vq, "Kept.", Answer::Yes, 1).is_err());
        assert!(EvalQuestion::new("q", "s", Metric::Vq, "   ", Answer::Yes, 1).is_err());
    }

    #[test]
    fn uniform_manifest_is_balanced() {
        let samples: Vec<_> = Dimension::ALL
            .iter()
            .flat_map(|d| (0..10).map(move |i| sample(&format!("{d}-{i}"), *d)))
            .collect();
        let report = validate_manifest(&samples, DEFAULT_BALANCE_RATIO).unwrap();
        assert!(report.is_balanced());
        assert!(report.counts.values().all(|n| *n == 10));
    }

    #[test]
    fn missing_dimension_is_flagged() {
        let samples: Vec<_> = Dimension::ALL[1..]
            .iter()
            .flat_map(|d| (0..10).map(move |i| sample(&format!("{d}-{i}"), *d)))
            .collect();
        let report = validate_manifest(&samples, DEFAULT_BALANCE_RATIO).unwrap();
        assert_eq!(report.missing, vec![Dimension::DerivativeCharacters]);
        assert!(!report.is_balanced());
    }

    #[test]
    fn skewed_dimension_is_flagged() {
        let mut samples: Vec<_> = Dimension::ALL
            .iter()
            .flat_map(|d| (0..10).map(move |i| sample(&format!("{d}-{i}"), *d)))
            .collect();
        samples.extend((10..30).map(|i| sample(&format!("extra-{i}"), Dimension::SurrealFantasy)));
        let report = validate_manifest(&samples, DEFAULT_BALANCE_RATIO).unwrap();
        assert_eq!(report.imbalanced, vec![Dimension::SurrealFantasy]);
    }

    #[test]
    fn duplicate_ids_are_errors() {
        let samples = vec![sample("a", Dimension::SurrealFantasy), sample("a", Dimension::CommercialDesign)];
        match validate_manifest(&samples, DEFAULT_BALANCE_RATIO) {
            Err(ModelError::DuplicateIds(ids)) => assert_eq!(ids, vec!["a".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(validate_manifest(&[], 0.25), Err(ModelError::EmptyManifest)));
    }

    #[test]
    fn manifest_round_trip_and_category_check() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"pixels").unwrap();
        let path = dir.path().join("bench.jsonl");
        fs::write(
            &path,
            r#"{"id":"a","image":"a.png","instruction":"Make it a snow globe.","category":"contextualization","dimension":"containerized_scenario"}"#,
        )
        .unwrap();
        let samples = load_manifest(&path).unwrap();
        assert_eq!(samples[0].source_image.sha256, sha256_hex(b"pixels"));
        // hash is stable across reads
        assert_eq!(load_manifest(&path).unwrap(), samples);

        let out = dir.path().join("copy.jsonl");
        write_manifest(&out, &samples).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap().trim(), fs::read_to_string(&path).unwrap().trim());

        fs::write(
            &path,
            r#"{"id":"a","image":"a.png","instruction":"x","category":"stylization","dimension":"containerized_scenario"}"#,
        )
        .unwrap();
        assert!(matches!(load_manifest(&path), Err(ModelError::CategoryMismatch { .. })));
    }

    #[test]
    fn weight_triples() {
        assert_eq!(WeightTriple::parse("0.4,0.4,0.2").unwrap(), WeightTriple::standard());
        assert_eq!(WeightTriple::parse("4:4:2").unwrap(), WeightTriple::standard());
        assert_eq!(WeightTriple::standard().to_string(), "0.4,0.4,0.2");
        assert!(WeightTriple::parse("0.4,0.4,0.3").is_err());
        assert!(WeightTriple::parse("1.2,-0.1,-0.1").is_err());
        assert!(WeightTriple::parse("0.5,0.5").is_err());
        assert!(WeightTriple::parse("1:1:1").is_ok());
    }

    proptest! {
        #[test]
        fn metric_score_value_in_range(total in 1u64..10_000, frac in 0.0f64..=1.0) {
            let earned = ((total as f64) * frac).floor() as u64;
            prop_assert!(Percent::from_fraction(earned.min(total), total).in_range());
        }
    }
}
