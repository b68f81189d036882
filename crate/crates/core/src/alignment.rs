//! Human-rating ingestion and rank agreement with automated scores.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use chrono::{DateTime, Utc};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decimal::{to_f64, Percent};
use crate::jsonl::{self, JsonlError};

pub const MAX_RATING: u8 = 5;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("rating {rating} outside 0..={MAX_RATING}")]
    RatingOutOfRange { rating: i64 },
    #[error("unknown blind ids: {}", .0.join(", "))]
    UnknownBlindIds(Vec<String>),
    #[error("model sets differ; only in first: [{}], only in second: [{}]", .left.join(", "), .right.join(", "))]
    KeyMismatch { left: Vec<String>, right: Vec<String> },
    #[error("need at least two models, got {0}")]
    TooFewModels(usize),
    #[error("scorer {scorer} lacks models: {}", .missing.join(", "))]
    CoverageGap { scorer: String, missing: Vec<String> },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("blind map {path}: {message}")]
    BlindMap { path: String, message: String },
}

/// One annotator's 0–5 rating of one anonymised output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    #[serde(rename = "annotator")]
    pub annotator_id: String,
    pub sample_id: String,
    pub blind_id: String,
    pub rating: u8,
    #[serde(rename = "ts")]
    pub timestamp: DateTime<Utc>,
}

impl RatingRecord {
    pub fn new(
        annotator_id: impl Into<String>,
        sample_id: impl Into<String>,
        blind_id: impl Into<String>,
        rating: i64,
        timestamp: DateTime<Utc>,
    ) -> Result<Self, AlignmentError> {
        let rating = u8::try_from(rating)
            .ok()
            .filter(|r| *r <= MAX_RATING)
            .ok_or(AlignmentError::RatingOutOfRange { rating })?;
        Ok(Self {
            annotator_id: annotator_id.into(),
            sample_id: sample_id.into(),
            blind_id: blind_id.into(),
            rating,
            timestamp,
        })
    }
}

pub fn load_ratings(path: &Path) -> Result<Vec<RatingRecord>, AlignmentError> {
    let records: Vec<RatingRecord> = jsonl::read_jsonl(path)?;
    if let Some(r) = records.iter().find(|r| r.rating > MAX_RATING) {
        return Err(AlignmentError::RatingOutOfRange { rating: r.rating.into() });
    }
    Ok(records)
}

/// Blind id → model id.
pub type BlindMap = BTreeMap<String, String>;

pub fn load_blind_map(path: &Path) -> Result<BlindMap, AlignmentError> {
    let err = |message: String| AlignmentError::BlindMap { path: path.display().to_string(), message };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

/// Keeps the latest rating per (annotator, sample, blind id). Equal timestamps: later record wins.
pub fn resolve_overwrites(records: &[RatingRecord]) -> Vec<RatingRecord> {
    let mut latest: BTreeMap<(&str, &str, &str), &RatingRecord> = BTreeMap::new();
    for r in records {
        let key = (r.annotator_id.as_str(), r.sample_id.as_str(), r.blind_id.as_str());
        match latest.get(&key) {
            Some(prev) if prev.timestamp > r.timestamp => {}
            _ => {
                latest.insert(key, r);
            }
        }
    }
    latest.into_values().cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HumanScores {
    /// Model id → 20 × mean rating.
    pub table: BTreeMap<String, Percent>,
    /// Models in the blind map that received no rating.
    pub unrated: Vec<String>,
    /// Annotator → model → 20 × that annotator's mean rating.
    pub per_annotator: BTreeMap<String, BTreeMap<String, Percent>>,
}

fn percent_of_mean(ratings: &[u8]) -> Percent {
    let sum: u64 = ratings.iter().map(|r| u64::from(*r)).sum();
    Percent::new(BigRational::new(BigInt::from(sum) * BigInt::from(20), BigInt::from(ratings.len())))
}

/// Maps blind ids to models, applies last-write-wins, and scales per-model mean ratings to 0–100.
pub fn normalize_ratings(records: &[RatingRecord], blind_map: &BlindMap) -> Result<HumanScores, AlignmentError> {
    let unknown: BTreeSet<String> =
        records.iter().filter(|r| !blind_map.contains_key(&r.blind_id)).map(|r| r.blind_id.clone()).collect();
    if !unknown.is_empty() {
        return Err(AlignmentError::UnknownBlindIds(unknown.into_iter().collect()));
    }
    let resolved = resolve_overwrites(records);
    let mut by_model: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    let mut by_annotator: BTreeMap<&str, BTreeMap<&str, Vec<u8>>> = BTreeMap::new();
    for r in &resolved {
        let model = blind_map[&r.blind_id].as_str();
        by_model.entry(model).or_default().push(r.rating);
        by_annotator.entry(&r.annotator_id).or_default().entry(model).or_default().push(r.rating);
    }
    let table: BTreeMap<String, Percent> =
        by_model.iter().map(|(m, rs)| (m.to_string(), percent_of_mean(rs))).collect();
    let models: BTreeSet<&String> = blind_map.values().collect();
    let unrated = models.into_iter().filter(|m| !table.contains_key(*m)).cloned().collect();
    let per_annotator = by_annotator
        .into_iter()
        .map(|(a, ms)| (a.to_string(), ms.into_iter().map(|(m, rs)| (m.to_string(), percent_of_mean(&rs))).collect()))
        .collect();
    Ok(HumanScores { table, unrated, per_annotator })
}

/// Model id → score on any scale.
pub type ScoreColumn = BTreeMap<String, BigRational>;

pub fn column_from_percent(table: &BTreeMap<String, Percent>) -> ScoreColumn {
    table.iter().map(|(k, v)| (k.clone(), v.value().clone())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub spearman_rho: f64,
    /// Set when neither side has ties: `1 − 6Σd²/(n(n²−1))` as an exact rational.
    pub spearman_exact: Option<BigRational>,
    pub kendall_tau_b: f64,
    pub n: usize,
}

/// Average (fractional) ranks, 1-based, ascending.
pub fn average_ranks(values: &[BigRational]) -> Vec<BigRational> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].cmp(&values[*b]));
    let mut ranks = vec![BigRational::zero(); values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // positions i..=j share the mean of ranks i+1..=j+1
        let avg = BigRational::new(BigInt::from(i + j + 2), BigInt::from(2));
        for k in i..=j {
            ranks[idx[k]] = avg.clone();
        }
        i = j + 1;
    }
    ranks
}

fn has_ties(values: &[BigRational]) -> bool {
    let set: BTreeSet<&BigRational> = values.iter().collect();
    set.len() != values.len()
}

fn pearson(x: &[BigRational], y: &[BigRational]) -> f64 {
    let n = BigRational::from_integer(BigInt::from(x.len()));
    let mx = x.iter().fold(BigRational::zero(), |a, b| a + b) / &n;
    let my = y.iter().fold(BigRational::zero(), |a, b| a + b) / &n;
    let mut sxy = BigRational::zero();
    let mut sxx = BigRational::zero();
    let mut syy = BigRational::zero();
    for (a, b) in x.iter().zip(y) {
        let dx = a - &mx;
        let dy = b - &my;
        sxy += &dx * &dy;
        sxx += &dx * &dx;
        syy += &dy * &dy;
    }
    if sxx.is_zero() || syy.is_zero() {
        return f64::NAN;
    }
    to_f64(&sxy) / (to_f64(&sxx) * to_f64(&syy)).sqrt()
}

fn kendall_tau_b(x: &[BigRational], y: &[BigRational]) -> f64 {
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            match (x[i].cmp(&x[j]), y[i].cmp(&y[j])) {
                (Ordering::Equal, Ordering::Equal) => {}
                (Ordering::Equal, _) => tie_x += 1,
                (_, Ordering::Equal) => tie_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let denom = (((concordant + discordant + tie_x) * (concordant + discordant + tie_y)) as f64).sqrt();
    if denom == 0.0 {
        f64::NAN
    } else {
        (concordant - discordant) as f64 / denom
    }
}

/// Spearman's ρ (average ranks for ties) and Kendall's τ-b over the shared model set.
pub fn spearman(x: &ScoreColumn, y: &ScoreColumn) -> Result<Correlation, AlignmentError> {
    let left: Vec<String> = x.keys().filter(|k| !y.contains_key(*k)).cloned().collect();
    let right: Vec<String> = y.keys().filter(|k| !x.contains_key(*k)).cloned().collect();
    if !left.is_empty() || !right.is_empty() {
        return Err(AlignmentError::KeyMismatch { left, right });
    }
    if x.len() < 2 {
        return Err(AlignmentError::TooFewModels(x.len()));
    }
    let xs: Vec<BigRational> = x.values().cloned().collect();
    let ys: Vec<BigRational> = x.keys().map(|k| y[k].clone()).collect();
    let rx = average_ranks(&xs);
    let ry = average_ranks(&ys);
    let spearman_exact = (!has_ties(&xs) && !has_ties(&ys)).then(|| {
        let n = BigInt::from(xs.len());
        let d2 = rx.iter().zip(&ry).fold(BigRational::zero(), |acc, (a, b)| acc + (a - b) * (a - b));
        let denom = BigRational::from_integer(&n * (&n * &n - BigInt::from(1)));
        BigRational::from_integer(1.into()) - BigRational::from_integer(6.into()) * d2 / denom
    });
    let spearman_rho = match &spearman_exact {
        Some(r) => to_f64(r),
        None => pearson(&rx, &ry),
    };
    Ok(Correlation { spearman_rho, spearman_exact, kendall_tau_b: kendall_tau_b(&xs, &ys), n: xs.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRow {
    pub scorer: String,
    pub correlation: Correlation,
}

/// One correlation row per scorer against the human table. Scorers must cover every human-rated model;
/// extra models in a scorer column are ignored.
pub fn baseline_compare(
    tables: &BTreeMap<String, ScoreColumn>,
    human: &BTreeMap<String, Percent>,
) -> Result<Vec<CorrelationRow>, AlignmentError> {
    let human_col = column_from_percent(human);
    tables
        .iter()
        .map(|(scorer, column)| {
            let missing: Vec<String> = human.keys().filter(|m| !column.contains_key(*m)).cloned().collect();
            if !missing.is_empty() {
                return Err(AlignmentError::CoverageGap { scorer: scorer.clone(), missing });
            }
            let restricted: ScoreColumn = human.keys().map(|m| (m.clone(), column[m].clone())).collect();
            Ok(CorrelationRow { scorer: scorer.clone(), correlation: spearman(&restricted, &human_col)? })
        })
        .collect()
}

/// Reads a wide CSV (`model,<scorer>,<scorer>...`) of external scorer columns.
pub fn parse_score_columns(csv_text: &str) -> Result<BTreeMap<String, ScoreColumn>, String> {
    let mut lines = csv_text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or("empty score table")?.split(',').map(str::trim).collect();
    if header.len() < 2 {
        return Err("score table needs a model column and at least one scorer".into());
    }
    let mut out: BTreeMap<String, ScoreColumn> = header[1..].iter().map(|h| (h.to_string(), ScoreColumn::new())).collect();
    let mut seen = HashMap::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(format!("row {}: expected {} cells, got {}", i + 2, header.len(), cells.len()));
        }
        if seen.insert(cells[0].to_string(), ()).is_some() {
            return Err(format!("row {}: duplicate model {}", i + 2, cells[0]));
        }
        for (name, cell) in header[1..].iter().zip(&cells[1..]) {
            let v = crate::decimal::parse_rational(cell).map_err(|e| format!("row {}: {e}", i + 2))?;
            out.get_mut(*name).expect("header column").insert(cells[0].to_string(), v);
        }
    }
    Ok(out)
}
