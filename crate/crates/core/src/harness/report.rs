//! `report`, `align` and `sweep-weights`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::pipeline::Unevaluated;
use super::{require, HarnessError, RunConfig};
use crate::alignment::{baseline_compare, load_blind_map, load_ratings, normalize_ratings, parse_score_columns, CorrelationRow, HumanScores, ScoreColumn};
use crate::decimal::format_exact;
use crate::jsonl;
use crate::model::{load_manifest, BenchmarkSample, Category, SampleScore, WeightTriple};
use crate::scoring::{aggregate, weight_sensitivity, MetricTriple, RankingResult, ScoreRow};

pub fn load_scores(path: &Path) -> Result<Vec<SampleScore>, HarnessError> {
    require(path, "score records")?;
    Ok(jsonl::read_jsonl(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportOutput {
    pub csv: String,
    pub markdown: String,
}

fn cells(row: &ScoreRow) -> [String; 4] {
    [row.s_if.report(), row.s_vc.report(), row.s_vq.report(), row.avg.report()]
}

/// CSV (`model,category,dimension,IF,VC,VQ,avg`) and Markdown tables, rows ordered by model id
/// then taxonomy. Each category is followed by its macro `average` row; `overall` rows come last.
pub fn render_report(
    scores: &[SampleScore],
    samples: &[BenchmarkSample],
    unevaluated: &[Unevaluated],
) -> Result<ReportOutput, HarnessError> {
    if scores.is_empty() {
        return Err(HarnessError::NoData("no score records to report".into()));
    }
    let agg = aggregate(scores, samples)?;
    let mut rows: Vec<(String, String, String, [String; 4], String)> = Vec::new();
    for (model, m) in &agg.models {
        for category in Category::ALL {
            for dim in category.dimensions() {
                if let Some(r) = m.dimensions.get(&dim) {
                    let n = m.dimension_counts[&dim].to_string();
                    rows.push((model.clone(), category.to_string(), dim.to_string(), cells(r), n));
                }
            }
            if let Some(r) = m.categories.get(&category) {
                rows.push((model.clone(), category.to_string(), "average".into(), cells(r), String::new()));
            }
        }
        let n = m.sample_count.to_string();
        rows.push((model.clone(), "overall".into(), "micro".into(), cells(&m.overall_micro), n));
        rows.push((model.clone(), "overall".into(), "macro".into(), cells(&m.overall_macro), String::new()));
    }

    let mut csv = String::from("model,category,dimension,IF,VC,VQ,avg\n");
    for (model, cat, dim, c, _) in &rows {
        writeln!(csv, "{},{cat},{dim},{}", csv_field(model), c.join(",")).expect("string write");
    }

    let mut md = String::from("| model | category | dimension | IF | VC | VQ | avg | n |\n|---|---|---|---:|---:|---:|---:|---:|\n");
    for (model, cat, dim, c, n) in &rows {
        let dim = if dim == "average" || cat == "overall" { format!("**{dim}**") } else { dim.clone() };
        writeln!(md, "| {model} | {cat} | {dim} | {} | {n} |", c.join(" | ")).expect("string write");
    }
    md.push_str("\nOverall `micro` averages all scored samples; `macro` averages the dimension values.\n");
    let mut notes = Vec::new();
    for (model, m) in &agg.models {
        if !m.missing_dimensions.is_empty() {
            let dims: Vec<String> = m.missing_dimensions.iter().map(|d| d.to_string()).collect();
            notes.push(format!("- {model}: no scored samples for {}", dims.join(", ")));
        }
    }
    let mut skipped: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for u in unevaluated {
        skipped.entry(&u.model_id).or_default().push(&u.sample_id);
    }
    for (model, ids) in skipped {
        notes.push(format!("- {model}: {} sample(s) unevaluated (missing or unreadable edited image): {}", ids.len(), ids.join(", ")));
    }
    if !notes.is_empty() {
        md.push_str("\nCoverage:\n");
        for n in notes {
            md.push_str(&n);
            md.push('\n');
        }
    }
    Ok(ReportOutput { csv, markdown: md })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `report.csv` and `report.md` into the run directory.
pub fn cmd_report(cfg: &RunConfig) -> Result<ReportOutput, HarnessError> {
    require(&cfg.bench_manifest, "bench_manifest")?;
    let scores = load_scores(&cfg.scores_path())?;
    let samples = load_manifest(&cfg.bench_manifest)?;
    let unevaluated: Vec<Unevaluated> =
        if cfg.unevaluated_path().exists() { jsonl::read_jsonl(&cfg.unevaluated_path())? } else { Vec::new() };
    let out = render_report(&scores, &samples, &unevaluated)?;
    jsonl::write_atomic(&cfg.run_dir.join("report.csv"), out.csv.as_bytes())?;
    jsonl::write_atomic(&cfg.run_dir.join("report.md"), out.markdown.as_bytes())?;
    Ok(out)
}

/// Per-model overall (micro) metric triple from score records.
fn overall_metrics(scores: &[SampleScore], samples: &[BenchmarkSample]) -> Result<BTreeMap<String, ScoreRow>, HarnessError> {
    Ok(aggregate(scores, samples)?.models.into_iter().map(|(k, m)| (k, m.overall_micro)).collect())
}

/// Reads `model,IF,VC,VQ` rows (header required).
pub fn load_metric_table(path: &Path) -> Result<BTreeMap<String, MetricTriple>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let columns = parse_score_columns(&text).map_err(|e| HarnessError::Input(format!("{}: {e}", path.display())))?;
    let col = |name: &str| {
        columns
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v)
            .ok_or_else(|| HarnessError::Input(format!("{}: missing column {name}", path.display())))
    };
    let (c_if, c_vc, c_vq) = (col("IF")?, col("VC")?, col("VQ")?);
    Ok(c_if
        .keys()
        .map(|m| {
            let p = |c: &ScoreColumn| crate::Percent::new(c[m].clone());
            (m.clone(), MetricTriple { s_if: p(c_if), s_vc: p(c_vc), s_vq: p(c_vq) })
        })
        .collect())
}

pub fn sweep_table(results: &[RankingResult]) -> String {
    let mut out = String::from("weights,rank,model,score,tied\n");
    for r in results {
        for (i, model) in r.ordering.iter().enumerate() {
            let tied = r.ties.iter().any(|g| g.contains(model));
            writeln!(out, "\"{}\",{},{},{},{tied}", r.weights, i + 1, csv_field(model), r.scores[model].report())
                .expect("string write");
        }
    }
    out
}

/// Ranks models under each weight triple, from a `model,IF,VC,VQ` table or the run's score records.
pub fn cmd_sweep_weights(
    cfg: &RunConfig,
    triples: &[WeightTriple],
    metrics_csv: Option<&Path>,
) -> Result<(Vec<RankingResult>, String), HarnessError> {
    let per_model = match metrics_csv {
        Some(p) => load_metric_table(p)?,
        None => {
            let samples = load_manifest(&cfg.bench_manifest)?;
            overall_metrics(&load_scores(&cfg.scores_path())?, &samples)?
                .into_iter()
                .map(|(m, r)| (m, MetricTriple { s_if: r.s_if, s_vc: r.s_vc, s_vq: r.s_vq }))
                .collect()
        }
    };
    let results = weight_sensitivity(&per_model, triples)?;
    let table = sweep_table(&results);
    if metrics_csv.is_none() {
        jsonl::write_atomic(&cfg.run_dir.join("weight_sweep.csv"), table.as_bytes())?;
    }
    Ok((results, table))
}

#[derive(Debug, Clone)]
pub struct AlignOutput {
    pub human: HumanScores,
    pub rows: Vec<CorrelationRow>,
    pub csv: String,
}

fn correlation_csv(rows: &[CorrelationRow]) -> String {
    let mut out = String::from("scorer,n,spearman_rho,spearman_exact,kendall_tau_b\n");
    for r in rows {
        let c = &r.correlation;
        let exact = c.spearman_exact.as_ref().map(format_exact).unwrap_or_default();
        writeln!(out, "{},{},{:.6},{exact},{:.6}", csv_field(&r.scorer), c.n, c.spearman_rho, c.kendall_tau_b)
            .expect("string write");
    }
    out
}

/// Correlates the run's overall scores (column `creval`) and any external columns with
/// normalized human ratings.
pub fn cmd_align(cfg: &RunConfig) -> Result<AlignOutput, HarnessError> {
    let ratings_path = cfg.ratings_path();
    let blind_path = cfg.blind_map_path();
    require(&ratings_path, "ratings")?;
    require(&blind_path, "blind map")?;
    let human = normalize_ratings(&load_ratings(&ratings_path)?, &load_blind_map(&blind_path)?)?;
    if human.table.is_empty() {
        return Err(HarnessError::NoData("no ratings".into()));
    }
    for m in &human.unrated {
        log::warn!("model {m} has no ratings and is left out");
    }

    let mut tables: BTreeMap<String, ScoreColumn> = BTreeMap::new();
    if cfg.scores_path().exists() {
        let samples = load_manifest(&cfg.bench_manifest)?;
        let overall = overall_metrics(&load_scores(&cfg.scores_path())?, &samples)?;
        tables.insert("creval".into(), overall.into_iter().map(|(m, r)| (m, r.avg.into_inner())).collect());
    }
    if let Some(path) = &cfg.align.external_scores {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let extra = parse_score_columns(&text).map_err(|e| HarnessError::Input(format!("{}: {e}", path.display())))?;
        tables.extend(extra);
    }
    if tables.is_empty() {
        return Err(HarnessError::NoData("no score columns: run evaluate or set align.external_scores".into()));
    }
    let rows = baseline_compare(&tables, &human.table)?;
    let csv = correlation_csv(&rows);

    let mut human_csv = String::from("model,human_score,exact\n");
    for (m, p) in &human.table {
        writeln!(human_csv, "{},{},{}", csv_field(m), p.report(), p.exact()).expect("string write");
    }
    let mut per_annotator = String::from("annotator,model,score\n");
    for (a, ms) in &human.per_annotator {
        for (m, p) in ms {
            writeln!(per_annotator, "{},{},{}", csv_field(a), csv_field(m), p.report()).expect("string write");
        }
    }
    jsonl::write_atomic(&cfg.run_dir.join("alignment.csv"), csv.as_bytes())?;
    jsonl::write_atomic(&cfg.run_dir.join("human_scores.csv"), human_csv.as_bytes())?;
    jsonl::write_atomic(&cfg.run_dir.join("human_scores_by_annotator.csv"), per_annotator.as_bytes())?;
    Ok(AlignOutput { human, rows, csv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dimension, ImageRef};
    use crate::Percent;

    fn sample(id: &str, dim: Dimension) -> BenchmarkSample {
        BenchmarkSample {
            id: id.into(),
            source_image: ImageRef { path: format!("{id}.png").into(), sha256: String::new() },
            instruction: "x".into(),
            dimension: dim,
        }
    }

    fn score(sample: &str, model: &str, v: [&str; 3]) -> SampleScore {
        let [a, b, c] = v.map(|s| Percent::parse(s).unwrap());
        let s = crate::scoring::combine(&a, &b, &c, &WeightTriple::standard()).unwrap();
        SampleScore { sample_id: sample.into(), model_id: model.into(), s_if: a, s_vc: b, s_vq: c, s_combined: s }
    }

    #[test]
    fn report_rows_and_determinism() {
        let samples = vec![sample("a", Dimension::ALL[0]), sample("b", Dimension::ALL[4])];
        let scores = vec![score("a", "qwen", ["85.82", "68.50", "90.26"]), score("b", "bagel", ["50", "50", "50"])];
        let out = render_report(&scores, &samples, &[]).unwrap();
        let lines: Vec<&str> = out.csv.lines().collect();
        assert_eq!(lines[0], "model,category,dimension,IF,VC,VQ,avg");
        assert!(lines[1].starts_with("bagel,"));
        let qwen_overall = lines.iter().find(|l| l.starts_with("qwen,overall,micro")).unwrap();
        assert!(qwen_overall.ends_with(",79.78"), "{qwen_overall}");
        assert_eq!(out, render_report(&scores, &samples, &[]).unwrap());
        assert!(out.markdown.contains("no scored samples for"));
    }

    #[test]
    fn empty_report_is_no_data() {
        assert!(matches!(render_report(&[], &[], &[]), Err(HarnessError::NoData(_))));
    }

    #[test]
    fn sweep_csv_marks_ties() {
        let mut per_model = BTreeMap::new();
        per_model.insert("a".to_string(), MetricTriple::parse("50", "50", "50").unwrap());
        per_model.insert("b".to_string(), MetricTriple::parse("50", "50", "50").unwrap());
        let r = weight_sensitivity(&per_model, &[WeightTriple::standard()]).unwrap();
        assert_eq!(sweep_table(&r), "weights,rank,model,score,tied\n\"0.4,0.4,0.2\",1,a,50.00,true\n\"0.4,0.4,0.2\",2,b,50.00,true\n");
    }
}
