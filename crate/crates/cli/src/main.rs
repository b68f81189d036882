//! `creval`: generate question banks, judge edited images, score, report and align.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use creval_core::harness::annotate::AnnotationState;
use creval_core::harness::{self, Overrides, RunConfig};
use creval_core::model::{load_manifest, validate_manifest, WeightTriple, DEFAULT_BALANCE_RATIO};
use creval_core::qagen::read_banks;

#[derive(Debug, Parser)]
#[command(name = "creval", version, about = "QA-based evaluation of creative image edits")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "creval.toml")]
    config: PathBuf,
    /// Comma-separated model ids to restrict the run to.
    #[arg(long, global = true, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Weight triple `IF,VC,VQ` (or a ratio `a:b:c`). Repeatable for sweep-weights.
    #[arg(long, global = true)]
    weights: Vec<String>,
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the config, manifest balance, question banks and output coverage.
    Validate {
        /// Allowed relative deviation of a dimension's sample count from the mean.
        #[arg(long, default_value_t = DEFAULT_BALANCE_RATIO)]
        max_deviation: f64,
    },
    /// Generate editing instructions for the configured source images.
    GenInstructions,
    /// Generate question banks for samples that lack a valid one.
    GenQa,
    /// Judge every question for every (sample, model) pair and write score records.
    Evaluate,
    /// Aggregate score records into report.csv and report.md.
    Report,
    /// Correlate scores with normalized human ratings.
    Align,
    /// Rank models under several weight triples.
    SweepWeights {
        /// `model,IF,VC,VQ` table to rank instead of the run's score records.
        #[arg(long)]
        metrics_csv: Option<PathBuf>,
    },
    /// Serve the blind rating API and UI assets.
    ServeAnnotation {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Dump the response cache as a replay file.
    ExportReplay {
        #[arg(long)]
        out: PathBuf,
    },
}

const DEFAULT_SWEEP: [&str; 5] = ["0.4,0.4,0.2", "1,0,0", "0,1,0", "0,0,1", "1:1:1"];

fn load_config(cli: &Cli, single_weight: bool) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)?;
    let weights = if single_weight {
        match cli.weights.as_slice() {
            [] => None,
            [w] => Some(WeightTriple::parse(w)?),
            _ => bail!("--weights may be given only once for this command"),
        }
    } else {
        None
    };
    cfg.apply(Overrides {
        models: cli.models.clone(),
        weights,
        concurrency: cli.concurrency,
        cache_dir: cli.cache_dir.clone(),
        seed: cli.seed,
    })?;
    Ok(cfg)
}

/// Returns the number of problems found.
fn validate(cfg: &RunConfig, max_deviation: f64) -> Result<usize> {
    let mut problems = 0;
    let samples = load_manifest(&cfg.bench_manifest)
        .with_context(|| format!("manifest {}", cfg.bench_manifest.display()))?;
    let balance = validate_manifest(&samples, max_deviation)?;
    println!("manifest: {} samples", samples.len());
    for (dim, n) in &balance.counts {
        println!("  {dim:<36} {n}");
    }
    if !balance.missing.is_empty() {
        problems += balance.missing.len();
        for d in &balance.missing {
            println!("  missing dimension: {d}");
        }
    }
    for d in &balance.imbalanced {
        problems += 1;
        println!("  imbalanced dimension: {d} (mean {:.2})", balance.mean_count);
    }

    if cfg.qa_bank.exists() {
        let banks = read_banks(&cfg.qa_bank)?;
        let mut valid = 0;
        for s in &samples {
            match banks.iter().find(|b| b.sample_id == s.id) {
                None => {
                    problems += 1;
                    println!("  no question bank: {}", s.id);
                }
                Some(b) => match b.validate() {
                    Ok(()) => valid += 1,
                    Err(e) => {
                        problems += 1;
                        println!("  {e}");
                    }
                },
            }
        }
        println!("question banks: {valid}/{} valid", samples.len());
    } else {
        println!("question banks: {} not found", cfg.qa_bank.display());
    }

    if cfg.outputs_root.exists() {
        for model in cfg.model_ids()? {
            let have = samples
                .iter()
                .filter(|s| harness::edited_image_path(&cfg.outputs_root, &model, &s.id).is_some())
                .count();
            println!("outputs: {model} {have}/{}", samples.len());
        }
    }
    Ok(problems)
}

async fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Validate { max_deviation } => {
            let cfg = load_config(&cli, true)?;
            let problems = validate(&cfg, *max_deviation)?;
            if problems > 0 {
                println!("{problems} problem(s)");
                return Ok(ExitCode::FAILURE);
            }
            println!("ok");
        }
        Command::GenInstructions => {
            let cfg = load_config(&cli, true)?;
            let n = harness::cmd_gen_instructions(&cfg).await?;
            println!("wrote {n} samples to {}", cfg.bench_manifest.display());
        }
        Command::GenQa => {
            let cfg = load_config(&cli, true)?;
            let summary = harness::cmd_gen_qa(&cfg).await?;
            println!(
                "generated {}, skipped {}, failed {}",
                summary.generated.len(),
                summary.skipped.len(),
                summary.failed.len()
            );
            for (id, err) in &summary.failed {
                eprintln!("{id}: {err}");
            }
            if !summary.failed.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Evaluate => {
            let cfg = load_config(&cli, true)?;
            let s = harness::cmd_evaluate(&cfg).await?;
            println!(
                "queried {}, reused {}, unparseable {}, failed {}, scored {}, unevaluated {}",
                s.queried,
                s.reused,
                s.unparseable,
                s.failed.len(),
                s.scored,
                s.unevaluated.len()
            );
            for u in &s.unevaluated {
                eprintln!("unevaluated {}/{}: {}", u.model_id, u.sample_id, u.reason);
            }
            if !s.failed.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report => {
            let cfg = load_config(&cli, true)?;
            let out = harness::cmd_report(&cfg)?;
            print!("{}", out.markdown);
        }
        Command::Align => {
            let cfg = load_config(&cli, true)?;
            let out = harness::cmd_align(&cfg)?;
            print!("{}", out.csv);
        }
        Command::SweepWeights { metrics_csv } => {
            let cfg = load_config(&cli, false)?;
            let texts: Vec<&str> =
                if cli.weights.is_empty() { DEFAULT_SWEEP.to_vec() } else { cli.weights.iter().map(String::as_str).collect() };
            let triples = texts.iter().map(|w| WeightTriple::parse(w)).collect::<Result<Vec<_>, _>>()?;
            let (_, table) = harness::cmd_sweep_weights(&cfg, &triples, metrics_csv.as_deref())?;
            print!("{table}");
        }
        Command::ServeAnnotation { bind } => {
            let cfg = load_config(&cli, true)?;
            let bind = bind.clone().unwrap_or_else(|| cfg.annotation.bind.clone());
            let state = AnnotationState::from_config(&cfg)?;
            harness::annotate::serve(state, &bind).await?;
        }
        Command::ExportReplay { out } => {
            let cfg = load_config(&cli, true)?;
            let cache = creval_core::judge::DiskCache::open(&cfg.cache_dir)
                .with_context(|| format!("cache {}", cfg.cache_dir.display()))?;
            let records = cache.export_replay()?;
            creval_core::jsonl::write_jsonl(out, &records)?;
            println!("exported {} responses", records.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli).await {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
