use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use signstitch_core::dataset::write_records;
use signstitch_core::glossnorm::{collapse_fingerspell, detokenize, normalize, tokenize};
use signstitch_core::pipeline::{Pipeline, PipelineConfig};
use signstitch_core::retrieval::{load_corpus, Gazetteer, RetrievalConfig, Retriever};
use signstitch_core::synth::{synth_generate, SynthSpec};
use signstitch_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Config {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("SIGNSTITCH_WORKERS must be a non-negative integer, got {0:?}")]
    Workers(String),
}

#[derive(Parser)]
#[command(
    name = "signstitch",
    version,
    about = "Compose isolated sign clips into continuous sentence motion"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; falls back to SIGNSTITCH_WORKERS, then all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Word-level records (JSON or JSONL); requires --dialogues.
    #[arg(long)]
    words: Option<PathBuf>,
    #[arg(long)]
    dialogues: Option<PathBuf>,
    /// Accept records with unknown keys.
    #[arg(long)]
    lenient: bool,
    /// Rerun even if the manifest says the stage is current.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    Ingest(RunArgs),
    Qc(RunArgs),
    Trim(RunArgs),
    TrainDuration(RunArgs),
    TrainBraid(RunArgs),
    Compose(RunArgs),
    Stitch(RunArgs),
    Eval(RunArgs),
    /// Run every stage in order, resuming from the manifest.
    Pipeline(RunArgs),
    /// Write a synthetic corpus as words.jsonl and dialogues.jsonl.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML synthetic corpus spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Normalize gloss lines from a file or stdin.
    Glossnorm {
        input: Option<PathBuf>,
        #[arg(long)]
        collapse_fingerspell: bool,
        /// Print classified tokens as JSON instead of normalized text.
        #[arg(long)]
        tokens: bool,
    },
    /// Retrieve few-shot examples for a query from a JSONL corpus.
    Retrieve {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 6)]
        k: usize,
    },
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|source| CliError::Config {
        path: path.to_path_buf(),
        source,
    })
}

fn env_workers() -> Result<Option<usize>, CliError> {
    match std::env::var("SIGNSTITCH_WORKERS") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| CliError::Workers(v)),
        Err(_) => Ok(None),
    }
}

fn pipeline_config(a: &RunArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg: PipelineConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(d) = &a.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(w) = a.workers.map(Some).unwrap_or(env_workers()?) {
        cfg.workers = w;
    }
    if a.words.is_some() || a.dialogues.is_some() {
        cfg.words = a.words.clone();
        cfg.dialogues = a.dialogues.clone();
    }
    if a.lenient {
        cfg.strict = false;
    }
    Ok(cfg)
}

fn run_stage(stage: &str, a: &RunArgs) -> Result<(), CliError> {
    let p = Pipeline::new(pipeline_config(a)?)?;
    let ran = p.run_stage(stage, !a.force)?;
    let m = p.manifest();
    let rec = m.stage(stage).expect("recorded");
    let status = if ran { "done" } else { "current, skipped" };
    eprintln!(
        "{stage}: {status} ({:.1}s) -> {}",
        rec.seconds,
        p.dir(stage).display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Ingest(a) => run_stage("ingest", &a),
        Cmd::Qc(a) => run_stage("qc", &a),
        Cmd::Trim(a) => run_stage("trim", &a),
        Cmd::TrainDuration(a) => run_stage("train-duration", &a),
        Cmd::TrainBraid(a) => run_stage("train-braid", &a),
        Cmd::Compose(a) => run_stage("compose", &a),
        Cmd::Stitch(a) => run_stage("stitch", &a),
        Cmd::Eval(a) => {
            run_stage("eval", &a)?;
            let p = Pipeline::new(pipeline_config(&a)?)?;
            println!("{}", serde_json::to_string_pretty(&p.report()?)?);
            Ok(())
        }
        Cmd::Pipeline(a) => {
            let p = Pipeline::new(pipeline_config(&a)?)?;
            for s in signstitch_core::pipeline::STAGES {
                let ran = p.run_stage(s, !a.force)?;
                eprintln!("{s}: {}", if ran { "done" } else { "current, skipped" });
            }
            println!("{}", serde_json::to_string_pretty(&p.report()?)?);
            Ok(())
        }
        Cmd::Synth { out, spec, seed } => {
            let mut spec: SynthSpec = match spec {
                Some(p) => read_toml(&p)?,
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let corpus = synth_generate(&spec)?;
            std::fs::create_dir_all(&out)?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("words.jsonl"))?);
            write_records(&mut w, &corpus.words)?;
            let mut d =
                std::io::BufWriter::new(std::fs::File::create(out.join("dialogues.jsonl"))?);
            write_records(&mut d, &corpus.dialogues)?;
            eprintln!(
                "{} word records, {} dialogues -> {}",
                corpus.words.len(),
                corpus.dialogues.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Glossnorm {
            input,
            collapse_fingerspell: collapse,
            tokens,
        } => {
            let mut text = String::new();
            match input {
                Some(p) => text = std::fs::read_to_string(p)?,
                None => {
                    std::io::stdin().read_to_string(&mut text)?;
                }
            }
            let mut out = std::io::stdout().lock();
            for line in text.as_bytes().lines() {
                let toks = tokenize(&line?);
                if tokens {
                    writeln!(out, "{}", serde_json::to_string(&toks)?)?;
                    continue;
                }
                let mut n = normalize(&toks);
                if collapse {
                    n = collapse_fingerspell(&n);
                }
                writeln!(out, "{}", detokenize(&n))?;
            }
            Ok(())
        }
        Cmd::Retrieve { corpus, query, k } => {
            let docs = load_corpus(&corpus)?;
            let cfg = RetrievalConfig {
                k_out: k,
                ..RetrievalConfig::default()
            };
            let r = Retriever::with_stubs(
                &docs,
                Box::new(Gazetteer {
                    entries: Vec::new(),
                }),
                cfg,
            );
            let res = r.retrieve(&query)?;
            let hits: Vec<serde_json::Value> = res
                .hits
                .iter()
                .map(|h| {
                    serde_json::json!({
                        "id": docs[h.doc].id,
                        "english": docs[h.doc].english,
                        "gloss": docs[h.doc].gloss,
                        "score": h.s_final,
                    })
                })
                .collect();
            println!(
                "{}",
                serde_json::to_string_pretty(
                    &serde_json::json!({ "hits": hits, "short": res.short })
                )?
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
