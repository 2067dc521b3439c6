use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use agentvote::config::{load_config_with, EnsembleConfig, Overrides};
use agentvote::corpus::{read_corpus, synthetic_records, write_corpus_csv, write_truth_csv};
use agentvote::pipeline::{self, evaluate, load_inputs, aggregate_agent_tables, partition, replay, run_pipeline, RunOptions};
use agentvote::prefilter::{compile_af_filter, compile_alt_filters, filter_audit, partition_corpus, write_audit_jsonl};
use agentvote::review::ReviewStore;
use agentvote::server::{serve, AppState};
use agentvote_core::metrics::threshold_curve;
use agentvote_core::sim::{generate_corpus, hallucination_audit};
use agentvote_core::vote::sweep;
use agentvote_core::{FinalLabel, TaskSchema};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agentvote", version, about = "Multi-agent LLM ensemble annotation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration (YAML).
    #[arg(long)]
    config: PathBuf,
    /// Override the run directory.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Override the primary vote threshold.
    #[arg(long)]
    k: Option<u32>,
    /// Mixed into every simulation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the ground-truth file.
    #[arg(long)]
    truth: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<EnsembleConfig> {
        let overrides = Overrides {
            run_dir: self.run_dir.clone(),
            min_votes: self.k,
            seed: self.seed,
            truth: self.truth.clone(),
        };
        Ok(load_config_with(&self.config, &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Keep per-request transcripts.
        #[arg(long)]
        transcripts: bool,
    },
    /// Split a corpus into relevant and screened-out cases.
    Filter {
        #[arg(long)]
        input: PathBuf,
        /// Partition CSV; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write filter disagreements as JSON lines.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Recompute votes and the final table from existing agent tables.
    Vote {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print metrics at the primary threshold.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the threshold curve as CSV.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Thresholds, e.g. 1,2,3; defaults to 1..=committee size.
        #[arg(long, value_delimiter = ',')]
        ks: Vec<u32>,
    },
    /// Print, as JSON lines, the cases on which the relevance filters
    /// disagree.
    Audit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Print the hallucination audit of a simulated run instead.
        #[arg(long)]
        hallucinations: bool,
    },
    /// Serve the review API.
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Environment variable holding the API token.
        #[arg(long)]
        token_env: Option<String>,
        /// Directory with a built review console.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Write a synthetic ECG corpus and its truth table.
    GenCorpus {
        #[arg(long)]
        n: usize,
        /// Proportions of AF, Non-AF, Uncertain.
        #[arg(long, value_delimiter = ',', default_value = "0.867,0.087,0.047")]
        mix: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { cfg, transcripts } => {
            let cfg = cfg.load()?;
            let out = run_pipeline(&cfg, &RunOptions { transcripts })?;
            print!("{}", pipeline::render_summary(&out.vote.summary));
            if let Some(m) = &out.vote.metrics {
                println!("accuracy\t{}", m.accuracy.map_or("undefined".into(), |a| format!("{a:.4}")));
            }
            println!("run\t{}\t{}", out.manifest.run_id, cfg.run_dir.display());
        }
        Command::Filter { input, output, audit } => {
            let corpus = read_corpus(&input)?;
            let main = compile_af_filter()?;
            let part = partition_corpus(&corpus, &main)?;
            let order: Vec<String> = corpus.iter().map(|r| r.case_id.clone()).collect();
            match output {
                Some(p) => part.write_csv(&order, std::fs::File::create(&p)?)?,
                None => part.write_csv(&order, io::stdout().lock())?,
            }
            eprintln!("{} relevant, {} screened out", part.n_relevant(), part.n_irrelevant());
            if let Some(p) = audit {
                let [plain, combined] = compile_alt_filters()?;
                let report = filter_audit(&corpus, &[main, plain, combined])?;
                write_audit_jsonl(&report, std::fs::File::create(&p)?)?;
                eprintln!("{} filter disagreements", report.len());
            }
        }
        Command::Vote { cfg } => {
            let cfg = cfg.load()?;
            let out = replay(&cfg)?;
            print!("{}", pipeline::render_summary(&out.summary));
        }
        Command::Eval { cfg } => {
            let cfg = cfg.load()?;
            let inputs = load_inputs(&cfg)?;
            let Some(truth) = inputs.truth else {
                bail!("no truth labels: set truth in the config or pass --truth");
            };
            let part = partition(&cfg, &inputs.corpus)?;
            let cases = aggregate_agent_tables(&cfg, &part.relevant_ids)?;
            let table = sweep(&cases, &[cfg.min_votes], &cfg.schema, cfg.denominator)?.remove(0);
            print_json(&evaluate(&cfg.schema, &table.decisions, &truth.labels)?)?;
        }
        Command::Sweep { cfg, ks } => {
            let cfg = cfg.load()?;
            let inputs = load_inputs(&cfg)?;
            let Some(truth) = inputs.truth else {
                bail!("no truth labels: set truth in the config or pass --truth");
            };
            let mut ks = if ks.is_empty() { (1..=cfg.committee_size()).collect() } else { ks };
            ks.sort_unstable();
            ks.dedup();
            let part = partition(&cfg, &inputs.corpus)?;
            let cases: Vec<_> = aggregate_agent_tables(&cfg, &part.relevant_ids)?
                .into_iter()
                .filter(|(id, _)| truth.labels.contains_key(id))
                .collect();
            let tables = sweep(&cases, &ks, &cfg.schema, cfg.denominator)?;
            let curve = threshold_curve(&cfg.schema, &tables, &truth.labels)?;
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            for row in curve {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        Command::Audit { cfg, hallucinations: false } => {
            let cfg = cfg.load()?;
            let inputs = load_inputs(&cfg)?;
            let mut filters = vec![cfg.filter.clone().map_or_else(compile_af_filter, Ok)?];
            filters.extend(compile_alt_filters()?);
            let report = filter_audit(&inputs.corpus, &filters)?;
            write_audit_jsonl(&report, io::stdout().lock())?;
            eprintln!("{} disagreements over {} cases", report.len(), inputs.corpus.len());
        }
        Command::Audit { cfg, hallucinations: true } => {
            let cfg = cfg.load()?;
            let inputs = load_inputs(&cfg)?;
            let Some(truth) = inputs.truth else {
                bail!("no truth labels: set truth in the config or pass --truth");
            };
            let part = partition(&cfg, &inputs.corpus)?;
            let cases = aggregate_agent_tables(&cfg, &part.relevant_ids)?;
            let table = sweep(&cases, &[cfg.min_votes], &cfg.schema, cfg.denominator)?.remove(0);
            let outcomes: std::collections::BTreeMap<String, FinalLabel> =
                table.decisions.iter().map(|d| (d.case_id.clone(), d.outcome)).collect();
            let votes: Vec<_> = cases.into_iter().flat_map(|(_, v)| v).collect();
            print_json(&hallucination_audit(&votes, &outcomes, &truth.labels, &cfg.schema))?;
        }
        Command::Serve {
            cfg,
            addr,
            token_env,
            static_dir,
        } => {
            let cfg = cfg.load()?;
            let token = match token_env {
                Some(var) => Some(std::env::var(&var).with_context(|| format!("{var} is not set"))?),
                None => None,
            };
            let state = Arc::new(AppState {
                store: Mutex::new(ReviewStore::open(&cfg.review_store, cfg.schema.clone())?),
                final_table: Some(cfg.run_dir.join(pipeline::FINAL_FILE)),
                export_snapshot: Some(cfg.run_dir.join("final_labels.reviewed.csv")),
                token,
            });
            tokio::runtime::Runtime::new()?.block_on(serve(addr, state, static_dir))?;
        }
        Command::GenCorpus { n, mix, seed, out_dir } => {
            let schema = TaskSchema::ecg_af();
            let cases = generate_corpus(n, &mix, seed, &schema)?;
            std::fs::create_dir_all(&out_dir)?;
            write_corpus_csv(&out_dir.join(pipeline::CORPUS_FILE), &synthetic_records(&cases))?;
            write_truth_csv(&out_dir.join(pipeline::TRUTH_FILE), &cases, &schema)?;
            eprintln!("wrote {n} cases to {}", out_dir.display());
        }
    }
    Ok(())
}
