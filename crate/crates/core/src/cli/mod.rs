//! Command-line surface over the whole pipeline.

mod pipeline;

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datamodel::{generate_synthetic, load_corpus, save_corpus, split_dataset, validate_dataset, Dataset, SynthConfig};
use crate::evalkit::{emit_report, MetricsReport};
use crate::retriever::{read_index, write_index, RankedList};
use crate::trainer::{
    evidence_for, load_checkpoint, load_joint, load_retriever, parse_ablations, save_checkpoint, EpochLog,
    JointTrainer, RetrieverTrainer, TrainConfig,
};

pub use pipeline::{ablation_rows, evaluate_models, evaluate_run, AblationRow, ABLATION_VARIANTS};

pub const RETRIEVER_CKPT: &str = "retriever.ckpt";
pub const JOINT_CKPT: &str = "joint.ckpt";
pub const INDEX_FILE: &str = "index.bin";
pub const RETRIEVED_FILE: &str = "retrieved.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const METRIC_VS_K_CSV: &str = "metric_vs_k.csv";
pub const ABLATION_BARS_CSV: &str = "ablation_bars.csv";

#[derive(Parser, Debug)]
#[command(
    name = "mever",
    version,
    about = "Multi-modal evidence retrieval, claim verification and explanation generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat key=value training configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Evidence retrieved per claim (default 3).
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true, value_parser = ["gold", "retrieved"])]
    setting: Option<String>,
    /// Regularizer weight (default 0.5).
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Comma-separated ablation flags.
    #[arg(long, global = true, value_name = "FLAG,...")]
    ablate: Option<String>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Corpus root.
    #[arg(long, global = true, env = "MEVER_DATA_DIR")]
    data: Option<PathBuf>,
    /// Extra configuration override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a corpus, optionally re-split it, and write it to --out.
    Prepare {
        #[arg(long)]
        resplit: bool,
        #[arg(long, default_value_t = 0.8)]
        train: f64,
        #[arg(long, default_value_t = 0.1)]
        val: f64,
    },
    /// Generate a synthetic chart corpus into --out.
    Synth {
        #[arg(long, default_value_t = 16)]
        claims: usize,
        #[arg(long, default_value_t = 8)]
        evidence: usize,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long, default_value_t = 24)]
        vocab: usize,
        #[arg(long, default_value_t = 16)]
        image_size: u32,
        #[arg(long)]
        nei: bool,
        #[arg(long)]
        no_explanations: bool,
        #[arg(long, default_value_t = 0.8)]
        train: f64,
        #[arg(long, default_value_t = 0.1)]
        val: f64,
        /// Keep every claim in the training split.
        #[arg(long)]
        train_only: bool,
    },
    /// Stage 1: contrastive retriever training.
    TrainRetriever,
    /// Encode the evidence corpus with the trained retriever.
    BuildIndex,
    /// Top-k evidence for every claim.
    Retrieve,
    /// Stage 2: joint verification and explanation training.
    TrainJoint,
    /// Verdicts and explanations for a split.
    Predict {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Metrics report for a split.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Retrain under each ablation and tabulate the deltas.
    Ablate {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Plot-ready CSV files, and a mean/std summary over --runs.
    Report {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',')]
        runs: Vec<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code: 0 success, 1 usage error, 2 runtime error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

impl Common {
    fn data_dir(&self) -> anyhow::Result<&Path> {
        self.data
            .as_deref()
            .context("no corpus given: pass --data or set MEVER_DATA_DIR")
    }

    fn dataset(&self) -> anyhow::Result<Dataset> {
        let dir = self.data_dir()?;
        load_corpus(dir).with_context(|| format!("loading corpus from {}", dir.display()))
    }

    fn dataset_name(&self) -> String {
        self.data
            .as_deref()
            .and_then(Path::file_name)
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into())
    }

    /// File, then flags, on top of `base`.
    fn config_over(&self, base: TrainConfig) -> anyhow::Result<TrainConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.k {
            cfg.k_retrieved = k;
        }
        if let Some(s) = &self.setting {
            cfg.evidence_setting = s.parse()?;
        }
        if let Some(l) = self.lambda {
            cfg.lambda_reg = l;
        }
        if let Some(a) = &self.ablate {
            cfg.ablations = parse_ablations(a)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn config(&self) -> anyhow::Result<TrainConfig> {
        self.config_over(TrainConfig::default())
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ensure_out(&self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))
    }
}

/// One line of `retrieved.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedLine {
    pub claim_id: String,
    pub evidence: Vec<(String, f64)>,
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub claim_id: String,
    pub predicted_label: String,
    pub explanation: Option<String>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn log_epochs(stage: &str, log: &EpochLog) {
    eprintln!(
        "{stage} epoch {:>3}  loss {:.6}  metric {:.4}",
        log.epoch, log.loss, log.metric
    );
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::Prepare { resplit, train, val } => {
            let mut d = c.dataset()?;
            let report = validate_dataset(&d);
            for w in &report.warnings {
                eprintln!("warning: {}: {}", w.record_id, w.message);
            }
            if resplit {
                d = split_dataset(&d, train, val, c.config()?.seed)?;
            }
            save_corpus(&d, &c.out).with_context(|| format!("writing corpus to {}", c.out.display()))?;
            println!(
                "claims {}  evidence {}  images {}  labels {}",
                report.counts.claims,
                report.counts.evidence,
                report.counts.images,
                d.label_set.join(",")
            );
        }
        Command::Synth {
            claims,
            evidence,
            images,
            vocab,
            image_size,
            nei,
            no_explanations,
            train,
            val,
            train_only,
        } => {
            let seed = c.seed.unwrap_or(SynthConfig::default().seed);
            let mut d = generate_synthetic(&SynthConfig {
                seed,
                n_claims: claims,
                n_evidence: evidence,
                n_images: images,
                vocab,
                with_explanations: !no_explanations,
                with_nei: nei,
                image_size,
            })?;
            if !train_only {
                d = split_dataset(&d, train, val, seed)?;
            }
            save_corpus(&d, &c.out).with_context(|| format!("writing corpus to {}", c.out.display()))?;
            println!("wrote {} claims to {}", d.claims.len(), c.out.display());
        }
        Command::TrainRetriever => {
            let d = c.dataset()?;
            let cfg = c.config()?;
            c.ensure_out()?;
            let mut t = RetrieverTrainer::new(&d, &cfg)?;
            while !t.is_finished() {
                log_epochs("retriever", &t.run_epoch()?);
            }
            save_checkpoint(&t.checkpoint()?, c.out_file(RETRIEVER_CKPT))?;
            println!("saved {}", c.out_file(RETRIEVER_CKPT).display());
        }
        Command::BuildIndex => {
            let d = c.dataset()?;
            let ckpt = load_checkpoint(c.out_file(RETRIEVER_CKPT)).context("loading retriever checkpoint")?;
            let r = load_retriever(&ckpt)?;
            let d = crate::trainer::effective_dataset(&d, &ckpt.meta.config);
            write_index(&r.build_index(&d)?, c.out_file(INDEX_FILE))?;
            println!("saved {}", c.out_file(INDEX_FILE).display());
        }
        Command::Retrieve => {
            let d = c.dataset()?;
            let ckpt = load_checkpoint(c.out_file(RETRIEVER_CKPT)).context("loading retriever checkpoint")?;
            let r = load_retriever(&ckpt)?;
            let d = crate::trainer::effective_dataset(&d, &ckpt.meta.config);
            let k = c.k.unwrap_or(ckpt.meta.config.k_retrieved);
            let index_path = c.out_file(INDEX_FILE);
            let index = if index_path.exists() {
                let index = read_index(&index_path)?;
                if index.params_fingerprint != r.fingerprint()? {
                    bail!("{} was built from different retriever weights", index_path.display());
                }
                index
            } else {
                r.build_index(&d)?
            };
            let lookup = d.index();
            let rows = d
                .claims
                .iter()
                .map(|claim| {
                    let RankedList { claim_id, entries } = r.retrieve(&lookup, claim, &index, k)?;
                    Ok(RetrievedLine {
                        claim_id,
                        evidence: entries,
                    })
                })
                .collect::<crate::Result<Vec<_>>>()?;
            write_jsonl(&c.out_file(RETRIEVED_FILE), &rows)?;
            println!("saved {}", c.out_file(RETRIEVED_FILE).display());
        }
        Command::TrainJoint => {
            let d = c.dataset()?;
            let ckpt = load_checkpoint(c.out_file(RETRIEVER_CKPT)).context("loading retriever checkpoint")?;
            let r = load_retriever(&ckpt)?;
            let cfg = c.config_over(ckpt.meta.config.clone())?;
            let mut t = JointTrainer::new(&d, r, &cfg)?;
            while !t.is_finished() {
                log_epochs("joint", &t.run_epoch()?);
            }
            save_checkpoint(&t.checkpoint()?, c.out_file(JOINT_CKPT))?;
            println!("saved {}", c.out_file(JOINT_CKPT).display());
        }
        Command::Predict { split } => {
            let d = c.dataset()?;
            let ckpt = load_checkpoint(c.out_file(JOINT_CKPT)).context("loading joint checkpoint")?;
            let (r, mut model) = load_joint(&ckpt)?;
            if let Some(s) = &c.setting {
                model.config.evidence_setting = s.parse()?;
            }
            let d = crate::trainer::effective_dataset(&d, &model.config);
            let retrieved = crate::trainer::freeze_and_retrieve(&d, &r, model.config.k_retrieved)?;
            let lookup = d.index();
            let rows = d
                .split_ids(&split)
                .iter()
                .map(|id| {
                    let claim = lookup
                        .claim(id)
                        .ok_or_else(|| crate::Error::DanglingReference(id.clone()))?;
                    let ev = evidence_for(&model.config, claim, &retrieved)?;
                    let p = model.predict(&lookup, claim, &ev, model.explain)?;
                    Ok(PredictionLine {
                        claim_id: id.clone(),
                        predicted_label: p.distribution.predicted_label().to_string(),
                        explanation: p.explanation.map(|e| e.text),
                    })
                })
                .collect::<crate::Result<Vec<_>>>()?;
            c.ensure_out()?;
            write_jsonl(&c.out_file(PREDICTIONS_FILE), &rows)?;
            println!("saved {} predictions to {}", rows.len(), c.out_file(PREDICTIONS_FILE).display());
        }
        Command::Evaluate { split } => {
            let d = c.dataset()?;
            let report = evaluate_run(&d, &c.out, &split, &c.dataset_name(), c.setting.as_deref())?;
            emit_report(std::slice::from_ref(&report), &c.out)?;
            print!("{}", fs::read_to_string(c.out.join("report.txt"))?);
        }
        Command::Ablate { split } => {
            let d = c.dataset()?;
            let cfg = c.config()?;
            c.ensure_out()?;
            let rows = ablation_rows(&d, &cfg, &split, &c.dataset_name(), |name| {
                eprintln!("ablation {name}");
            })?;
            let path = c.out_file(ABLATION_CSV);
            pipeline::write_ablation_csv(&rows, &path)?;
            let table = pipeline::ablation_table(&rows);
            fs::write(c.out.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Command::Report { split, runs } => {
            c.ensure_out()?;
            let mut wrote = Vec::new();
            if c.out_file(RETRIEVER_CKPT).exists() {
                let d = c.dataset()?;
                let path = c.out_file(METRIC_VS_K_CSV);
                pipeline::write_metric_vs_k(&d, &c.out_file(RETRIEVER_CKPT), &split, &path)?;
                wrote.push(path);
            }
            if c.out_file(ABLATION_CSV).exists() {
                let path = c.out_file(ABLATION_BARS_CSV);
                pipeline::write_ablation_bars(&c.out_file(ABLATION_CSV), &path)?;
                wrote.push(path);
            }
            if !runs.is_empty() {
                let reports = runs
                    .iter()
                    .map(|dir| {
                        let p = dir.join("report.json");
                        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                        Ok(serde_json::from_str::<MetricsReport>(&text)?)
                    })
                    .collect::<anyhow::Result<Vec<_>>>()?;
                emit_report(&reports, &c.out)?;
                wrote.push(c.out.join("report.json"));
            }
            if wrote.is_empty() {
                bail!(
                    "nothing to report in {}: expected {RETRIEVER_CKPT}, {ABLATION_CSV} or --runs",
                    c.out.display()
                );
            }
            let mut stdout = std::io::stdout().lock();
            for p in wrote {
                writeln!(stdout, "saved {}", p.display())?;
            }
        }
    }
    Ok(())
}
