//! The commands behind the `prunekit` binary.
//!
//! Each command reads a resolved [`ExperimentConfig`], writes its artifacts
//! into one run directory and echoes the config there as `config.json`.
//! Files are written to a temporary name and renamed into place; if the
//! command fails, everything it wrote is removed again.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, generate_corpus_with, markdown_table, sweep, table_rows_from_csv, EvalReport, EvalSuite,
    SyntheticCorpus, TableRow,
};
use crate::model::{build_model, param_report, TransformerModel};
use crate::persistence::{decode_checkpoint, encode_checkpoint, encode_sparse};
use crate::pruning::{apply_mask, prune_once, PruningMask};
use crate::trainer::{finetune, prune_finetune_loop, train, IterationRecord};

pub const OUTPUT_ENV: &str = "PRUNEKIT_OUT";
pub const DEFAULT_OUTPUT_DIR: &str = "prunekit-out";

pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const PRUNED_CKPT: &str = "pruned.ckpt";
pub const FINETUNED_CKPT: &str = "finetuned.ckpt";
pub const LOOP_CKPT: &str = "loop.ckpt";
pub const SPARSE_FILE: &str = "model.sparse";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_MD: &str = "sweep.md";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_MD: &str = "eval.md";
pub const REPORT_MD: &str = "report.md";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Prune,
    Finetune,
    Loop,
    Eval,
    Sweep,
    Export,
    Report,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Train,
        Command::Prune,
        Command::Finetune,
        Command::Loop,
        Command::Eval,
        Command::Sweep,
        Command::Export,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Prune => "prune",
            Command::Finetune => "finetune",
            Command::Loop => "loop",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::Export => "export",
            Command::Report => "report",
        }
    }

    /// Input file used when `--input` is not given, relative to the run
    /// directory. `None` means the command starts from scratch.
    pub fn default_input(self) -> Option<&'static str> {
        match self {
            Command::Prune | Command::Loop => Some(MODEL_CKPT),
            Command::Finetune => Some(PRUNED_CKPT),
            Command::Export => Some(FINETUNED_CKPT),
            Command::Report => Some(SWEEP_CSV),
            Command::Train | Command::Eval | Command::Sweep => None,
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::validation("command", format!("unknown command `{s}`")))
    }
}

/// `--out` beats the config's `output_dir`, which beats `$PRUNEKIT_OUT`,
/// which beats [`DEFAULT_OUTPUT_DIR`].
pub fn resolve_output_dir(cli: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(p) = &config.output_dir {
        return PathBuf::from(p);
    }
    match std::env::var_os(OUTPUT_ENV) {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => PathBuf::from(DEFAULT_OUTPUT_DIR),
    }
}

#[derive(Clone, Debug)]
pub struct RunRequest {
    pub command: Command,
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub input: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub artifacts: Vec<PathBuf>,
    /// One human-readable line describing the outcome.
    pub message: String,
}

/// Tracks files written by one command; removes them on drop unless
/// committed.
struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
    committed: bool,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            committed: false,
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        if let Err(e) = fs::write(&tmp, bytes) {
            let _ = fs::remove_file(&tmp);
            return Err(Error::io(&tmp, e));
        }
        fs::rename(&tmp, &path).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(&path, e)
        })?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for Artifacts {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

/// Corpus described by the config.
pub fn build_corpus(cfg: &ExperimentConfig) -> Result<SyntheticCorpus> {
    let c = &cfg.corpus;
    generate_corpus_with(
        c.seed,
        cfg.model.vocab_size,
        c.order,
        c.length,
        c.concentration,
        c.backoff,
    )
}

fn load_model(path: &Path, cfg: &ExperimentConfig) -> Result<(TransformerModel, Option<PruningMask>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (model, mask) = decode_checkpoint(&bytes)?;
    if model.config.vocab_size != cfg.model.vocab_size {
        return Err(Error::Input(format!(
            "{} has vocab_size {}, config says {}",
            path.display(),
            model.config.vocab_size,
            cfg.model.vocab_size
        )));
    }
    if model.config != cfg.model {
        log::warn!("{}: using the checkpoint's model config", path.display());
    }
    Ok((model, mask))
}

fn input_path(req: &RunRequest) -> Option<PathBuf> {
    req.input
        .clone()
        .or_else(|| req.command.default_input().map(|n| req.out_dir.join(n)))
}

fn required_input(req: &RunRequest) -> Result<PathBuf> {
    input_path(req).ok_or_else(|| Error::Input(format!("{} needs --input", req.command.name())))
}

pub const EVAL_CSV_HEADER: &str = "model,n_params,sparsity,perplexity,last_token_acc,cloze_acc";

fn model_label(model: &TransformerModel) -> String {
    let c = &model.config;
    format!("toy-v{}-d{}-l{}", c.vocab_size, c.d_model, c.n_layers)
}

fn eval_csv(label: &str, r: &EvalReport) -> String {
    format!(
        "{EVAL_CSV_HEADER}\n{label},{},{},{},{},{}\n",
        r.n_params, r.sparsity, r.perplexity, r.last_token_accuracy, r.cloze_accuracy
    )
}

fn trajectory_csv(records: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,target_sparsity,achieved_sparsity\n");
    for r in records {
        writeln!(out, "{},{},{}", r.iteration, r.target, r.achieved).expect("writing to a String");
    }
    out
}

#[derive(Serialize)]
struct ExportSummary {
    sparse_bytes: u64,
    dense_bytes: u64,
    compression_ratio: f64,
    sparsity: f64,
}

/// Runs one command. On error, nothing this call wrote is left behind.
pub fn run_command(req: &RunRequest) -> Result<RunSummary> {
    let cfg = &req.config;
    cfg.validate()?;
    let mut out = Artifacts::new(&req.out_dir)?;
    out.write(CONFIG_FILE, cfg.to_json_pretty().as_bytes())?;

    let message = match req.command {
        Command::Train => {
            let corpus = build_corpus(cfg)?;
            let (train_tokens, _) = corpus.split(cfg.corpus.holdout_fraction);
            let mut model = build_model(&cfg.model)?;
            let history = train(&mut model, train_tokens, &cfg.train)?;
            out.write(MODEL_CKPT, &encode_checkpoint(&model, None)?)?;
            out.write("train_history.csv", history.to_csv().as_bytes())?;
            format!(
                "trained {} steps, final loss {:.4}",
                history.len(),
                history.last_loss().unwrap_or(f64::NAN)
            )
        }
        Command::Prune => {
            let (mut model, existing) = load_model(&required_input(req)?, cfg)?;
            let mask = prune_once(&model, &cfg.prune, existing.as_ref())?;
            apply_mask(&mut model, &mask)?;
            let report = param_report(&model, Some(&mask))?;
            out.write(PRUNED_CKPT, &encode_checkpoint(&model, Some(&mask))?)?;
            let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
            json.push('\n');
            out.write("param_report.json", json.as_bytes())?;
            format!(
                "pruned to sparsity {:.4} ({} of {} parameters nonzero)",
                report.sparsity, report.nonzero_params, report.total_params
            )
        }
        Command::Finetune => {
            let (mut model, mask) = load_model(&required_input(req)?, cfg)?;
            let mask = mask.unwrap_or_else(|| PruningMask::all_true(&model));
            let corpus = build_corpus(cfg)?;
            let (train_tokens, _) = corpus.split(cfg.corpus.holdout_fraction);
            let history = finetune(&mut model, &mask, train_tokens, &cfg.finetune)?;
            out.write(FINETUNED_CKPT, &encode_checkpoint(&model, Some(&mask))?)?;
            out.write("finetune_history.csv", history.to_csv().as_bytes())?;
            format!(
                "fine-tuned {} steps at sparsity {:.4}, final loss {:.4}",
                history.len(),
                mask.sparsity(),
                history.last_loss().unwrap_or(f64::NAN)
            )
        }
        Command::Loop => {
            let (mut model, _) = load_model(&required_input(req)?, cfg)?;
            let corpus = build_corpus(cfg)?;
            let (train_tokens, _) = corpus.split(cfg.corpus.holdout_fraction);
            let outcome = prune_finetune_loop(&mut model, &cfg.prune, &cfg.finetune, train_tokens)?;
            out.write(LOOP_CKPT, &encode_checkpoint(&model, Some(&outcome.mask))?)?;
            out.write("loop_history.csv", outcome.history.to_csv().as_bytes())?;
            out.write(
                "loop_trajectory.csv",
                trajectory_csv(&outcome.trajectory).as_bytes(),
            )?;
            format!(
                "{} iterations ({}), final sparsity {:.4}",
                cfg.prune.iterations,
                cfg.prune.schedule.name(),
                outcome.mask.sparsity()
            )
        }
        Command::Eval => {
            let (model, mask) = match input_path(req) {
                Some(p) => load_model(&p, cfg)?,
                None => (build_model(&cfg.model)?, None),
            };
            let corpus = build_corpus(cfg)?;
            let (_, heldout) = corpus.split(cfg.corpus.holdout_fraction);
            let suite = EvalSuite::build(&corpus, heldout, &cfg.eval)?;
            let report = evaluate(&model, &suite, mask.as_ref())?;
            let label = model_label(&model);
            out.write(EVAL_CSV, eval_csv(&label, &report).as_bytes())?;
            let row = TableRow {
                model: label,
                rate: None,
                n_params: report.n_params,
                report,
            };
            out.write(EVAL_MD, markdown_table(&[row]).as_bytes())?;
            format!(
                "perplexity {:.3}, last-token acc {:.4}, cloze acc {:.4}",
                report.perplexity, report.last_token_accuracy, report.cloze_accuracy
            )
        }
        Command::Sweep => {
            let corpus = build_corpus(cfg)?;
            let (train_tokens, heldout) = corpus.split(cfg.corpus.holdout_fraction);
            let base = match input_path(req) {
                Some(p) => load_model(&p, cfg)?.0,
                None => {
                    let mut m = build_model(&cfg.model)?;
                    train(&mut m, train_tokens, &cfg.train)?;
                    m
                }
            };
            let suite = EvalSuite::build(&corpus, heldout, &cfg.eval)?;
            let result = sweep(
                &base,
                &cfg.sweep_rates,
                &cfg.prune,
                &cfg.finetune,
                train_tokens,
                &suite,
                &cfg.seeds,
            )?;
            out.write(SWEEP_CSV, result.to_csv().as_bytes())?;
            out.write(SWEEP_MD, result.to_markdown().as_bytes())?;
            format!("swept {} rates over {} seeds", result.rows.len(), cfg.seeds.len())
        }
        Command::Export => {
            let path = required_input(req)?;
            let (model, mask) = load_model(&path, cfg)?;
            let mask =
                mask.ok_or_else(|| Error::Input(format!("{} carries no pruning mask", path.display())))?;
            let sparse = encode_sparse(&model, &mask)?;
            let dense_bytes = encode_checkpoint(&model, None)?.len() as u64;
            out.write(SPARSE_FILE, &sparse)?;
            let summary = ExportSummary {
                sparse_bytes: sparse.len() as u64,
                dense_bytes,
                compression_ratio: dense_bytes as f64 / sparse.len() as f64,
                sparsity: mask.sparsity(),
            };
            let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
            json.push('\n');
            out.write("export.json", json.as_bytes())?;
            format!(
                "wrote {} bytes, compression ratio {:.3} at sparsity {:.4}",
                summary.sparse_bytes, summary.compression_ratio, summary.sparsity
            )
        }
        Command::Report => {
            let path = required_input(req)?;
            let csv = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let (after, before) = table_rows_from_csv(&csv)?;
            let mut md = String::from("### After fine-tuning (median over seeds)\n\n");
            md.push_str(&markdown_table(&after));
            md.push_str("\n### Before fine-tuning (pruned only)\n\n");
            md.push_str(&markdown_table(&before));
            out.write(REPORT_MD, md.as_bytes())?;
            format!(
                "tabulated {} rates from {}",
                after.len().saturating_sub(1),
                path.display()
            )
        }
    };
    Ok(RunSummary {
        artifacts: out.commit(),
        message,
    })
}

/// Single-line JSON rendering of an error for the CLI.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

/// Process exit status for an error: 2 for bad configuration or usage,
/// 1 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. } | Error::Validation { .. } | Error::Config(_) => 2,
        _ => 1,
    }
}
