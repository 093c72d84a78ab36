//! Experiment commands: train, eval, decode, margin sweep and ablation.
//!
//! Each command works on a [`RunConfig`] and writes into its own output
//! directory. `main.rs` only parses arguments and maps errors to exit codes.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::{build_vocab, load_jsonl, read_jsonl_texts, synth_corpus, ExamplePair, Limits, SynthSpec, Vocab};
use crate::decoding::{beam_search, DecodeConfig};
use crate::model::{ModelConfig, Seq2SeqModel};
use crate::rouge::{mean_scores, score_texts, RougeScores};
use crate::seed::derive_seed;
use crate::training::{self, checkpoint, AdamW, MetricsRow, Mode, TrainData, TrainError, TrainingConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const DEFAULT_GAMMAS: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];
const STREAM_INIT: u64 = 0x494e_4954;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("refusing to write into non-empty directory {0} (pass --overwrite)")]
    Clobber(PathBuf),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Clobber(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { field, reason } => CliError::Config(format!("training.{field}: {reason}")),
            other => CliError::Runtime(other.into()),
        }
    }
}

fn config_err(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {reason}"))
}

/// Where examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    Jsonl(JsonlSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonlSource {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    /// Vocabulary size including the reserved tokens, built from the training split.
    pub max_vocab: usize,
}

/// Everything one run needs. The decode settings derive from the training
/// section (`beam_size`, `beta`) and the model's `max_sum_len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    pub data: DataSource,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn decode_config(&self) -> DecodeConfig {
        training::decode_config(&self.training, &self.model)
    }

    /// Field-level checks that do not need the data.
    pub fn validate(&self) -> Result<(), CliError> {
        self.training.validate()?;
        let m = &self.model;
        let checks: [(&str, bool, String); 6] = [
            (
                "model.d_model",
                m.d_model > 0 && m.d_model.is_multiple_of(2),
                format!("must be positive and even, got {}", m.d_model),
            ),
            (
                "model.n_heads",
                m.n_heads > 0 && m.d_model.is_multiple_of(m.n_heads.max(1)),
                format!("{} must divide d_model", m.n_heads),
            ),
            ("model.n_enc_layers", m.n_enc_layers > 0, "must be positive".into()),
            ("model.n_dec_layers", m.n_dec_layers > 0, "must be positive".into()),
            ("model.d_ff", m.d_ff > 0, "must be positive".into()),
            (
                "model.dropout_rate",
                (0.0..1.0).contains(&m.dropout_rate),
                format!("must be in [0, 1), got {}", m.dropout_rate),
            ),
        ];
        for (field, ok, reason) in checks {
            if !ok {
                return Err(config_err(field, reason));
            }
        }
        if m.max_doc_len == 0 {
            return Err(config_err("model.max_doc_len", "must be positive"));
        }
        if m.max_sum_len < 2 {
            return Err(config_err("model.max_sum_len", "must be at least 2 (one word plus EOS)"));
        }
        match &self.data {
            DataSource::Synthetic(s) => {
                s.validate().map_err(|e| config_err("data", e))?;
                if s.max_doc_tokens() > m.max_doc_len {
                    return Err(config_err(
                        "model.max_doc_len",
                        format!(
                            "synthetic documents reach {} tokens but max_doc_len is {}",
                            s.max_doc_tokens(),
                            m.max_doc_len
                        ),
                    ));
                }
                if s.salient_count + 1 > m.max_sum_len {
                    return Err(config_err(
                        "model.max_sum_len",
                        format!(
                            "synthetic summaries need {} tokens but max_sum_len is {}",
                            s.salient_count + 1,
                            m.max_sum_len
                        ),
                    ));
                }
            }
            DataSource::Jsonl(j) => {
                if j.max_vocab <= crate::data::RESERVED.len() {
                    return Err(config_err("data.max_vocab", "must exceed the 4 reserved tokens"));
                }
            }
        }
        Ok(())
    }
}

/// Vocabulary and the three splits.
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<ExamplePair>,
    pub val: Vec<ExamplePair>,
    pub test: Vec<ExamplePair>,
}

pub fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic(spec) => {
            let c = synth_corpus(spec)?;
            Ok(Dataset { vocab: c.vocab, train: c.train, val: c.val, test: c.test })
        }
        DataSource::Jsonl(j) => {
            let texts = read_jsonl_texts(&j.train)?;
            let corpus: Vec<&str> = texts.iter().flat_map(|(d, s)| [d.as_str(), s.as_str()]).collect();
            let vocab = build_vocab(&corpus, j.max_vocab)?;
            let limits = Limits { max_doc_len: cfg.model.max_doc_len, max_sum_len: cfg.model.max_sum_len };
            Ok(Dataset {
                train: load_jsonl(&j.train, &vocab, limits)?,
                val: load_jsonl(&j.val, &vocab, limits)?,
                test: load_jsonl(&j.test, &vocab, limits)?,
                vocab,
            })
        }
    }
}

/// Fills `vocab_size` from the data when it is left at 0.
pub fn resolve_model_config(cfg: &ModelConfig, vocab: &Vocab) -> Result<ModelConfig, CliError> {
    let mut m = cfg.clone();
    if m.vocab_size == 0 {
        m.vocab_size = vocab.len();
    } else if m.vocab_size != vocab.len() {
        return Err(config_err(
            "model.vocab_size",
            format!("{} does not match the data vocabulary of {}", m.vocab_size, vocab.len()),
        ));
    }
    m.validate().map_err(|e| config_err("model", e))?;
    Ok(m)
}

fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<(), CliError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| anyhow!("{}: {e}", dir.display()))?.next().is_some();
        if non_empty && !overwrite {
            return Err(CliError::Clobber(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

pub fn save_model(path: &Path, model: &Seq2SeqModel) -> Result<(), checkpoint::CheckpointError> {
    let entries: Vec<(&str, &Tensor)> = model.named_params().collect();
    checkpoint::save(path, &entries)
}

pub fn load_model(path: &Path, config: ModelConfig) -> anyhow::Result<Seq2SeqModel> {
    let named = checkpoint::load(path)?;
    Ok(Seq2SeqModel::from_named(config, named)?)
}

/// Optimizer state: `step`, then `m.<name>` and `v.<name>` for every updated parameter.
pub fn save_optimizer(path: &Path, model: &Seq2SeqModel, opt: &AdamW) -> anyhow::Result<()> {
    let step = Tensor::scalar(opt.step as f64)?;
    let mut owned = Vec::new();
    for (i, (name, t)) in model.named_params().enumerate() {
        if let (Some(m), Some(v)) = (&opt.m[i], &opt.v[i]) {
            owned.push((format!("m.{name}"), Tensor::new(t.shape().to_vec(), m.clone())?));
            owned.push((format!("v.{name}"), Tensor::new(t.shape().to_vec(), v.clone())?));
        }
    }
    let mut entries: Vec<(&str, &Tensor)> = vec![("step", &step)];
    entries.extend(owned.iter().map(|(n, t)| (n.as_str(), t)));
    Ok(checkpoint::save(path, &entries)?)
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// A trained run on disk.
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub model: Seq2SeqModel,
    pub config: RunConfig,
}

/// The frozen configuration of a run: model vocabulary resolved and the
/// output directory recorded.
fn freeze_config(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<RunConfig, CliError> {
    let mut frozen = cfg.clone();
    frozen.model = resolve_model_config(&cfg.model, &data.vocab)?;
    frozen.out_dir = Some(out.to_path_buf());
    Ok(frozen)
}

fn initial_model(cfg: &RunConfig) -> anyhow::Result<Seq2SeqModel> {
    Ok(Seq2SeqModel::new(cfg.model.clone(), derive_seed(cfg.training.seed, &[STREAM_INIT]))?)
}

/// Warm-started model shared by runs that differ only in the main phase.
pub struct WarmStart {
    pub model: Seq2SeqModel,
    pub metrics: Vec<MetricsRow>,
}

pub fn compute_warm_start(cfg: &RunConfig, data: &Dataset) -> Result<WarmStart, CliError> {
    let model = initial_model(cfg)?;
    let (model, metrics) = training::warm_start(model, &data.train, &cfg.training)?;
    Ok(WarmStart { model, metrics })
}

/// Trains one run into `out`. `warm` must come from a config with the same
/// model, data, seed and warm-start settings.
pub fn train_into(
    cfg: &RunConfig,
    data: &Dataset,
    out: &Path,
    overwrite: bool,
    warm: Option<&WarmStart>,
) -> Result<RunArtifacts, CliError> {
    cfg.validate()?;
    prepare_out_dir(out, overwrite)?;
    let frozen = freeze_config(cfg, data, out)?;
    write_json(&out.join(RUN_CONFIG_FILE), &frozen)?;
    data.vocab.save(&out.join(VOCAB_FILE)).map_err(anyhow::Error::from)?;
    let owned;
    let warm = match warm {
        Some(w) => w,
        None => {
            owned = compute_warm_start(&frozen, data)?;
            &owned
        }
    };
    let td = TrainData { train: &data.train, val: &data.val, vocab: &data.vocab };
    let mut outcome = training::train_main(warm.model.clone(), td, &frozen.training)?;
    let mut metrics = warm.metrics.clone();
    metrics.append(&mut outcome.metrics);
    let ckpt = out.join(CHECKPOINT_FILE);
    save_model(&ckpt, &outcome.model).map_err(anyhow::Error::from)?;
    save_optimizer(&checkpoint::optimizer_path(&ckpt), &outcome.model, &outcome.optimizer)?;
    write_metrics(&out.join(METRICS_FILE), &metrics)?;
    log::info!("{}: {} steps, early stop: {}", out.display(), outcome.steps, outcome.stopped_early);
    Ok(RunArtifacts { dir: out.to_path_buf(), model: outcome.model, config: frozen })
}

/// One row of the per-example evaluation file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub example_id: usize,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rouge_l_f: f64,
    pub beam_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub corpus: RougeScores,
    pub mean_beam_score: f64,
}

/// Beam-decodes every pair and scores it against its reference.
pub fn evaluate(
    model: &Seq2SeqModel,
    pairs: &[ExamplePair],
    vocab: &Vocab,
    decode: &DecodeConfig,
) -> anyhow::Result<EvalReport> {
    if pairs.is_empty() {
        return Err(anyhow!("evaluation corpus is empty"));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    let mut scores = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let enc = model.encode(&p.document, None)?;
        let best = beam_search(model, &enc, decode)?.swap_remove(0);
        let s = score_texts(&vocab.detokenize(best.tokens.ids()), &vocab.detokenize(p.summary.ids()));
        rows.push(EvalRow {
            example_id: i,
            rouge1_f: s.r1.f1,
            rouge2_f: s.r2.f1,
            rouge_l_f: s.rl.f1,
            beam_score: best.score,
        });
        scores.push(s);
    }
    let mean_beam_score = rows.iter().map(|r| r.beam_score).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport { corpus: mean_scores(&scores), rows, mean_beam_score })
}

pub fn write_eval(dir: &Path, report: &EvalReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(dir.join(EVAL_FILE))?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Summary<'a> {
        examples: usize,
        rouge: &'a RougeScores,
        mean_beam_score: f64,
    }
    write_json(
        &dir.join("eval_summary.json"),
        &Summary { examples: report.rows.len(), rouge: &report.corpus, mean_beam_score: report.mean_beam_score },
    )
}

/// Markdown table with Rouge F1 scaled to 0–100.
pub fn rouge_table(label_header: &str, rows: &[(String, RougeScores)]) -> String {
    let mut s = format!("| {label_header} | R1 | R2 | RL |\n|---|---|---|---|\n");
    for (label, r) in rows {
        let _ = writeln!(s, "| {label} | {:.2} | {:.2} | {:.2} |", 100.0 * r.r1.f1, 100.0 * r.r2.f1, 100.0 * r.rl.f1);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

fn split_of(data: &Dataset, split: Split) -> &[ExamplePair] {
    match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
        Split::Test => &data.test,
    }
}

/// Result row of a sweep or ablation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub mode: String,
    pub gamma: f64,
    pub lambda_nll: f64,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rouge_l_f: f64,
    pub mean_beam_score: f64,
    pub run_dir: String,
}

fn write_report(path: &Path, rows: &[ReportRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A named variant of a base config.
#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub dir_name: String,
    pub config: RunConfig,
}

pub fn margin_variants(base: &RunConfig, gammas: &[f64]) -> Vec<Variant> {
    gammas
        .iter()
        .map(|&g| {
            let mut c = base.clone();
            c.training.gamma = g;
            Variant { label: format!("{g:.1}"), dir_name: format!("gamma_{g}"), config: c }
        })
        .collect()
}

/// Full model, `- Con loss`, and `- NLL loss` at margins 1.5 and 0.0.
pub fn ablation_variants(base: &RunConfig) -> Vec<Variant> {
    let with = |mode: Mode, gamma: Option<f64>, lambda: Option<f64>| {
        let mut c = base.clone();
        c.training.mode = mode;
        if let Some(g) = gamma {
            c.training.gamma = g;
        }
        if let Some(l) = lambda {
            c.training.lambda_nll = l;
        }
        c
    };
    vec![
        Variant { label: "consum".into(), dir_name: "consum".into(), config: with(Mode::Consum, None, None) },
        Variant { label: "- con loss".into(), dir_name: "nll_only".into(), config: with(Mode::NllOnly, None, None) },
        Variant {
            label: "- nll loss, gamma=1.5".into(),
            dir_name: "con_only_gamma_1.5".into(),
            config: with(Mode::ConOnly, Some(1.5), Some(0.0)),
        },
        Variant {
            label: "- nll loss, gamma=0.0".into(),
            dir_name: "con_only_gamma_0".into(),
            config: with(Mode::ConOnly, Some(0.0), Some(0.0)),
        },
    ]
}

/// Trains and evaluates each variant on the test split. Variants share one
/// warm start, which depends only on settings common to all of them.
pub fn run_variants(
    variants: &[Variant],
    out: &Path,
    overwrite: bool,
    parallel: bool,
) -> Result<Vec<ReportRow>, CliError> {
    let Some(first) = variants.first() else { return Ok(Vec::new()) };
    for v in variants {
        v.config.validate()?;
    }
    prepare_out_dir(out, overwrite)?;
    let data = load_dataset(&first.config)?;
    if parallel {
        run_variants_in_processes(variants, out)?;
    }
    let mut warm: Option<WarmStart> = None;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let dir = out.join(&v.dir_name);
        let art = if parallel {
            let cfg = RunConfig::load(&dir.join(RUN_CONFIG_FILE))?;
            let model = load_model(&dir.join(CHECKPOINT_FILE), cfg.model.clone())?;
            RunArtifacts { dir: dir.clone(), model, config: cfg }
        } else {
            if warm.is_none() {
                let frozen = freeze_config(&v.config, &data, &dir)?;
                warm = Some(compute_warm_start(&frozen, &data)?);
            }
            train_into(&v.config, &data, &dir, true, warm.as_ref())?
        };
        let report = evaluate(&art.model, &data.test, &data.vocab, &art.config.decode_config())?;
        write_eval(&dir, &report)?;
        let t = &art.config.training;
        rows.push(ReportRow {
            label: v.label.clone(),
            mode: t.mode.as_str().into(),
            gamma: t.gamma,
            lambda_nll: t.effective_lambda(),
            rouge1_f: report.corpus.r1.f1,
            rouge2_f: report.corpus.r2.f1,
            rouge_l_f: report.corpus.rl.f1,
            mean_beam_score: report.mean_beam_score,
            run_dir: v.dir_name.clone(),
        });
    }
    Ok(rows)
}

fn run_variants_in_processes(variants: &[Variant], out: &Path) -> Result<(), CliError> {
    let exe = std::env::current_exe().context("locating the executable")?;
    let mut children = Vec::new();
    for v in variants {
        let dir = out.join(&v.dir_name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let cfg_path = out.join(format!("{}.config.json", v.dir_name));
        write_json(&cfg_path, &v.config)?;
        let child = Command::new(&exe)
            .arg("train")
            .arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(&dir)
            .arg("--overwrite")
            .spawn()
            .with_context(|| format!("spawning run {}", v.dir_name))?;
        children.push((v.dir_name.clone(), child));
    }
    for (name, mut child) in children {
        let status = child.wait().with_context(|| format!("waiting for run {name}"))?;
        if !status.success() {
            return Err(CliError::Runtime(anyhow!("run {name} failed with {status}")));
        }
    }
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "consum", version, about = "Contrastive seq2seq summarization lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `training.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train one run.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Beam-decode a split with a checkpoint and report Rouge.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Generate one summary per input document.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON Lines file with a "document" field per record.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Train and evaluate once per margin value.
    SweepMargin {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_GAMMAS.to_vec())]
        gammas: Vec<f64>,
        /// Run the constituent trainings as separate processes.
        #[arg(long)]
        parallel: bool,
    },
    /// The four-row loss ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        parallel: bool,
    },
}

fn load_common(c: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.training.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = Some(o.clone());
    }
    let out =
        cfg.out_dir.clone().ok_or_else(|| config_err("out_dir", "no output directory (set out_dir or pass --out)"))?;
    cfg.validate()?;
    Ok((cfg, out))
}

fn with_decode_overrides(cfg: &RunConfig, beam: Option<usize>, beta: Option<f64>) -> Result<DecodeConfig, CliError> {
    let mut d = cfg.decode_config();
    if let Some(b) = beam {
        d.beam_size = b;
    }
    if let Some(b) = beta {
        d.length_penalty_beta = b;
    }
    d.validate().map_err(|e| config_err("beam/beta", e))?;
    Ok(d)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Train { common } => {
            let (cfg, out) = load_common(&common)?;
            let data = load_dataset(&cfg).map_err(|e| config_err("data", e))?;
            train_into(&cfg, &data, &out, common.overwrite, None)?;
            println!("trained run written to {}", out.display());
        }
        Cmd::Eval { common, checkpoint, split, beam, beta } => {
            let (cfg, out) = load_common(&common)?;
            let data = load_dataset(&cfg).map_err(|e| config_err("data", e))?;
            let mc = resolve_model_config(&cfg.model, &data.vocab)?;
            let decode = with_decode_overrides(&cfg, beam, beta)?;
            prepare_out_dir(&out, common.overwrite)?;
            let model = load_model(&checkpoint, mc)?;
            let report = evaluate(&model, split_of(&data, split), &data.vocab, &decode)?;
            write_eval(&out, &report)?;
            print!("{}", rouge_table("Model", &[(checkpoint.display().to_string(), report.corpus)]));
            println!("mean beam score: {:.6}", report.mean_beam_score);
        }
        Cmd::Decode { common, checkpoint, input, beam, beta } => {
            let mut cfg = RunConfig::load(&common.config)?;
            if let Some(s) = common.seed {
                cfg.training.seed = s;
            }
            cfg.validate()?;
            let data = load_dataset(&cfg).map_err(|e| config_err("data", e))?;
            let mc = resolve_model_config(&cfg.model, &data.vocab)?;
            let decode = with_decode_overrides(&cfg, beam, beta)?;
            let model = load_model(&checkpoint, mc)?;
            let lines = decode_file(&model, &data.vocab, &input, &decode)?;
            match &common.out {
                Some(dir) => {
                    prepare_out_dir(dir, common.overwrite)?;
                    fs::write(dir.join("decoded.txt"), lines.concat()).context("writing decoded.txt")?;
                }
                None => {
                    let mut stdout = std::io::stdout().lock();
                    for l in &lines {
                        stdout.write_all(l.as_bytes()).context("writing to stdout")?;
                    }
                }
            }
        }
        Cmd::SweepMargin { common, gammas, parallel } => {
            let (cfg, out) = load_common(&common)?;
            if gammas.is_empty() {
                return Err(config_err("gammas", "empty list"));
            }
            let rows = run_variants(&margin_variants(&cfg, &gammas), &out, common.overwrite, parallel)?;
            write_report(&out.join("sweep.csv"), &rows)?;
            print!("{}", rouge_table("Margin", &rows.iter().map(report_entry).collect::<Vec<_>>()));
        }
        Cmd::Ablate { common, parallel } => {
            let (cfg, out) = load_common(&common)?;
            let rows = run_variants(&ablation_variants(&cfg), &out, common.overwrite, parallel)?;
            write_report(&out.join("ablation.csv"), &rows)?;
            print!("{}", rouge_table("Variant", &rows.iter().map(report_entry).collect::<Vec<_>>()));
        }
    }
    Ok(())
}

fn report_entry(r: &ReportRow) -> (String, RougeScores) {
    let mut s = RougeScores::default();
    s.r1.f1 = r.rouge1_f;
    s.r2.f1 = r.rouge2_f;
    s.rl.f1 = r.rouge_l_f;
    (r.label.clone(), s)
}

#[derive(Deserialize)]
struct DocumentRecord {
    document: String,
}

/// One decoded summary (plus newline) per record of a JSONL file.
pub fn decode_file(
    model: &Seq2SeqModel,
    vocab: &Vocab,
    input: &Path,
    decode: &DecodeConfig,
) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let max = model.config().max_doc_len;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: DocumentRecord =
            serde_json::from_str(line).with_context(|| format!("{}: line {}", input.display(), i + 1))?;
        let mut ids = vocab.tokenize(&rec.document);
        ids.truncate(max);
        if ids.is_empty() {
            return Err(anyhow!("{}: line {}: empty document", input.display(), i + 1));
        }
        let enc = model.encode(&crate::data::TokenSequence(ids), None)?;
        let best = beam_search(model, &enc, decode)?.swap_remove(0);
        out.push(format!("{}\n", vocab.detokenize(best.tokens.ids())));
    }
    Ok(out)
}
