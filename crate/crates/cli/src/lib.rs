//! The `mtcnn` command-line tool.
//!
//! Every subcommand is also callable as a library function so scripts and
//! tests can drive the pipeline without spawning processes. [`run`] maps
//! outcomes onto the stable exit codes: 0 success, 1 check failure, 2 usage,
//! configuration or data error, 3 numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtcnn::checkpoint::{self, Checkpoint};
use mtcnn::data::{
    build_vocab, encode, generate_synthetic, read_jsonl, write_jsonl, EncodedBatch, GeneratorSpec, Manifest, Variable,
    Vocabulary,
};
use mtcnn::metrics::{evaluate, MetricsReport, ScoredDataset};
use mtcnn::model::{count_params, ModelConfig, MtcnnModel, ParamCounts};
use mtcnn::train::{model_gradcheck, score, train, EpochLog, ModelGradCheck, TrainConfig, Weighting};
use mtcnn::{Error, Exec, Result, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Gradient-check pass threshold.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory (`train.jsonl`, `test.jsonl`) or a single JSONL file.
    pub data: PathBuf,
    pub out: PathBuf,
    /// Defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `vocab.tsv` next to the checkpoint.
    pub vocab: Option<PathBuf>,
    /// Generator spec for `gen-data`; built-in defaults when absent.
    pub generator: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { data: "data".into(), out: "out".into(), checkpoint: None, vocab: None, generator: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weighting: Weighting,
    /// Minimum training-split frequency for a token to enter the vocabulary.
    pub min_count: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection { epochs: t.epochs, batch_size: t.batch_size, lr: t.lr, weighting: t.weighting, min_count: 1 }
    }
}

/// Everything a run needs. Parsed from TOML; every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim())))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.paths.out.join("model.ckpt"))
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.paths.vocab.clone().unwrap_or_else(|| {
            let ckpt = self.checkpoint_path();
            ckpt.parent().unwrap_or(Path::new(".")).join("vocab.tsv")
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            weighting: self.train.weighting.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mtcnn", version, about = "Multitask CNN sequence embeddings for fraud risk")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory or JSONL file.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted motifs.
    GenData {
        /// Generator spec (TOML); overrides the config's `paths.generator`.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus a per-epoch log.
    Train,
    /// Score a dataset and write per-task metrics.
    Eval,
    /// Export per-record scores and shared vectors.
    Embed,
    /// Finite-difference check of every parameter gradient.
    Gradcheck,
    /// Print the parameter count per component.
    CountParams,
}

/// Builds the effective configuration: file first, flags on top.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.paths.out = o.clone();
    }
    if let Some(d) = &common.data {
        cfg.paths.data = d.clone();
    }
    if let Some(c) = &common.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    if let Some(p) = common.precision {
        cfg.precision = p;
    }
    Ok(cfg)
}

/// Result of a command that ran to completion.
#[derive(Debug)]
pub enum Outcome {
    Done,
    /// A check ran but did not pass.
    CheckFailed(String),
}

pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::CheckFailed(_)) => EXIT_CHECK_FAILED,
        Err(Error::Numeric(_)) => EXIT_NUMERIC,
        Err(_) => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Messages go to stdout/stderr.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = run(&cli);
    match &result {
        Ok(Outcome::CheckFailed(msg)) => eprintln!("check failed: {msg}"),
        Err(e) => eprintln!("error: {e}"),
        Ok(Outcome::Done) => {}
    }
    exit_code(&result)
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::GenData { spec } => {
            let spec_path = spec.clone().or_else(|| cfg.paths.generator.clone());
            let spec = match spec_path {
                Some(p) => GeneratorSpec::load(&p)?,
                None => GeneratorSpec::default(),
            };
            let m = cmd_gen_data(&spec, cfg.seed, &cfg.paths.out)?;
            println!(
                "wrote {} train / {} test records to {}; positives train {:?} test {:?}",
                m.train.records,
                m.test.records,
                cfg.paths.out.display(),
                m.train.positives,
                m.test.positives
            );
            Ok(Outcome::Done)
        }
        Command::Train => {
            let summary = cmd_train_with(&cfg, |line| {
                if let Ok(text) = serde_json::to_string(line) {
                    println!("{text}");
                }
            })?;
            println!("checkpoint {}", summary.checkpoint.display());
            Ok(Outcome::Done)
        }
        Command::Eval => {
            let report = cmd_eval(&cfg)?;
            for (task, m) in &report {
                println!(
                    "{task}: ks {:.2} iv {:.4} $pr-auc {:.4} r@p {:.4} p@r {:.4}",
                    m.ks, m.iv, m.dollar_pr_auc, m.r_at_p.recall, m.p_at_r.precision
                );
            }
            Ok(Outcome::Done)
        }
        Command::Embed => {
            let n = cmd_embed(&cfg)?;
            println!("wrote {n} embeddings to {}", cfg.paths.out.join("embeddings.jsonl").display());
            Ok(Outcome::Done)
        }
        Command::Gradcheck => {
            let check = cmd_gradcheck(cfg.seed)?;
            for (name, err) in check.names.iter().zip(&check.report.per_param) {
                println!("{name:<20}{err:>12.3e}");
            }
            println!("max relative error {:.3e} ({} elements)", check.report.max_rel_error, check.report.checked);
            if check.report.max_rel_error <= GRADCHECK_TOLERANCE {
                Ok(Outcome::Done)
            } else {
                Ok(Outcome::CheckFailed(format!(
                    "max relative error {:.3e} in {} exceeds {GRADCHECK_TOLERANCE:e}",
                    check.report.max_rel_error,
                    check.worst_name()
                )))
            }
        }
        Command::CountParams => {
            println!("{}", cmd_count_params(&cfg.model)?);
            Ok(Outcome::Done)
        }
    }
}

pub fn cmd_gen_data(spec: &GeneratorSpec, seed: u64, out: &Path) -> Result<Manifest> {
    let data = generate_synthetic(spec, seed)?;
    fs::create_dir_all(out)?;
    write_jsonl(&data.train, &out.join("train.jsonl"))?;
    write_jsonl(&data.test, &out.join("test.jsonl"))?;
    write_json(&out.join("manifest.json"), &data.manifest)?;
    write_json(&out.join("motifs.json"), &data.motifs)?;
    fs::write(out.join("generator.toml"), spec.to_toml())?;
    Ok(data.manifest)
}

/// Names the file in I/O errors, which otherwise carry no path.
fn at(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        other => other,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Training split and optional validation split for a data path.
fn training_files(data: &Path) -> Result<(PathBuf, Option<PathBuf>)> {
    if data.is_dir() {
        let train = data.join("train.jsonl");
        if !train.is_file() {
            return Err(Error::Data(format!("{} has no train.jsonl", data.display())));
        }
        let test = data.join("test.jsonl");
        Ok((train, test.is_file().then_some(test)))
    } else if data.is_file() {
        Ok((data.to_path_buf(), None))
    } else {
        Err(Error::Data(format!("data path {} does not exist", data.display())))
    }
}

fn scoring_file(data: &Path) -> Result<PathBuf> {
    if data.is_dir() {
        let test = data.join("test.jsonl");
        if !test.is_file() {
            return Err(Error::Data(format!("{} has no test.jsonl", data.display())));
        }
        Ok(test)
    } else if data.is_file() {
        Ok(data.to_path_buf())
    } else {
        Err(Error::Data(format!("data path {} does not exist", data.display())))
    }
}

/// The configured model with vocabulary sizes taken from `vocab`.
pub fn model_config_for(cfg: &RunConfig, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        page_vocab: vocab.size(Variable::Page),
        category_vocab: vocab.size(Variable::Category),
        ..cfg.model.clone()
    }
}

#[derive(Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: Vec<EpochLog>,
    pub losses: Vec<f64>,
}

/// Trains quietly; the epoch log still goes to `<out>/train_log.jsonl`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cmd_train_with(cfg, |_| {})
}

/// Like [`cmd_train`], calling `progress` after every epoch.
pub fn cmd_train_with(cfg: &RunConfig, progress: impl FnMut(&EpochLog)) -> Result<TrainSummary> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, progress),
        Precision::F64 => train_as::<f64>(cfg, progress),
    }
}

fn train_as<T: Scalar>(cfg: &RunConfig, mut progress: impl FnMut(&EpochLog)) -> Result<TrainSummary> {
    let (train_path, val_path) = training_files(&cfg.paths.data)?;
    let records = read_jsonl(&train_path).map_err(at(&train_path))?;
    if records.is_empty() {
        return Err(Error::Config(format!("{} holds no records", train_path.display())));
    }
    let vocab = build_vocab(&records, cfg.train.min_count)?;
    let model_cfg = model_config_for(cfg, &vocab);
    model_cfg.validate()?;
    let exec = Exec::default();
    let data = encode(&vocab, &records, model_cfg.max_len, model_cfg.tasks, exec)?;
    let validation = match &val_path {
        Some(p) => Some(encode(&vocab, &read_jsonl(p).map_err(at(p))?, model_cfg.max_len, model_cfg.tasks, exec)?),
        None => None,
    };

    fs::create_dir_all(&cfg.paths.out)?;
    let ckpt = cfg.checkpoint_path();
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let vocab_path = cfg.vocab_path();
    vocab.save(&vocab_path)?;

    let mut model = MtcnnModel::<T>::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut log_file = fs::File::create(cfg.paths.out.join("train_log.jsonl"))?;
    let report = train(&mut model, &data, validation.as_ref(), &cfg.train_config(), |line| {
        let text = serde_json::to_string(line).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(log_file, "{text}")?;
        progress(line);
        Ok(())
    })?;
    checkpoint::save(&model, &vocab.hash(), &ckpt)?;
    Ok(TrainSummary { checkpoint: ckpt, log: report.epochs, losses: report.losses })
}

/// A checkpoint with its vocabulary, checked against each other.
fn restore<T: Scalar>(cfg: &RunConfig) -> Result<(Checkpoint<T>, Vocabulary)> {
    let path = cfg.checkpoint_path();
    let ckpt = checkpoint::load::<T>(&path).map_err(at(&path))?;
    let vocab_path = cfg.vocab_path();
    let vocab = Vocabulary::load(&vocab_path).map_err(at(&vocab_path))?;
    ckpt.ensure_compatible(None, Some(&vocab.hash()))?;
    Ok((ckpt, vocab))
}

fn with_checkpoint<R>(
    cfg: &RunConfig,
    f32_fn: impl FnOnce(Checkpoint<f32>, Vocabulary) -> Result<R>,
    f64_fn: impl FnOnce(Checkpoint<f64>, Vocabulary) -> Result<R>,
) -> Result<R> {
    let path = cfg.checkpoint_path();
    let header = checkpoint::peek_header(&path).map_err(at(&path))?;
    match header.precision.as_str() {
        "f32" => restore(cfg).and_then(|(c, v)| f32_fn(c, v)),
        "f64" => restore(cfg).and_then(|(c, v)| f64_fn(c, v)),
        other => Err(Error::Format(format!("unknown checkpoint precision {other:?}"))),
    }
}

fn encode_for<T: Scalar>(model: &MtcnnModel<T>, vocab: &Vocabulary, data: &Path) -> Result<EncodedBatch> {
    let file = scoring_file(data)?;
    let records = read_jsonl(&file).map_err(at(&file))?;
    if records.is_empty() {
        return Err(Error::Data(format!("{} holds no records", data.display())));
    }
    let c = model.config();
    encode(vocab, &records, c.max_len, c.tasks, Exec::default())
}

fn eval_model<T: Scalar>(ckpt: Checkpoint<T>, vocab: Vocabulary, cfg: &RunConfig) -> Result<MetricsReport> {
    let batch = encode_for(&ckpt.model, &vocab, &cfg.paths.data)?;
    let scored = ScoredDataset {
        scores: score(&ckpt.model, &batch)?,
        labels: (0..batch.tasks).map(|t| (0..batch.len()).map(|r| batch.label(r, t)).collect()).collect(),
        amounts: batch.amounts.clone(),
    };
    evaluate(&scored)
}

/// Scores the dataset with a checkpoint and writes `<out>/metrics.json`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let report = with_checkpoint(cfg, |c, v| eval_model(c, v, cfg), |c, v| eval_model(c, v, cfg))?;
    fs::create_dir_all(&cfg.paths.out)?;
    write_json(&cfg.paths.out.join("metrics.json"), &report)?;
    Ok(report)
}

fn embed_model<T: Scalar>(ckpt: Checkpoint<T>, vocab: Vocabulary, cfg: &RunConfig) -> Result<usize> {
    let batch = encode_for(&ckpt.model, &vocab, &cfg.paths.data)?;
    let rows = ckpt.model.export_embedding(&batch, 256)?;
    fs::create_dir_all(&cfg.paths.out)?;
    let mut out = std::io::BufWriter::new(fs::File::create(cfg.paths.out.join("embeddings.jsonl"))?);
    for r in &rows {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(rows.len())
}

/// Writes `<out>/embeddings.jsonl`, one line per input record in order.
pub fn cmd_embed(cfg: &RunConfig) -> Result<usize> {
    with_checkpoint(cfg, |c, v| embed_model(c, v, cfg), |c, v| embed_model(c, v, cfg))
}

pub fn cmd_gradcheck(seed: u64) -> Result<ModelGradCheck> {
    model_gradcheck(seed)
}

pub fn cmd_count_params(model: &ModelConfig) -> Result<ParamCounts> {
    model.validate()?;
    Ok(count_params(model))
}
