//! Command-line experiment harness. Every command writes into its `--out`
//! directory only and finishes with a `manifest.json` holding the resolved
//! configuration, seed and SHA-256 of every artifact it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::corpus::{downsample, generate_synthetic, load_corpus, DatasetSplit, SplitName, SyntheticSpec, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mean, rank_similar_labels, sample_std, welch_t_test, MetricsReport};
use crate::mixup::MixMode;
use crate::model::{prepare_examples, Example, Model};
use crate::taxonomy::{label_frequency_buckets, Taxonomy};
use crate::trainer::{FitResult, TrainConfig, Trainer};

pub const AXIS_ALPHAS: [f64; 7] = [0.1, 0.3, 0.6, 1.0, 2.0, 5.0, 10.0];
pub const AXIS_BETAS: [f64; 7] = [0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub taxonomy: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

/// Declarative description of a run. Relative data paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    pub output_dir: Option<PathBuf>,
    pub data: Option<DataPaths>,
    pub synthetic: Option<SyntheticSpec>,
    pub train: TrainConfig,
    /// Label-frequency bucket edges (training-set counts).
    pub bucket_edges: Vec<usize>,
    /// Add missing ancestors to gold label sets (with a warning) instead of
    /// rejecting them.
    pub auto_close: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            output_dir: None,
            data: None,
            synthetic: None,
            train: TrainConfig::default(),
            bucket_edges: vec![10, 50, 200],
            auto_close: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&source)?;
        if let Some(data) = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [&mut data.taxonomy, &mut data.train, &mut data.dev, &mut data.test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::InvalidArgument(
                    "config needs exactly one of `data` and `synthetic`".into(),
                ))
            }
            (Some(d), None) => {
                for p in [&d.taxonomy, &d.train, &d.dev, &d.test] {
                    if !p.is_file() {
                        return Err(Error::InvalidArgument(format!("data file {} does not exist", p.display())));
                    }
                }
            }
            (None, Some(s)) => s.validate()?,
        }
        if self.bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::BucketEdges);
        }
        self.train.validate()
    }
}

/// Taxonomy and the three splits of a run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub taxonomy: Taxonomy,
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: DatasetSplit,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_data(cfg: &RunConfig) -> Result<RunData> {
    if let Some(spec) = &cfg.synthetic {
        let c = generate_synthetic(spec)?;
        return Ok(RunData {
            taxonomy: c.taxonomy,
            train: c.train,
            dev: c.dev,
            test: c.test,
        });
    }
    let d = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("config has no data source".into()))?;
    let taxonomy = Taxonomy::from_json(&read(&d.taxonomy)?)?;
    let split = |p: &Path, name| -> Result<DatasetSplit> {
        load_corpus(&read(p)?, &taxonomy, name, cfg.auto_close).map_err(|e| match e {
            Error::MalformedLine { line, message } => Error::MalformedLine {
                line,
                message: format!("{}: {message}", p.display()),
            },
            e => e,
        })
    };
    Ok(RunData {
        train: split(&d.train, SplitName::Train)?,
        dev: split(&d.dev, SplitName::Dev)?,
        test: split(&d.test, SplitName::Test)?,
        taxonomy,
    })
}

pub fn build_vocabulary(train: &DatasetSplit, tax: &Taxonomy, min_freq: usize) -> Vocabulary {
    let mut vocab = Vocabulary::build(train, min_freq, tax.max_depth());
    vocab.extend_with_label_names(tax);
    vocab
}

/// Prepared inputs for one training run.
pub struct Prepared {
    pub vocab: Vocabulary,
    pub buckets: Vec<usize>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn prepare(data: &RunData, train_split: &DatasetSplit, config: &TrainConfig, bucket_edges: &[usize]) -> Result<Prepared> {
    let tax = &data.taxonomy;
    let vocab = build_vocabulary(train_split, tax, config.min_freq);
    let max_len = config.encoder.max_len;
    Ok(Prepared {
        buckets: label_frequency_buckets(tax, train_split, bucket_edges)?,
        train: prepare_examples(train_split, tax, &vocab, max_len)?,
        dev: prepare_examples(&data.dev, tax, &vocab, max_len)?,
        test: prepare_examples(&data.test, tax, &vocab, max_len)?,
        vocab,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub n_train: usize,
    pub dev: MetricsReport,
    pub test: MetricsReport,
}

/// Files written under a run directory, in write order.
pub const RUN_ARTIFACTS: [&str; 5] = ["checkpoint.json", "last.json", "training_log.csv", "pairs.csv", "metrics.json"];

/// Train, evaluate the best checkpoint on dev and test, write the run's
/// artifacts into `dir`. A resumable `last.json` is refreshed every epoch so
/// an interrupted run can continue from it.
pub fn train_run(
    data: &RunData,
    train_split: &DatasetSplit,
    config: &TrainConfig,
    bucket_edges: &[usize],
    dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<RunMetrics> {
    create_dir(dir)?;
    let tax = &data.taxonomy;
    let prep = prepare(data, train_split, config, bucket_edges)?;
    let mut trainer = match resume {
        Some(ck) => {
            if &ck.config != config {
                return Err(Error::InvalidArgument("resume checkpoint was written with a different config".into()));
            }
            if ck.vocabulary != prep.vocab || &ck.taxonomy != tax {
                return Err(Error::InvalidArgument(
                    "resume checkpoint does not match the run's vocabulary or taxonomy".into(),
                ));
            }
            let state = ck
                .training_state()?
                .ok_or_else(|| Error::InvalidArgument("checkpoint holds no training state".into()))?;
            Trainer::resume(config.clone(), tax, &prep.train, &prep.dev, state)?
        }
        None => Trainer::new(config.clone(), tax, &prep.vocab, &prep.train, &prep.dev)?,
    };
    let write_logs = |t: &Trainer| -> Result<()> {
        write(dir, "training_log.csv", t.log().epochs_csv())?;
        write(dir, "pairs.csv", t.log().pairs_csv())
    };
    while !trainer.is_done() {
        if let Err(e) = trainer.run_epoch() {
            write_logs(&trainer)?;
            return Err(e);
        }
        Checkpoint::resumable(config, &prep.vocab, tax, trainer.state()).save(&dir.join("last.json"))?;
    }
    write_logs(&trainer)?;
    let epochs_run = trainer.state().epoch;
    let FitResult { best_model, best_epoch, .. } = trainer.into_result();
    Checkpoint::new(config, &prep.vocab, tax, &best_model).save(&dir.join("checkpoint.json"))?;
    let metrics = RunMetrics {
        best_epoch,
        epochs_run,
        n_train: train_split.len(),
        dev: evaluate(&best_model, tax, &prep.dev, &prep.buckets, false)?,
        test: evaluate(&best_model, tax, &prep.test, &prep.buckets, false)?,
    };
    write(dir, "metrics.json", to_json(&metrics)?)?;
    Ok(metrics)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// path relative to the output directory → SHA-256
    pub artifacts: BTreeMap<String, String>,
}

/// Hash `files` (relative to `out`) and write `manifest.json`.
pub fn write_manifest<C: Serialize>(out: &Path, command: &str, seed: u64, config: &C, files: &[String]) -> Result<Manifest> {
    let mut artifacts = BTreeMap::new();
    for f in files {
        artifacts.insert(f.clone(), sha256_file(&out.join(f))?);
    }
    let manifest = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config: serde_json::to_value(config)?,
        artifacts,
    };
    write(out, "manifest.json", to_json(&manifest)?)?;
    Ok(manifest)
}

fn run_files(prefix: &str) -> Vec<String> {
    RUN_ARTIFACTS
        .iter()
        .map(|f| if prefix.is_empty() { f.to_string() } else { format!("{prefix}/{f}") })
        .collect()
}

/// Run jobs in order, or across threads with `parallel`. Results keep job
/// order either way.
fn run_jobs<J: Sync, T: Send>(jobs: &[J], parallel: bool, f: impl Fn(&J) -> Result<T> + Sync) -> Result<Vec<T>> {
    if !parallel || jobs.len() < 2 {
        return jobs.iter().map(&f).collect();
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<T>>>> = jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if k >= jobs.len() {
                    break;
                }
                *slots[k].lock().expect("result slot") = Some(f(&jobs[k]));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("result slot").expect("every job ran"))
        .collect()
}

#[derive(Debug, Parser)]
#[command(name = "lhmix", version, about = "Hierarchical text classification with local-hierarchy Mixup")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic taxonomy and train/dev/test splits.
    GenData(GenDataArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train off / vanilla / lh with shared seeds and compare.
    Ablate(AblateArgs),
    /// Train over a grid of alpha and beta values.
    Sweep(SweepArgs),
    /// Train every mode on downsampled training sets.
    Sparse(SparseArgs),
    /// Rank labels by similarity to a target label.
    RankLabels(RankArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON synthetic spec; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub branching: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_dev: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long)]
    pub multi_path_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Overrides shared by the training commands.
#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<MixMode>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from a `last.json` written by an interrupted run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Also report metrics on ancestor-closed predictions.
    #[arg(long)]
    pub closure: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Alpha grid; repeatable.
    #[arg(long = "alpha-grid")]
    pub alphas: Vec<f64>,
    /// Beta grid; repeatable.
    #[arg(long = "beta-grid")]
    pub betas: Vec<f64>,
    /// Sweep alpha at beta = 1, then beta at alpha = 1, over the given grids
    /// (default: a built-in seven-point grid per axis).
    #[arg(long)]
    pub paper_axes: bool,
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct SparseArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Training-set fraction; repeatable.
    #[arg(long = "ratio", required = true)]
    pub ratios: Vec<f64>,
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Target label id.
    #[arg(long)]
    pub label: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Sparse(a) => cmd_sparse(&a),
        Command::RankLabels(a) => cmd_rank_labels(&a).map(|_| ()),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => serde_json::from_str(&read(p)?)?,
        None => SyntheticSpec::default(),
    };
    macro_rules! apply {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { spec.$f = v; } )* };
    }
    apply!(depth, branching, n_train, n_dev, n_test, noise_rate, multi_path_rate, seed);
    let c = generate_synthetic(&spec)?;
    create_dir(&a.out)?;
    write(&a.out, "taxonomy.json", c.taxonomy.to_json() + "\n")?;
    for split in [&c.train, &c.dev, &c.test] {
        write(&a.out, &format!("{}.jsonl", split.name), split.to_jsonl(&c.taxonomy))?;
    }
    let files: Vec<String> = ["taxonomy.json", "train.jsonl", "dev.jsonl", "test.jsonl"].map(String::from).to_vec();
    write_manifest(&a.out, "gen-data", spec.seed, &spec, &files)?;
    println!("wrote {} labels, {}/{}/{} instances to {}", c.taxonomy.len(), c.train.len(), c.dev.len(), c.test.len(), a.out.display());
    Ok(())
}

/// Load the config and apply command-line overrides.
fn resolve(a: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(mode) = a.mode {
        cfg.train.mixup.mode = mode;
    }
    if let Some(alpha) = a.alpha {
        cfg.train.mixup.alpha = alpha;
    }
    if let Some(beta) = a.beta {
        cfg.train.mixup.beta_cap = beta;
    }
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::InvalidArgument("no output directory: pass --out or set output_dir".into()))?;
    cfg.output_dir = Some(out.clone());
    cfg.validate()?;
    Ok((cfg, out))
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (cfg, out) = resolve(&a.run)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let data = load_data(&cfg)?;
    let m = train_run(&data, &data.train, &cfg.train, &cfg.bucket_edges, &out, resume.as_ref())?;
    write_manifest(&out, "train", cfg.train.seed, &cfg, &run_files(""))?;
    println!(
        "best epoch {} of {}: dev micro {:.4} macro {:.4}; test micro {:.4} macro {:.4}",
        m.best_epoch, m.epochs_run, m.dev.micro_f1, m.dev.macro_f1, m.test.micro_f1, m.test.macro_f1
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalManifestConfig<'a> {
    run: &'a RunConfig,
    checkpoint: &'a Path,
    split: &'a str,
    closure: bool,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = load_data(&cfg)?;
    if ck.taxonomy != data.taxonomy {
        return Err(Error::InvalidArgument("checkpoint taxonomy differs from the data's taxonomy".into()));
    }
    let split = match a.split.as_str() {
        "train" => &data.train,
        "dev" => &data.dev,
        "test" => &data.test,
        other => return Err(Error::InvalidArgument(format!("unknown split `{other}` (train, dev, test)"))),
    };
    let model = ck.model()?;
    let examples = prepare_examples(split, &ck.taxonomy, &ck.vocabulary, ck.config.encoder.max_len)?;
    let buckets = label_frequency_buckets(&ck.taxonomy, &data.train, &cfg.bucket_edges)?;
    let rep = evaluate(&model, &ck.taxonomy, &examples, &buckets, a.closure)?;
    create_dir(&a.out)?;
    write(&a.out, "metrics.json", to_json(&rep)?)?;
    write(&a.out, "metrics.csv", metrics_csv(&rep))?;
    let mc = EvalManifestConfig {
        run: &cfg,
        checkpoint: &a.checkpoint,
        split: &a.split,
        closure: a.closure,
    };
    write_manifest(&a.out, "eval", ck.config.seed, &mc, &["metrics.json".into(), "metrics.csv".into()])?;
    println!("{}: micro {:.4} macro {:.4}", a.split, rep.micro_f1, rep.macro_f1);
    Ok(())
}

/// Flat CSV of a report: one `overall` row, one row per depth and bucket,
/// and the same rows prefixed `closed_` when closure metrics are present.
pub fn metrics_csv(rep: &MetricsReport) -> String {
    let mut out = String::from("group,micro_f1,macro_f1,labels,support\n");
    let mut rows = |prefix: &str, r: &MetricsReport| {
        out.push_str(&format!("{prefix}overall,{},{},,\n", r.micro_f1, r.macro_f1));
        for (d, g) in r.per_depth.iter().enumerate() {
            out.push_str(&format!("{prefix}depth{},{},{},{},{}\n", d + 1, g.micro_f1, g.macro_f1, g.labels, g.support));
        }
        for (b, g) in r.per_bucket.iter().enumerate() {
            out.push_str(&format!("{prefix}bucket{b},{},{},{},{}\n", g.micro_f1, g.macro_f1, g.labels, g.support));
        }
    };
    rows("", rep);
    if let Some(c) = &rep.closed {
        rows("closed_", c);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub mode: MixMode,
    pub seed: u64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: MixMode,
    pub n: usize,
    pub micro_mean: f64,
    pub micro_std: f64,
    pub macro_mean: f64,
    pub macro_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub mode_a: MixMode,
    pub mode_b: MixMode,
    pub metric: String,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<SeedResult>,
    pub summary: Vec<ModeSummary>,
    /// Only with two or more seeds.
    pub welch: Vec<PairwiseTest>,
}

pub fn summarize(runs: &[SeedResult]) -> Result<AblationReport> {
    let pick = |mode: MixMode, f: fn(&SeedResult) -> f64| -> Vec<f64> {
        runs.iter().filter(|r| r.mode == mode).map(f).collect()
    };
    let modes: Vec<MixMode> = MixMode::ALL.into_iter().filter(|m| runs.iter().any(|r| r.mode == *m)).collect();
    let summary = modes
        .iter()
        .map(|&mode| {
            let (mi, ma) = (pick(mode, |r| r.micro_f1), pick(mode, |r| r.macro_f1));
            ModeSummary {
                mode,
                n: mi.len(),
                micro_mean: mean(&mi),
                micro_std: if mi.len() > 1 { sample_std(&mi) } else { 0.0 },
                macro_mean: mean(&ma),
                macro_std: if ma.len() > 1 { sample_std(&ma) } else { 0.0 },
            }
        })
        .collect();
    let mut welch = Vec::new();
    for (i, &a) in modes.iter().enumerate() {
        for &b in &modes[i + 1..] {
            for (metric, f) in [("micro_f1", (|r: &SeedResult| r.micro_f1) as fn(&SeedResult) -> f64), ("macro_f1", |r| r.macro_f1)] {
                let (xa, xb) = (pick(a, f), pick(b, f));
                if xa.len() < 2 || xb.len() < 2 {
                    continue;
                }
                let w = welch_t_test(&xa, &xb)?;
                welch.push(PairwiseTest {
                    mode_a: a,
                    mode_b: b,
                    metric: metric.into(),
                    t: w.t,
                    df: w.df,
                    p_value: w.p_value,
                });
            }
        }
    }
    Ok(AblationReport {
        runs: runs.to_vec(),
        summary,
        welch,
    })
}

impl AblationReport {
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("mode,seed,micro_f1,macro_f1\n");
        for r in &self.runs {
            out.push_str(&format!("{},{},{},{}\n", r.mode, r.seed, r.micro_f1, r.macro_f1));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("mode,n,micro_mean,micro_std,macro_mean,macro_std\n");
        for s in &self.summary {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.mode, s.n, s.micro_mean, s.micro_std, s.macro_mean, s.macro_std
            ));
        }
        out
    }

    pub fn welch_csv(&self) -> String {
        let mut out = String::from("mode_a,mode_b,metric,t,df,p_value\n");
        for w in &self.welch {
            out.push_str(&format!("{},{},{},{},{},{}\n", w.mode_a, w.mode_b, w.metric, w.t, w.df, w.p_value));
        }
        out
    }
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be >= 1".into()));
    }
    let (cfg, out) = resolve(&a.run)?;
    let data = load_data(&cfg)?;
    let base = cfg.train.seed;
    let jobs: Vec<(MixMode, u64)> = (0..a.seeds as u64)
        .flat_map(|k| MixMode::ALL.map(|m| (m, base + k)))
        .collect();
    let names: Vec<String> = jobs.iter().map(|(m, s)| format!("runs/{m}-seed{s}")).collect();
    let runs = run_jobs(&jobs, a.parallel, |&(mode, seed)| {
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        tc.mixup.mode = mode;
        let m = train_run(&data, &data.train, &tc, &cfg.bucket_edges, &out.join(format!("runs/{mode}-seed{seed}")), None)?;
        Ok(SeedResult {
            mode,
            seed,
            micro_f1: m.test.micro_f1,
            macro_f1: m.test.macro_f1,
        })
    })?;
    let report = summarize(&runs)?;
    write(&out, "ablation.csv", report.runs_csv())?;
    write(&out, "summary.csv", report.summary_csv())?;
    write(&out, "welch.csv", report.welch_csv())?;
    write(&out, "ablation.json", to_json(&report)?)?;
    let mut files: Vec<String> = ["ablation.csv", "summary.csv", "welch.csv", "ablation.json"].map(String::from).to_vec();
    files.extend(names.iter().flat_map(|n| run_files(n)));
    write_manifest(&out, "ablate", base, &AblateManifest { run: &cfg, seeds: jobs.iter().map(|j| j.1).collect() }, &files)?;
    print!("{}", report.summary_csv());
    Ok(())
}

#[derive(Serialize)]
struct AblateManifest<'a> {
    run: &'a RunConfig,
    /// per-run seed, aligned with the run order (mode-major within a seed)
    seeds: Vec<u64>,
}

/// Grid points of a sweep.
pub fn sweep_points(alphas: &[f64], betas: &[f64], paper_axes: bool) -> Vec<(f64, f64)> {
    if paper_axes {
        let alphas = if alphas.is_empty() { &AXIS_ALPHAS[..] } else { alphas };
        let betas = if betas.is_empty() { &AXIS_BETAS[..] } else { betas };
        alphas.iter().map(|&x| (x, 1.0)).chain(betas.iter().map(|&b| (1.0, b))).collect()
    } else {
        alphas.iter().flat_map(|&x| betas.iter().map(move |&b| (x, b))).collect()
    }
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let (cfg, out) = resolve(&a.run)?;
    let alphas = if a.alphas.is_empty() && !a.paper_axes { vec![cfg.train.mixup.alpha] } else { a.alphas.clone() };
    let betas = if a.betas.is_empty() && !a.paper_axes { vec![cfg.train.mixup.beta_cap] } else { a.betas.clone() };
    let points = sweep_points(&alphas, &betas, a.paper_axes);
    let data = load_data(&cfg)?;
    let names: Vec<String> = points.iter().enumerate().map(|(k, (x, b))| format!("runs/{k:02}-alpha{x}-beta{b}")).collect();
    let jobs: Vec<(usize, f64, f64)> = points.iter().enumerate().map(|(k, &(x, b))| (k, x, b)).collect();
    let results = run_jobs(&jobs, a.parallel, |&(k, alpha, beta)| {
        let mut tc = cfg.train.clone();
        tc.mixup.mode = MixMode::Lh;
        tc.mixup.alpha = alpha;
        tc.mixup.beta_cap = beta;
        train_run(&data, &data.train, &tc, &cfg.bucket_edges, &out.join(&names[k]), None)
    })?;
    let mut csv = String::from("alpha,beta,micro_f1,macro_f1\n");
    for ((alpha, beta), m) in points.iter().zip(&results) {
        csv.push_str(&format!("{alpha},{beta},{},{}\n", m.test.micro_f1, m.test.macro_f1));
    }
    write(&out, "sweep.csv", &csv)?;
    let mut files = vec!["sweep.csv".to_string()];
    files.extend(names.iter().flat_map(|n| run_files(n)));
    write_manifest(&out, "sweep", cfg.train.seed, &cfg, &files)?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_sparse(a: &SparseArgs) -> Result<()> {
    let (cfg, out) = resolve(&a.run)?;
    for &r in &a.ratios {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidArgument(format!("ratio {r} outside (0, 1]")));
        }
    }
    let data = load_data(&cfg)?;
    let seed = cfg.train.seed;
    let subsets: Vec<DatasetSplit> = a.ratios.iter().map(|&r| downsample(&data.train, r, seed)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, MixMode)> = (0..a.ratios.len()).flat_map(|k| MixMode::ALL.map(|m| (k, m))).collect();
    let names: Vec<String> = jobs.iter().map(|&(k, m)| format!("runs/ratio{}-{m}", a.ratios[k])).collect();
    let results = run_jobs(&jobs, a.parallel, |&(k, mode)| {
        let mut tc = cfg.train.clone();
        tc.mixup.mode = mode;
        train_run(&data, &subsets[k], &tc, &cfg.bucket_edges, &out.join(format!("runs/ratio{}-{mode}", a.ratios[k])), None)
    })?;
    let mut csv = String::from("ratio,mode,n_train,micro_f1,macro_f1\n");
    for (&(k, mode), m) in jobs.iter().zip(&results) {
        csv.push_str(&format!("{},{mode},{},{},{}\n", a.ratios[k], m.n_train, m.test.micro_f1, m.test.macro_f1));
    }
    write(&out, "sparse.csv", &csv)?;
    let mut files = vec!["sparse.csv".to_string()];
    files.extend(names.iter().flat_map(|n| run_files(n)));
    #[derive(Serialize)]
    struct SparseManifest<'a> {
        run: &'a RunConfig,
        ratios: &'a [f64],
    }
    write_manifest(&out, "sparse", seed, &SparseManifest { run: &cfg, ratios: &a.ratios }, &files)?;
    print!("{csv}");
    Ok(())
}

pub fn ranks_csv(tax: &Taxonomy, ranked: &[(usize, f64)]) -> String {
    let mut out = String::from("rank,label,similarity\n");
    for (r, &(l, s)) in ranked.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", r + 1, tax.node(l).id, s));
    }
    out
}

pub fn cmd_rank_labels(a: &RankArgs) -> Result<String> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model: Model = ck.model()?;
    let ranked = rank_similar_labels(&model, &ck.taxonomy, &ck.vocabulary, &a.label, a.k)?;
    let csv = ranks_csv(&ck.taxonomy, &ranked);
    if let Some(out) = &a.out {
        create_dir(out)?;
        write(out, "ranks.csv", &csv)?;
        #[derive(Serialize)]
        struct RankManifest<'a> {
            checkpoint: &'a Path,
            label: &'a str,
            k: usize,
        }
        let mc = RankManifest {
            checkpoint: &a.checkpoint,
            label: &a.label,
            k: a.k,
        };
        write_manifest(out, "rank-labels", ck.config.seed, &mc, &["ranks.csv".into()])?;
    }
    print!("{csv}");
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_sweep_gives_seven_plus_seven() {
        let pts = sweep_points(&[], &[], true);
        assert_eq!(pts.len(), 14);
        assert!(pts[..7].iter().all(|p| p.1 == 1.0));
        assert!(pts[7..].iter().all(|p| p.0 == 1.0));
        assert_eq!(sweep_points(&[2.0], &[0.8], false), vec![(2.0, 0.8)]);
        assert_eq!(sweep_points(&[1.0, 2.0], &[0.8, 0.9], false).len(), 4);
    }

    #[test]
    fn config_needs_one_data_source() {
        let cfg = RunConfig::default();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            synthetic: Some(SyntheticSpec::default()),
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
        let both = RunConfig {
            data: Some(DataPaths {
                taxonomy: "t".into(),
                train: "a".into(),
                dev: "b".into(),
                test: "c".into(),
            }),
            ..cfg
        };
        assert!(both.validate().is_err());
    }

    #[test]
    fn summary_statistics() {
        let runs: Vec<SeedResult> = [(MixMode::Off, 0.5), (MixMode::Off, 0.7), (MixMode::Lh, 0.6), (MixMode::Lh, 0.8)]
            .iter()
            .enumerate()
            .map(|(k, &(mode, v))| SeedResult {
                mode,
                seed: k as u64,
                micro_f1: v,
                macro_f1: v,
            })
            .collect();
        let rep = summarize(&runs).unwrap();
        assert_eq!(rep.summary.len(), 2);
        assert!((rep.summary[0].macro_mean - 0.6).abs() < 1e-15);
        assert!((rep.summary[0].macro_std - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(rep.welch.len(), 2);
        assert!((rep.welch[0].t + 0.1 / 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(rep.runs_csv().lines().count(), 5);
    }

    #[test]
    fn parallel_jobs_keep_order() {
        let jobs: Vec<u64> = (0..20).collect();
        let seq = run_jobs(&jobs, false, |&j| Ok(j * j)).unwrap();
        let par = run_jobs(&jobs, true, |&j| Ok(j * j)).unwrap();
        assert_eq!(seq, par);
        assert!(run_jobs(&jobs, true, |&j| if j == 7 { Err(Error::ZeroNorm) } else { Ok(j) }).is_err());
    }
}
