//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on invalid input or configuration, 2 on
//! runtime failures. Every command writes `config.<command>.json` into
//! `--out-dir` with all effective settings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::annotation::{prepare, read_traces, LabelingConfig};
use crate::baseline::{eval_binary, train_baseline, BaselineModel};
use crate::data::{
    read_checkpoint, read_embedding_table, read_labeled_dataset, read_manifest, write_checkpoint,
    write_labeled_dataset, Split, EMBEDDINGS_FILE, LABELS_FILE, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::evaluator::{
    aggregate, compare, evaluate_checkpoint, run_matrix, summary_table, CiUnit, MatrixConfig, RunRecord, RunReport,
};
use crate::gradcheck::{run_suites, MAX_REL_ERR};
use crate::losses::{Distance, LossConfig};
use crate::synth::{generate, SynthConfig};
use crate::trainer::{train_fsl, Method, TrainConfig};
use crate::VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "fsl-engage", version, about = "Few-shot engagement modelling across games")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
struct Global {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for run-matrix (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for config echoes and default outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn annotation traces and embeddings into a labelled dataset directory.
    Prepare(PrepareArgs),
    /// Generate a synthetic multidomain dataset directory.
    Synth(SynthArgs),
    /// Train one model and write its checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on test episodes.
    Eval(EvalArgs),
    /// Train and evaluate a grid of methods, ways and shots.
    RunMatrix(MatrixArgs),
    /// Compare two reports by 95% CI overlap.
    Compare(CompareArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
struct PrepareArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 10)]
    min_per_class: usize,
    #[arg(long, default_value_t = 10.0)]
    resample_hz: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 12)]
    domains: usize,
    #[arg(long, default_value_t = 30)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    spread: f64,
    #[arg(long, default_value_t = 1.0)]
    gap: f64,
    #[arg(long, default_value_t = 0.5)]
    flip: f64,
    /// Train, valid and test domain counts (default: thirds).
    #[arg(long, value_delimiter = ',', num_args = 3)]
    splits: Option<Vec<usize>>,
    /// Output directory (default: <out-dir>/synth).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct OptimArgs {
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    /// Accept a learning rate outside (1e-3, 1e-2).
    #[arg(long)]
    allow_lr: bool,
    #[arg(long, default_value_t = 20)]
    episodes_per_epoch: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    /// Use squared Euclidean distance in the prototypical loss.
    #[arg(long)]
    squared: bool,
    #[arg(long, default_value_t = 5)]
    query: usize,
}

impl OptimArgs {
    fn config(&self, method: Method, n_way: usize, k_shot: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            lr0: self.lr,
            allow_any_lr: self.allow_lr,
            episodes_per_epoch: self.episodes_per_epoch,
            patience_epochs: self.patience,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            q_query: self.query,
            n_way,
            k_shot,
            seed,
            loss: LossConfig {
                distance: if self.squared { Distance::SquaredEuclidean } else { Distance::Euclidean },
                tau: self.tau,
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 5)]
    shot: usize,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path (default: <out-dir>/<method>.prj).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 5)]
    shot: usize,
    #[arg(long, default_value_t = 5)]
    query: usize,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[arg(long)]
    squared: bool,
    /// Report path (default: <out-dir>/eval.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct MatrixArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "pn,mn,sc,baseline")]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "5,10")]
    ways: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    shots: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 200)]
    test_episodes: usize,
    #[arg(long, default_value = "episode")]
    ci_unit: String,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args, Serialize)]
struct CompareArgs {
    report_a: PathBuf,
    report_b: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, value_delimiter = ',', default_value = "8")]
    dim: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

/// Written artifact: the deterministic `payload` plus provenance. The
/// timestamp is kept out of the payload so reruns compare equal on it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact {
    pub tool_version: String,
    pub command: String,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub payload: Value,
    pub generated_at_unix_s: u64,
}

impl Artifact {
    fn new(command: &str, config: Value, inputs: BTreeMap<String, String>, payload: Value) -> Self {
        let generated_at_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Self { tool_version: VERSION.into(), command: command.into(), config, inputs, payload, generated_at_unix_s }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn write(&self, path: &Path) -> Result<()> {
        write_json(path, &serde_json::to_value(self).expect("artifact serialises"))
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("json serialises") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hash_inputs(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths.iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
}

fn dataset_files(dir: &Path) -> Vec<PathBuf> {
    [MANIFEST_FILE, LABELS_FILE, EMBEDDINGS_FILE].iter().map(|f| dir.join(f)).collect()
}

struct Ctx {
    global: Global,
}

impl Ctx {
    fn echo_config(&self, command: &str, args: &impl Serialize) -> Result<()> {
        let value = json!({
            "tool_version": VERSION,
            "command": command,
            "global": self.global,
            "args": args,
        });
        write_json(&self.global.out_dir.join(format!("config.{command}.json")), &value)
    }

    fn emit(&self, text: &str, payload: &Value) {
        match self.global.format {
            Format::Text => print!("{text}"),
            Format::Json => println!("{}", serde_json::to_string_pretty(payload).expect("json serialises")),
        }
    }

    fn config_value(&self, args: &impl Serialize) -> Value {
        json!({ "global": self.global, "args": args })
    }
}

fn parse_method(s: &str) -> Result<Method> {
    s.parse()
}

fn cmd_prepare(ctx: &Ctx, a: &PrepareArgs) -> Result<()> {
    ctx.echo_config("prepare", a)?;
    let config = LabelingConfig {
        epsilon: a.epsilon,
        min_samples_per_class: a.min_per_class,
        resample_hz: a.resample_hz,
        ..LabelingConfig::default()
    };
    config.validate()?;
    let manifest = read_manifest(&a.manifest)?;
    let traces = read_traces(&a.traces)?;
    let table = read_embedding_table(&a.embeddings)?;
    let prepared = prepare(&manifest, &traces, &table, &config)?;
    write_labeled_dataset(&prepared.dataset, &a.out)?;
    let payload = json!({
        "stats": prepared.stats,
        "subcorpus_median": prepared.dataset.subcorpus_median(),
        "discarded_games": prepared.discarded_games,
        "dropped_missing_embedding": prepared.dropped_missing_embedding,
        "degenerate_traces": prepared.degenerate_traces,
        "labeling": config,
    });
    let inputs = hash_inputs(&[a.manifest.clone(), a.traces.clone(), a.embeddings.clone()])?;
    Artifact::new("prepare", ctx.config_value(a), inputs, payload.clone()).write(&a.out.join("stats.json"))?;
    let text = format!(
        "{}\ndiscarded games: {:?}\n",
        prepared.stats.table_row(&manifest.subcorpus_id),
        prepared.discarded_games
    );
    ctx.emit(&text, &payload);
    Ok(())
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    ctx.echo_config("synth", a)?;
    let split_counts = match &a.splits {
        Some(s) => (s[0], s[1], s[2]),
        None => (a.domains / 3, a.domains / 3, a.domains / 3),
    };
    let config = SynthConfig {
        n_domains: a.domains,
        samples_per_class: a.per_class,
        dim: a.dim,
        cluster_spread: a.spread,
        inter_class_gap: a.gap,
        flip_fraction: a.flip,
        split_counts,
        seed: ctx.global.seed,
    };
    let out = generate(&config)?;
    let dir = a.out.clone().unwrap_or_else(|| ctx.global.out_dir.join("synth"));
    out.write(&dir)?;
    let payload = json!({
        "config": config,
        "files": hash_inputs(&dataset_files(&dir))?,
        "ground_truth": out.manifest.metadata.get("ground_truth"),
    });
    ctx.emit(&format!("wrote {} samples to {}\n", out.labels.len(), dir.display()), &payload);
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    ctx.echo_config("train", a)?;
    let method = parse_method(&a.method)?;
    let config = a.optim.config(method, a.way, a.shot, ctx.global.seed);
    config.validate()?;
    let data = a.data.as_ref().ok_or_else(|| Error::Validation("train needs --data DIR".into()))?;
    let dataset = read_labeled_dataset(data)?;
    let (ckpt, log) = if method == Method::Baseline {
        let (model, log) = train_baseline(&dataset, &config)?;
        (model.to_checkpoint(config.seed, config.hash()), log)
    } else {
        train_fsl(&dataset, &config)?
    };
    let path = a.out.clone().unwrap_or_else(|| ctx.global.out_dir.join(format!("{method}.prj")));
    write_checkpoint(&ckpt, &path)?;
    let payload = json!({ "config": config, "log": log, "checkpoint": path.display().to_string() });
    let mut log_path = path.clone().into_os_string();
    log_path.push(".log.json");
    Artifact::new("train", ctx.config_value(a), hash_inputs(&dataset_files(data))?, payload.clone())
        .write(Path::new(&log_path))?;
    let text = format!(
        "{method}: best epoch {} of {}, validation accuracy {:.4}; checkpoint {}\n",
        log.best_epoch,
        log.epochs.len(),
        log.best_val_accuracy,
        path.display()
    );
    ctx.emit(&text, &payload);
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    ctx.echo_config("eval", a)?;
    let ckpt = read_checkpoint(&a.ckpt)?;
    let dataset = read_labeled_dataset(&a.data)?;
    let method = parse_method(&ckpt.metadata.method)?;
    let loss = LossConfig {
        distance: if a.squared { Distance::SquaredEuclidean } else { Distance::Euclidean },
        tau: a.tau,
    };
    loss.validate()?;
    let accuracies = if method == Method::Baseline {
        vec![eval_binary(&BaselineModel::from_checkpoint(&ckpt)?, &dataset, Split::Test)?]
    } else {
        let spec = crate::sampler::EpisodeSpec {
            n_way: a.way,
            k_shot: a.shot,
            q_query: a.query,
            split: Split::Test,
            seed: ctx.global.seed,
        };
        evaluate_checkpoint(&ckpt, &dataset, spec, a.episodes, &loss)?
    };
    let report = aggregate(
        method,
        a.way,
        a.shot,
        a.query,
        vec![RunRecord { seed: ctx.global.seed, episode_accuracies: accuracies }],
        CiUnit::Episode,
    )?;
    let payload = serde_json::to_value(&report).expect("report serialises");
    let mut files = dataset_files(&a.data);
    files.push(a.ckpt.clone());
    let path = a.out.clone().unwrap_or_else(|| ctx.global.out_dir.join("eval.json"));
    Artifact::new("eval", ctx.config_value(a), hash_inputs(&files)?, payload.clone()).write(&path)?;
    let text = format!(
        "{method} {}-way {}-shot: {:.2} ± {:.2} over {} episodes\n",
        a.way,
        a.shot,
        100.0 * report.mean_accuracy,
        100.0 * report.ci95_half_width,
        report.episodes_per_run()
    );
    ctx.emit(&text, &payload);
    Ok(())
}

fn cmd_run_matrix(ctx: &Ctx, a: &MatrixArgs) -> Result<()> {
    ctx.echo_config("run-matrix", a)?;
    let methods = a.methods.iter().map(|m| parse_method(m)).collect::<Result<Vec<_>>>()?;
    let config = MatrixConfig {
        methods,
        ways: a.ways.clone(),
        shots: a.shots.clone(),
        runs: a.runs,
        test_episodes: a.test_episodes,
        ci_unit: a.ci_unit.parse()?,
        train: a.optim.config(Method::Pn, 5, 5, ctx.global.seed),
        seed: ctx.global.seed,
    };
    config.validate()?;
    config.train.validate()?;
    let dataset = read_labeled_dataset(&a.data)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = ctx.global.threads {
        if n == 0 {
            return Err(Error::Validation("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Train(format!("cannot start worker pool: {e}")))?;
    let report = pool.install(|| run_matrix(&dataset, &config))?;

    let inputs = hash_inputs(&dataset_files(&a.data))?;
    let cfg_value = ctx.config_value(a);
    let out = &ctx.global.out_dir;
    for cell in &report.cells {
        let payload = serde_json::to_value(cell).expect("cell serialises");
        let name = format!("{}_{}w{}s.json", cell.method, cell.n_way, cell.k_shot);
        Artifact::new("run-matrix", cfg_value.clone(), inputs.clone(), payload).write(&out.join("cells").join(name))?;
    }
    let table = summary_table(&report);
    let payload = serde_json::to_value(&report).expect("report serialises");
    Artifact::new("run-matrix", cfg_value, inputs, payload.clone()).write(&out.join("matrix.json"))?;
    let table_path = out.join("summary.txt");
    fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    ctx.emit(&table, &payload);
    let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        return Err(Error::Train(format!("{failed} of {} cells failed", report.cells.len())));
    }
    Ok(())
}

/// A `RunReport` from an eval artifact or a run-matrix cell artifact.
fn load_report(path: &Path) -> Result<RunReport> {
    let artifact = Artifact::read(path)?;
    let value = match artifact.payload.get("report") {
        Some(inner) if artifact.payload.get("method").is_some() && artifact.payload.get("per_run").is_none() => {
            inner.clone()
        }
        _ => artifact.payload,
    };
    if value.is_null() {
        return Err(Error::Validation(format!("{} holds a failed cell without a report", path.display())));
    }
    serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: not a run report: {e}", path.display())))
}

fn cmd_compare(ctx: &Ctx, a: &CompareArgs) -> Result<()> {
    ctx.echo_config("compare", a)?;
    let (ra, rb) = (load_report(&a.report_a)?, load_report(&a.report_b)?);
    let verdict = compare(&ra, &rb);
    let describe = |r: &RunReport, p: &Path| {
        format!(
            "{} ({} {}-way {}-shot): {:.4} ± {:.4}",
            p.display(),
            r.method,
            r.n_way,
            r.k_shot,
            r.mean_accuracy,
            r.ci95_half_width
        )
    };
    let word = match verdict {
        crate::evaluator::Verdict::OnPar => "on_par".to_string(),
        crate::evaluator::Verdict::FirstHigher => format!("higher: {}", a.report_a.display()),
        crate::evaluator::Verdict::SecondHigher => format!("higher: {}", a.report_b.display()),
    };
    let text = format!("{}\n{}\n{word}\n", describe(&ra, &a.report_a), describe(&rb, &a.report_b));
    let payload = json!({
        "verdict": verdict,
        "a": { "mean": ra.mean_accuracy, "ci95_half_width": ra.ci95_half_width },
        "b": { "mean": rb.mean_accuracy, "ci95_half_width": rb.ci95_half_width },
    });
    ctx.emit(&text, &payload);
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Result<()> {
    ctx.echo_config("gradcheck", a)?;
    if a.trials == 0 || a.dim.contains(&0) {
        return Err(Error::Validation("--trials and --dim must be positive".into()));
    }
    let mut results = Vec::new();
    for &dim in &a.dim {
        results.extend(run_suites(dim, a.trials, ctx.global.seed)?);
    }
    let mut text = String::new();
    for r in &results {
        text += &format!(
            "{:<12} dim {:>3}  trials {:>4}  max rel err {:.3e}  {}\n",
            r.name,
            r.dim,
            r.trials,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let payload = json!({ "threshold": MAX_REL_ERR, "suites": results });
    ctx.emit(&text, &payload);
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Error::Contract("gradient check failed".into()))
    }
}

fn exit_code(err: &Error) -> i32 {
    if err.is_validation() || matches!(err, Error::Sampler(_)) {
        1
    } else {
        2
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let ctx = Ctx { global: cli.global };
    let result = match &cli.command {
        Command::Prepare(a) => cmd_prepare(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::RunMatrix(a) => cmd_run_matrix(&ctx, a),
        Command::Compare(a) => cmd_compare(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
