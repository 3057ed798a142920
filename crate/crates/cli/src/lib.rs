//! Command-line front end: Poisson solving, identity checks, training,
//! evaluation and parameter counting.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mgnet::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mgnet::classic::{resnet_param_count, ResNetLayout};
use mgnet::data::{self, LabeledImage, SyntheticSpec};
use mgnet::equivalence::{self, EquivalenceReport, TheoremId, SUITE_TOLERANCE};
use mgnet::grid::ProlongationMode;
use mgnet::mgnet::{count_params, MgNet, MgNetConfig};
use mgnet::poisson::{direct_solve, PoissonHierarchy, SmootherSpec};
use mgnet::rng::seeded;
use mgnet::train::{evaluate, train_from, SgdState, TrainConfig};
use mgnet::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Caps the worker threads of the global pool.
pub const THREADS_ENV: &str = "MGNET_THREADS";

#[derive(Parser, Debug)]
#[command(name = "mgnet", version, about = "Multigrid solvers and multigrid-structured networks")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Iterated \-cycle multigrid on the 5-point Poisson problem.
    SolvePoisson(SolveArgs),
    /// Checks the multigrid/network identities.
    Verify(VerifyArgs),
    /// Trains an MgNet.
    Train(TrainArgs),
    /// Evaluates a checkpoint.
    Eval(EvalArgs),
    /// Counts trainable parameters.
    CountParams(CountArgs),
}

#[derive(clap::Args, Debug)]
struct SolveArgs {
    /// Grid side, 2^s + 1.
    #[arg(long, default_value_t = 17)]
    size: usize,
    /// Levels of the hierarchy; 0 uses every level down to 3x3.
    #[arg(long, default_value_t = 0)]
    levels: usize,
    /// Smoothing steps per level.
    #[arg(long, default_value_t = 2)]
    nu: usize,
    #[arg(long, default_value_t = 0.8)]
    omega: f64,
    #[arg(long, default_value_t = 50)]
    cycles: usize,
    /// Seed of the random right-hand side.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop once the residual is below this fraction of ||f||.
    #[arg(long, default_value_t = 1e-12)]
    rtol: f64,
    /// Relative error against the direct solve that counts as converged.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TheoremArg {
    All,
    Mg0,
    Dual,
    Sigma,
    Embed,
}

#[derive(clap::Args, Debug)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    theorem: TheoremArg,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds checked.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// CIFAR binary file or directory, or `synthetic[:key=value,...]`.
    #[arg(long)]
    data: String,
    /// Held-out data reported after every epoch.
    #[arg(long)]
    test: Option<String>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: String,
    /// Run configuration; defaults to `config.json` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct CountArgs {
    /// `resnet18`, `resnet34`, `mgnet` (with --config) or a preset such as
    /// `mgnet-256-256-pi1`.
    #[arg(long)]
    model: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    classes: usize,
}

/// Contents of `train --config`, also written to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: MgNetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Per-channel standardization with statistics of the training split.
    #[serde(default)]
    pub standardize: bool,
    /// Filled in by `train` when `standardize` is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_stats: Option<(Vec<f64>, Vec<f64>)>,
    /// Checkpoint period in epochs.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_checkpoint_every() -> usize {
    10
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SolveSummary {
    pub size: usize,
    pub levels: usize,
    pub nu: usize,
    pub omega: f64,
    pub seed: u64,
    pub cycles_run: usize,
    pub residual_history: Vec<f64>,
    pub monotone: bool,
    pub mean_contraction: f64,
    /// `||u - u*|| / ||u*||` against the direct solve.
    pub relative_error: f64,
    pub converged: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerifySummary {
    pub tolerance: f64,
    pub passed: bool,
    pub max_abs_discrepancy: f64,
    pub reports: Vec<EquivalenceReport>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EpochLine {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    pub parameters: usize,
    pub checkpoint: PathBuf,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CountSummary {
    pub model: String,
    pub classes: usize,
    pub params: usize,
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    configure_threads();
    let outcome = match cli.command {
        Command::SolvePoisson(a) => solve_poisson(&a),
        Command::Verify(a) => verify(&a),
        Command::Train(a) => train(&a).map(|_| true),
        Command::Eval(a) => eval(&a).map(|_| true),
        Command::CountParams(a) => count(&a).map(|_| true),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILED,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                EXIT_USAGE
            } else {
                EXIT_FAILED
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // a pool built earlier in the process keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn solve_poisson(a: &SolveArgs) -> Result<bool> {
    let mode = ProlongationMode::Bilinear;
    let hierarchy = if a.levels == 0 {
        PoissonHierarchy::<f64>::full_depth(a.size, mode)
    } else {
        PoissonHierarchy::<f64>::new(a.size, a.levels, mode)
    }
    .map_err(|e| usage(e.to_string()))?;
    let levels = hierarchy.levels();
    let f = Tensor::random_normal(a.size, a.size, 1, 1.0, &mut seeded(a.seed));
    let nu = vec![a.nu; levels];
    let smoother = SmootherSpec::one(a.omega);
    let (u, report) = hierarchy.solve(&f, &nu, smoother, a.cycles, a.rtol)?;
    let exact = direct_solve(hierarchy.operator(1)?, &f)?;
    let relative_error = u.sub(&exact)?.norm() / exact.norm();
    let summary = SolveSummary {
        size: a.size,
        levels,
        nu: a.nu,
        omega: a.omega,
        seed: a.seed,
        cycles_run: report.cycles_run,
        monotone: report.is_monotone(),
        mean_contraction: report.mean_contraction(),
        residual_history: report.residual_history,
        relative_error,
        converged: relative_error <= a.tol,
    };
    if let Some(out) = &a.out {
        write_json(out, &summary)?;
    }
    println!(
        "{}x{} levels={levels} cycles={} relative_error={relative_error:.3e} monotone={}",
        a.size, a.size, summary.cycles_run, summary.monotone
    );
    Ok(summary.converged)
}

fn verify(a: &VerifyArgs) -> Result<bool> {
    let theorems: Vec<TheoremId> = match a.theorem {
        TheoremArg::All => TheoremId::ALL.to_vec(),
        TheoremArg::Mg0 => vec![TheoremId::Mg0],
        TheoremArg::Dual => vec![TheoremId::Dual],
        TheoremArg::Sigma => vec![TheoremId::Sigma],
        TheoremArg::Embed => vec![TheoremId::Embed],
    };
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let mut reports = Vec::new();
    for seed in a.seed..a.seed + a.seeds {
        for &t in &theorems {
            reports.push(equivalence::verify(t, seed)?);
        }
    }
    let max = reports.iter().map(|r| r.max_abs_discrepancy).fold(0.0, f64::max);
    let summary = VerifySummary {
        tolerance: SUITE_TOLERANCE,
        passed: reports.iter().all(|r| r.passes(SUITE_TOLERANCE)),
        max_abs_discrepancy: max,
        reports,
    };
    write_json(&a.out, &summary)?;
    for &t in &theorems {
        let worst = summary
            .reports
            .iter()
            .filter(|r| r.theorem == t)
            .map(|r| r.max_abs_discrepancy)
            .fold(0.0, f64::max);
        let verdict = if worst < SUITE_TOLERANCE { "pass" } else { "FAIL" };
        println!("{:<6} {verdict} max discrepancy {worst:.3e}", t.name());
    }
    Ok(summary.passed)
}

/// Where the images of `--data` come from.
#[derive(Debug, PartialEq)]
enum DataSource {
    Synthetic(SyntheticSpec),
    Path(PathBuf),
}

/// Parses `synthetic[:classes=K,per_class=N,size=S,channels=C,seed=X]` or a
/// path.
fn parse_source(text: &str) -> Result<DataSource> {
    let Some(rest) = text.strip_prefix("synthetic") else {
        return Ok(DataSource::Path(PathBuf::from(text)));
    };
    let mut spec = SyntheticSpec {
        classes: 2,
        per_class: 200,
        size: 16,
        channels: 3,
        seed: 0,
    };
    let rest = match rest {
        "" => "",
        r => r.strip_prefix(':').ok_or_else(|| usage(format!("bad data source {text}")))?,
    };
    for item in rest.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("expected key=value, got {item}")))?;
        let n: u64 = v.parse().map_err(|_| usage(format!("{k}: {v} is not a number")))?;
        match k {
            "classes" => spec.classes = n as usize,
            "per_class" => spec.per_class = n as usize,
            "size" => spec.size = n as usize,
            "channels" => spec.channels = n as usize,
            "seed" => spec.seed = n,
            _ => return Err(usage(format!("unknown synthetic key {k}"))),
        }
    }
    Ok(DataSource::Synthetic(spec))
}

/// Loads a source; directories contribute their training or test batches.
fn load_source(text: &str, classes: usize, training: bool) -> Result<Vec<LabeledImage<f64>>> {
    match parse_source(text)? {
        DataSource::Synthetic(spec) => Ok(data::gen_synthetic_spec(&spec)?),
        DataSource::Path(path) => {
            let files = if path.is_dir() {
                let mut files: Vec<PathBuf> = fs::read_dir(&path)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                        if training {
                            name.starts_with("data_batch") || name == "train.bin"
                        } else {
                            name.starts_with("test_batch") || name == "test.bin"
                        }
                    })
                    .collect();
                files.sort();
                if files.is_empty() {
                    bail!("no CIFAR batches in {}", path.display());
                }
                files
            } else {
                vec![path]
            };
            let mut items = Vec::new();
            for f in files {
                let loaded = if classes == 100 {
                    data::load_cifar100(&f)
                } else {
                    data::load_cifar10(&f)
                };
                items.extend(loaded.with_context(|| format!("reading {}", f.display()))?);
            }
            Ok(items)
        }
    }
}

fn read_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    cfg.model.validate().map_err(|e| usage(e.to_string()))?;
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    if cfg.checkpoint_every == 0 {
        return Err(usage("checkpoint_every must be at least 1"));
    }
    Ok(cfg)
}

fn prepare(items: &mut [LabeledImage<f64>], cfg: &RunConfig) -> Result<()> {
    if let Some((mean, std)) = &cfg.channel_stats {
        data::standardize(items, mean, std)?;
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = read_run_config(&a.config)?;
    let mut items = load_source(&a.data, cfg.model.classes, true)?;
    if cfg.standardize {
        cfg.channel_stats = Some(data::channel_stats(&items)?);
    }
    prepare(&mut items, &cfg)?;
    let mut test = match &a.test {
        Some(t) => Some(load_source(t, cfg.model.classes, false)?),
        None => None,
    };
    if let Some(t) = test.as_mut() {
        prepare(t, &cfg)?;
    }
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;

    let start = Instant::now();
    let mut net = MgNet::<f64>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut state = SgdState::new(net.params());
    let mut metrics = BufWriter::new(File::create(a.out.join("metrics.jsonl"))?);
    let mut last_test = None;
    let history = train_from(&mut net, &cfg.train, &items, &mut state, 0, |m, model, st| {
        let eval = match &test {
            Some(t) => Some(evaluate(&mut model.clone(), t, 100)?),
            None => None,
        };
        last_test = eval.as_ref().map(|e| e.accuracy);
        let line = EpochLine {
            epoch: m.epoch,
            learning_rate: m.learning_rate,
            loss: m.loss,
            accuracy: m.accuracy,
            test_loss: eval.as_ref().map(|e| e.loss),
            test_accuracy: eval.as_ref().map(|e| e.accuracy),
        };
        let io = |e: std::io::Error| mgnet::Error::Io(e);
        writeln!(metrics, "{}", serde_json::to_string(&line)?).map_err(io)?;
        metrics.flush().map_err(io)?;
        if m.epoch % cfg.checkpoint_every == 0 {
            let ck = Checkpoint::from_params(model.params()).with_state(st);
            save_checkpoint(a.out.join(format!("checkpoint_epoch{:04}.mgnet", m.epoch)), &ck)?;
        }
        Ok(())
    })?;
    let final_path = a.out.join("model.mgnet");
    save_checkpoint(&final_path, &Checkpoint::from_params(net.params()).with_state(&state))?;
    let last = history.last();
    let summary = TrainSummary {
        epochs: history.len(),
        final_loss: last.map_or(f64::NAN, |m| m.loss),
        final_accuracy: last.map_or(f64::NAN, |m| m.accuracy),
        test_accuracy: last_test,
        parameters: net.params().trainable_count(),
        checkpoint: final_path,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    print_json(&summary)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let config_path = match &a.config {
        Some(p) => p.clone(),
        None => a
            .checkpoint
            .parent()
            .map(|d| d.join("config.json"))
            .ok_or_else(|| usage("cannot locate config.json; pass --config"))?,
    };
    let cfg = read_run_config(&config_path)?;
    let mut net = MgNet::<f64>::new(cfg.model.clone(), 0)?;
    load_checkpoint(&a.checkpoint)?.load_into(net.params_mut())?;
    let mut items = load_source(&a.data, cfg.model.classes, false)?;
    prepare(&mut items, &cfg)?;
    let result = evaluate(&mut net, &items, a.batch_size.max(1))?;
    if let Some(out) = &a.out {
        write_json(out, &result)?;
    }
    print_json(&result)
}

fn count(a: &CountArgs) -> Result<()> {
    let params = match a.model.as_str() {
        "resnet18" => resnet_param_count(&ResNetLayout::resnet18(a.classes))?,
        "resnet34" => resnet_param_count(&ResNetLayout::resnet34(a.classes))?,
        "mgnet" => {
            let path = a.config.as_ref().ok_or_else(|| usage("--model mgnet needs --config"))?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            // either a bare model configuration or a full run configuration
            let mut cfg: MgNetConfig = match serde_json::from_str::<RunConfig>(&text) {
                Ok(run) => run.model,
                Err(_) => serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?,
            };
            cfg.classes = a.classes;
            count_params(&cfg)?
        }
        preset => {
            let cfg = MgNetConfig::preset(preset, a.classes).ok_or_else(|| {
                usage(format!(
                    "unknown model {preset}; expected resnet18, resnet34, mgnet or one of {}",
                    MgNetConfig::PRESETS.join(", ")
                ))
            })?;
            count_params(&cfg)?
        }
    };
    print_json(&CountSummary {
        model: a.model.clone(),
        classes: a.classes,
        params,
    })
}
