//! `adamorph` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! runtime error, 3 check failure. `ADAMORPH_THREADS` caps worker threads.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::checks::{self, Fault, Suite};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, predict_for, write_report};
use crate::model::AdaMorph;
use crate::synth::io::{read_windows, write_windows};
use crate::synth::{generate_dataset, read_dataset, write_dataset, Dataset, Split};
use crate::trainer::{self, checkpoint, dataset_fingerprint, fit_stats, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;
pub const THREADS_ENV: &str = "ADAMORPH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "adamorph", version, about = "Embodiment-conditioned motion retargeting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired human/robot dataset.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Score a checkpoint on dataset splits and analyse its prompts.
    Eval(EvalArgs),
    /// Retarget the human side of a window file to one robot.
    Retarget(RetargetArgs),
    /// Run verification suites.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the configuration file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory; defaults to runs/<timestamp>-seed<seed>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides train.total_steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from a checkpoint; its training configuration and seed win.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split to evaluate; repeatable. Defaults to eval.splits.
    #[arg(long = "split")]
    pub splits: Vec<Split>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetargetArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Window file in the dataset record format.
    #[arg(long)]
    pub input: PathBuf,
    /// Target robot id.
    #[arg(long)]
    pub robot: usize,
    /// Output window file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// geometry, grad, kinematics or all.
    #[arg(long, default_value = "all")]
    pub suite: Suite,
    /// Negative control: skip-gram-schmidt.
    #[arg(long)]
    pub inject_fault: Option<Fault>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    // A pool built earlier in the process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(command: Command) -> Result<i32> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Retarget(a) => retarget(a),
        Command::Check(a) => check(a),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.paths.out.clone()).unwrap_or_else(|| {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        PathBuf::from("runs").join(format!("{secs}-seed{}", cfg.seed))
    })
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("missing --{name} (or paths.{name} in the config)")))
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
    }
    read_dataset(dir)
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    let mut cfg = load_config(&a.common)?;
    let out = output_dir(a.out, &cfg);
    let ds = generate_dataset(&cfg.data, cfg.seed)?;
    let manifest = write_dataset(&out, &ds)?;
    cfg.paths.out = Some(out.clone());
    cfg.echo(&out)?;
    for (split, entry) in &manifest.splits {
        println!("{split}: {} windows, checksum {}", entry.records, entry.checksum);
    }
    println!("wrote dataset for {} robots to {}", ds.robots.len(), out.display());
    Ok(EXIT_OK)
}

fn train(a: TrainArgs) -> Result<i32> {
    let mut cfg = load_config(&a.common)?;
    if let Some(steps) = a.steps {
        cfg.train.total_steps = steps;
        cfg.train.validate()?;
    }
    let data = required(a.data, &cfg.paths.data, "data")?;
    let out = output_dir(a.out, &cfg);
    let ds = open_dataset(&data)?;
    let fingerprint = dataset_fingerprint(&ds);
    let mut t = match &a.resume {
        Some(path) => {
            let t = checkpoint::load(path)?;
            if t.dataset_fingerprint != fingerprint {
                return Err(Error::Config(format!(
                    "{} was trained on a different dataset than {}",
                    path.display(),
                    data.display()
                )));
            }
            cfg.train = t.config.clone();
            cfg.seed = t.seed;
            carry_log(path, &out)?;
            t
        }
        None => {
            let model_cfg = cfg.model.build(ds.joints(), ds.config.window, ds.robot_dofs());
            let model = AdaMorph::new(model_cfg, cfg.seed)?;
            Trainer::new(model, fit_stats(&ds)?, cfg.train.clone(), cfg.seed, fingerprint)?
        }
    };
    cfg.paths.data = Some(data);
    cfg.paths.out = Some(out.clone());
    cfg.echo(&out)?;
    let start = t.step;
    let records = trainer::train(&mut t, &ds, &out)?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!(
            "steps {start}..{}: l_total {:.4} -> {:.4}",
            t.step, first.losses.l_total, last.losses.l_total
        );
    }
    println!("wrote {}", trainer::RunPaths { dir: out }.final_checkpoint().display());
    Ok(EXIT_OK)
}

/// Seeds a fresh run directory with the log of the run a checkpoint came
/// from, so the resumed log covers every step.
fn carry_log(checkpoint: &Path, out: &Path) -> Result<()> {
    let dst = trainer::RunPaths { dir: out.to_path_buf() }.log();
    let src = checkpoint.parent().map(|d| trainer::RunPaths { dir: d.to_path_buf() }.log());
    match src {
        Some(src) if src.is_file() && !dst.exists() => {
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            std::fs::copy(&src, &dst).map_err(|e| Error::io(&dst, e))?;
            Ok(())
        }
        _ => Ok(()),
    }
}

fn eval(a: EvalArgs) -> Result<i32> {
    let mut cfg = load_config(&a.common)?;
    let ckpt = required(a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let data = required(a.data, &cfg.paths.data, "data")?;
    let out = output_dir(a.out, &cfg);
    if !a.splits.is_empty() {
        cfg.eval.splits = a.splits;
    }
    let ds = open_dataset(&data)?;
    let t = checkpoint::load(&ckpt)?;
    if t.model.config.robot_dofs != ds.robot_dofs() {
        return Err(Error::Config(format!(
            "checkpoint robot table {:?} does not match dataset {:?}",
            t.model.config.robot_dofs,
            ds.robot_dofs()
        )));
    }
    let splits: Vec<(Split, &[_])> = cfg.eval.splits.iter().map(|&s| (s, ds.split(s))).collect();
    let report = evaluate(&t.model, &t.stats, &ds.robots, &splits, t.step, cfg.seed)?;
    write_report(&out, &report)?;
    cfg.paths.checkpoint = Some(ckpt);
    cfg.paths.data = Some(data);
    cfg.paths.out = Some(out.clone());
    cfg.echo(&out)?;
    let fmt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.3}"));
    for split in &report.splits {
        for r in &split.robots {
            println!(
                "{} robot {}: root pcc median {}, activity pcc median {} ({} windows)",
                split.split.name(),
                r.robot,
                fmt(r.root_velocity_pcc.median),
                fmt(r.activity_pcc.median),
                r.windows
            );
        }
    }
    println!(
        "prompt similarity medians: within family {}, across {}",
        fmt(report.prompts.within_family_median),
        fmt(report.prompts.across_family_median)
    );
    println!("wrote report to {}", out.display());
    Ok(EXIT_OK)
}

fn retarget(a: RetargetArgs) -> Result<i32> {
    let mut cfg = load_config(&a.common)?;
    let ckpt = required(a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let (model, stats) = checkpoint::load_model(&ckpt)?;
    let windows = read_windows(&a.input)?;
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict_for(&model, &stats, &windows, Some(a.robot))?;
    let out: Vec<_> = preds.into_iter().zip(&windows).map(|(p, w)| p.into_window(w)).collect();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_windows(&a.out, &out)?;
    cfg.paths.checkpoint = Some(ckpt);
    cfg.paths.out = Some(a.out.clone());
    let echo_dir = a.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    cfg.echo(echo_dir)?;
    println!("retargeted {} windows to robot {} -> {}", out.len(), a.robot, a.out.display());
    Ok(EXIT_OK)
}

fn check(a: CheckArgs) -> Result<i32> {
    let results = checks::run(a.suite, a.seed, a.inject_fault)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_CHECK })
}
