//! `rotkit`: dataset generation, training, evaluation and run reports.
//!
//! Exit codes: 0 success, 1 I/O and other failures, 2 usage or
//! configuration errors, 3 numerical abort.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rotkit::curriculum::MaskRatioLog;
use rotkit::data::{generate_dataset, test_manifest_path, train_manifest_path, Dataset, GenerateConfig};
use rotkit::metrics::{angle_errors, random_errors, summarize, truth_errors, EvalReport};
use rotkit::trainer::{read_checkpoint, train, write_checkpoint, ScheduleSpec, ThresholdMode, TrainConfig};

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "rotkit", version, about = "Semi-supervised rotation regression on SO(3)")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData(GenDataArgs),
    /// Supervised pretraining then curriculum SSL.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint (or a reference predictor) on a test split.
    Eval(EvalArgs),
    /// Mask-ratio curves and a final-metrics table for finished runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training samples.
    #[arg(long)]
    n: Option<usize>,
    /// Categories.
    #[arg(long)]
    k: Option<usize>,
    /// Labeled fraction of the training split.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    test_per_category: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScheduleName {
    None,
    Fixed,
    Multistage,
    Adaptive,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeName {
    Absolute,
    Quantile,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest, or a directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Test manifest (or `gen-data` directory) evaluated during training.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    total_iters: Option<usize>,
    #[arg(long)]
    supervised_iters: Option<usize>,
    #[arg(long)]
    batch_labeled: Option<usize>,
    #[arg(long)]
    batch_unlabeled: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr_supervised: Option<f64>,
    #[arg(long)]
    lr_ssl: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    ema_momentum: Option<f64>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleName>,
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    tau_start: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    tau_end: Option<f64>,
    #[arg(long)]
    alpha_start: Option<f64>,
    #[arg(long)]
    alpha_end: Option<f64>,
    #[arg(long)]
    n_stage: Option<usize>,
    /// How fixed/adaptive τ values are read: entropies, or percentiles of
    /// the teacher's entropies when SSL starts.
    #[arg(long, value_enum)]
    threshold_mode: Option<ModeName>,
    #[arg(long)]
    calibration_size: Option<usize>,
    /// Student sees the weak view instead of a mosaic.
    #[arg(long)]
    no_strong_aug: bool,
    #[arg(long)]
    mosaic_n: Option<usize>,
    /// `selected7`, `all16` or a comma-separated list of operation names.
    #[arg(long)]
    pool: Option<String>,
    #[arg(long)]
    magnitude: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Test manifest, or a directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, required_unless_present_any = ["oracle", "random"])]
    checkpoint: Option<PathBuf>,
    /// Predict the ground truth.
    #[arg(long, conflicts_with_all = ["random", "checkpoint"])]
    oracle: bool,
    /// Predict a Haar-random rotation per sample.
    #[arg(long, conflicts_with = "checkpoint")]
    random: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// `NAME=DIR` or `DIR` of a finished `train` run; repeatable.
    #[arg(long = "run", required = true)]
    runs: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

/// What `train --config` reads and what `train` writes back as
/// `config.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    data: Option<PathBuf>,
    eval_data: Option<PathBuf>,
    out: Option<PathBuf>,
    train: TrainConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli.cmd)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<rotkit::Error>() {
        Some(rotkit::Error::NumericalAbort { .. }) => 3,
        Some(rotkit::Error::Config(_) | rotkit::Error::InvalidArgument(_)) => 2,
        _ => 1,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("ROTKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("ROTKIT_THREADS={v} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(*a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let d = GenerateConfig::default();
    let cfg = GenerateConfig {
        n_samples: a.n.unwrap_or(d.n_samples),
        n_categories: a.k.unwrap_or(d.n_categories),
        ratio_labeled: a.ratio.unwrap_or(d.ratio_labeled),
        seed: a.seed.unwrap_or(d.seed),
        width: a.width.unwrap_or(d.width),
        height: a.height.unwrap_or(d.height),
        test_per_category: a.test_per_category.unwrap_or(d.test_per_category),
    };
    let manifest = generate_dataset(&cfg, &a.out)?;
    println!("manifest {}", train_manifest_path(&a.out).display());
    println!(
        "train {} ({} labeled, {} unlabeled), test {}",
        manifest.samples.len(),
        manifest.n_labeled(),
        manifest.n_unlabeled(),
        cfg.test_per_category * cfg.n_categories
    );
    Ok(())
}

fn resolve_manifest(path: &Path, pick: fn(&Path) -> PathBuf) -> PathBuf {
    if path.is_dir() {
        pick(path)
    } else {
        path.to_path_buf()
    }
}

fn schedule_from_flags(a: &TrainArgs, current: ScheduleSpec) -> anyhow::Result<ScheduleSpec> {
    let d = TrainConfig::default();
    let ScheduleSpec::Adaptive {
        tau_start: d_start,
        tau_end: d_end,
    } = d.schedule
    else {
        unreachable!("adaptive default")
    };
    let kind = match a.schedule {
        Some(k) => k,
        None => match current {
            ScheduleSpec::None => ScheduleName::None,
            ScheduleSpec::Fixed { .. } => ScheduleName::Fixed,
            ScheduleSpec::Multistage { .. } => ScheduleName::Multistage,
            ScheduleSpec::Adaptive { .. } => ScheduleName::Adaptive,
        },
    };
    let spec = match kind {
        ScheduleName::None => ScheduleSpec::None,
        ScheduleName::Fixed => {
            let prev = match current {
                ScheduleSpec::Fixed { tau } => tau,
                _ => d_end,
            };
            ScheduleSpec::Fixed { tau: a.tau.unwrap_or(prev) }
        }
        ScheduleName::Multistage => {
            let (s, e, n) = match current {
                ScheduleSpec::Multistage {
                    alpha_start,
                    alpha_end,
                    n_stage,
                } => (alpha_start, alpha_end, n_stage),
                _ => (65.0, 95.0, 4),
            };
            ScheduleSpec::Multistage {
                alpha_start: a.alpha_start.unwrap_or(s),
                alpha_end: a.alpha_end.unwrap_or(e),
                n_stage: a.n_stage.unwrap_or(n),
            }
        }
        ScheduleName::Adaptive => {
            let (s, e) = match current {
                ScheduleSpec::Adaptive { tau_start, tau_end } => (tau_start, tau_end),
                _ => (d_start, d_end),
            };
            ScheduleSpec::Adaptive {
                tau_start: a.tau_start.unwrap_or(s),
                tau_end: a.tau_end.unwrap_or(e),
            }
        }
    };
    let stray = match kind {
        ScheduleName::None => a.tau.or(a.tau_start).or(a.tau_end).or(a.alpha_start).or(a.alpha_end).is_some() || a.n_stage.is_some(),
        ScheduleName::Fixed => a.tau_start.or(a.tau_end).or(a.alpha_start).or(a.alpha_end).is_some() || a.n_stage.is_some(),
        ScheduleName::Multistage => a.tau.or(a.tau_start).or(a.tau_end).is_some(),
        ScheduleName::Adaptive => a.tau.or(a.alpha_start).or(a.alpha_end).is_some() || a.n_stage.is_some(),
    };
    if stray {
        bail!(usage(format!("schedule parameters given that {kind:?} does not use")));
    }
    Ok(spec)
}

fn resolve_run_config(a: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut rc = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field.clone() {
                rc.train.$field = v;
            }
        )*};
    }
    set!(
        seed,
        total_iters,
        supervised_iters,
        batch_labeled,
        batch_unlabeled,
        lambda,
        lr_supervised,
        lr_ssl,
        momentum,
        ema_momentum,
        mosaic_n,
        eval_every,
        checkpoint_every
    );
    if let Some(p) = &a.pool {
        rc.train.aug_pool = p.clone();
    }
    if a.magnitude.is_some() {
        rc.train.aug_magnitude = a.magnitude;
    }
    if a.no_strong_aug {
        rc.train.strong_aug = false;
    }
    rc.train.schedule = schedule_from_flags(a, rc.train.schedule)?;
    match (a.threshold_mode, a.calibration_size) {
        (Some(ModeName::Absolute), None) => rc.train.threshold_mode = ThresholdMode::Absolute,
        (Some(ModeName::Absolute), Some(_)) => bail!(usage("--calibration-size needs --threshold-mode quantile")),
        (Some(ModeName::Quantile), n) | (None, n @ Some(_)) => {
            let prev = match rc.train.threshold_mode {
                ThresholdMode::Quantile { calibration_size } => calibration_size,
                ThresholdMode::Absolute => 512,
            };
            rc.train.threshold_mode = ThresholdMode::Quantile {
                calibration_size: n.unwrap_or(prev),
            };
        }
        (None, None) => {}
    }
    for (dst, src) in [(&mut rc.data, &a.data), (&mut rc.eval_data, &a.eval_data), (&mut rc.out, &a.out)] {
        if src.is_some() {
            dst.clone_from(src);
        }
    }
    rc.train.validate()?;
    Ok(rc)
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let rc = resolve_run_config(&a)?;
    let data = rc.data.as_deref().ok_or_else(|| usage("no training data (--data or \"data\")"))?;
    let out = rc.out.as_deref().ok_or_else(|| usage("no output directory (--out or \"out\")"))?;
    let manifest = resolve_manifest(data, train_manifest_path);
    if !manifest.is_file() {
        bail!(usage(format!("training manifest {} not found", manifest.display())));
    }
    let dataset = Dataset::load(&manifest)?;
    let eval = match &rc.eval_data {
        Some(p) => Some(Dataset::load(&resolve_manifest(p, test_manifest_path))?),
        None => None,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&rc)? + "\n")?;

    let ck_dir = out.join("checkpoints");
    if rc.train.checkpoint_every > 0 {
        fs::create_dir_all(&ck_dir)?;
    }
    let outcome = train(
        &rc.train,
        &dataset,
        eval.as_ref().map(|d| d.samples.as_slice()),
        (rc.train.checkpoint_every > 0).then_some(ck_dir.as_path()),
    )?;
    outcome.log.write_csv(fs::File::create(out.join("train_log.csv"))?)?;
    outcome.log.mask.write_csv(fs::File::create(out.join("mask_ratio.csv"))?)?;
    if eval.is_some() {
        outcome.log.write_eval_csv(fs::File::create(out.join("eval_log.csv"))?)?;
    }
    write_checkpoint(&outcome.teacher, &out.join("teacher.ckpt"))?;
    write_checkpoint(&outcome.student, &out.join("student.ckpt"))?;
    println!("wrote {}", out.display());
    if let Some(last) = outcome.log.evals.last() {
        println!("mean_med_deg {} mean_acc30 {}", last.mean_med_deg, last.mean_acc30);
    }
    Ok(())
}

fn write_report(report: &EvalReport, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    report.write_csv(fs::File::create(out.join("per_category.csv"))?)?;
    report.write_aggregate_csv(fs::File::create(out.join("aggregate.csv"))?)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let manifest = resolve_manifest(&a.data, test_manifest_path);
    let test = Dataset::load(&manifest)?;
    let errors = if a.oracle {
        truth_errors(&test.samples)?
    } else if a.random {
        random_errors(&test.samples, a.seed)?
    } else {
        let ck = a.checkpoint.as_deref().expect("clap requires a checkpoint");
        if !ck.is_file() {
            bail!(usage(format!("checkpoint {} not found", ck.display())));
        }
        let params = read_checkpoint(ck)?;
        let c = params.config();
        if (c.width, c.height) != (test.manifest.width, test.manifest.height) || c.n_categories < test.manifest.n_categories {
            bail!(usage("checkpoint does not match the test images"));
        }
        angle_errors(&params, &test.samples)?
    };
    let report = summarize(&errors)?;
    write_report(&report, &a.out)?;
    for c in &report.categories {
        println!("category {} n {} median_deg {} acc30 {}", c.category, c.n, c.median_deg, c.acc30);
    }
    println!("mean_med_deg {} mean_acc30 {}", report.mean_med, report.mean_acc30);
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRow {
    iter: usize,
    mean_med_deg: f64,
    mean_acc30: f64,
}

fn read_eval_log(path: &Path) -> anyhow::Result<Vec<EvalRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().ne(["iter", "mean_med_deg", "mean_acc30"]) {
        bail!(usage(format!("{} is not an evaluation log", path.display())));
    }
    Ok(rdr.deserialize().collect::<Result<Vec<EvalRow>, _>>()?)
}

fn report_cmd(a: ReportArgs) -> anyhow::Result<()> {
    let mut runs = BTreeMap::new();
    for spec in &a.runs {
        let (name, dir) = match spec.split_once('=') {
            Some((n, d)) => (n.to_string(), PathBuf::from(d)),
            None => {
                let d = PathBuf::from(spec);
                let n = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| spec.clone());
                (n, d)
            }
        };
        if name.is_empty() || name.contains(['/', '\\']) {
            bail!(usage(format!("bad run name {name:?}")));
        }
        if runs.insert(name.clone(), dir).is_some() {
            bail!(usage(format!("run name {name} given twice")));
        }
    }
    fs::create_dir_all(&a.out)?;
    let mut table = csv::Writer::from_path(a.out.join("comparison.csv"))?;
    table.write_record([
        "run",
        "schedule",
        "final_iter",
        "mean_med_deg",
        "mean_acc30",
        "mask_last_half_std",
        "plateaus",
    ])?;
    for (name, dir) in &runs {
        let text = fs::read_to_string(dir.join("config.json")).with_context(|| format!("run {name}"))?;
        let rc: RunConfig = serde_json::from_str(&text).map_err(|e| usage(format!("run {name}: config.json: {e}")))?;
        let mask_path = dir.join("mask_ratio.csv");
        let mask = MaskRatioLog::read_csv(fs::File::open(&mask_path).with_context(|| format!("run {name}"))?)
            .map_err(|e| usage(format!("{}: {e}", mask_path.display())))?;
        let evals = match dir.join("eval_log.csv") {
            p if p.is_file() => read_eval_log(&p)?,
            _ => Vec::new(),
        };
        let mut curve = csv::Writer::from_path(a.out.join(format!("{name}_curve.csv")))?;
        curve.write_record(["iter", "mask_ratio", "threshold", "stage", "mean_med_deg"])?;
        for r in mask.records() {
            // evaluations are stamped with the number of completed iterations
            let med = evals.iter().find(|e| e.iter == r.iter + 1).map(|e| e.mean_med_deg.to_string());
            curve.write_record([
                r.iter.to_string(),
                r.ratio.to_string(),
                r.threshold.to_string(),
                r.stage.to_string(),
                med.unwrap_or_default(),
            ])?;
        }
        curve.flush()?;

        let kind = match rc.train.schedule {
            ScheduleSpec::None => "none",
            ScheduleSpec::Fixed { .. } => "fixed",
            ScheduleSpec::Multistage { .. } => "multistage",
            ScheduleSpec::Adaptive { .. } => "adaptive",
        };
        let std = mask.last_half_std();
        let plateaus = mask.plateaus();
        let last = evals.last();
        table.write_record([
            name.clone(),
            kind.to_string(),
            last.map(|e| e.iter.to_string()).unwrap_or_default(),
            last.map(|e| e.mean_med_deg.to_string()).unwrap_or_default(),
            last.map(|e| e.mean_acc30.to_string()).unwrap_or_default(),
            std.map(|s| s.to_string()).unwrap_or_default(),
            plateaus.len().to_string(),
        ])?;
        match rc.train.schedule {
            ScheduleSpec::Fixed { .. } => {
                println!("{name}: mask ratio std over last half {}", std.map_or("n/a".into(), |s| s.to_string()));
            }
            ScheduleSpec::Multistage { n_stage, .. } => {
                let levels: Vec<String> = plateaus.iter().map(|p| p.ratio.to_string()).collect();
                println!("{name}: {} plateaus (n_stage {n_stage}): {}", plateaus.len(), levels.join(" "));
            }
            _ => {}
        }
        if let Some(e) = last {
            println!("{name}: mean_med_deg {} mean_acc30 {}", e.mean_med_deg, e.mean_acc30);
        }
    }
    table.flush()?;
    Ok(())
}
