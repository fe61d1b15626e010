//! `iflab`: generate noisy synthetic datasets, train and tune classifiers,
//! score training data with influence estimators, and evaluate detection /
//! relabeling / recall protocols and the estimation-error bounds.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. `IFLAB_THREADS`
//! caps the worker count.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use iflab_core::data::{gen_gaussian_mixture, inject_label_noise, save_dataset, NoiseKind, NoiseSpec};
use iflab_core::eval::protocol::{
    load_run_config, save_metrics_report, save_sweep_json, save_sweep_tsv,
};
use iflab_core::eval::{
    accuracy, detection_run, epoch_sweep, prepare_data, recall_run, relabel_run, MetricsReport,
    RunConfig, SweepMode,
};
use iflab_core::influence::{
    save_report, score_dataset, Direction, EstimatorConfig, Variant,
};
use iflab_core::model::{batch_risk, Checkpoint};
use iflab_core::numerics::RngState;
use iflab_core::optim::{load_checkpoint, save_checkpoint, train, tune_on_validation};
use iflab_core::oracle::{
    bound_experiment, loo_all, loo_retrain, save_bound_report, save_loo_results, BoundTaskConfig,
    LooConfig,
};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "iflab", version, about = "Influence-estimation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Gaussian-mixture dataset with optional label noise
    GenData(GenDataArgs),
    /// Train a model and save its checkpoints
    Train(PipelineArgs),
    /// Train, then tune on the validation set (plain or SAM)
    Tune(TuneArgs),
    /// Score every training sample with one estimator
    Influence(EstimatorArgs),
    /// Mislabeled-sample detection metrics (ROC AUC, AP)
    Detect(EstimatorArgs),
    /// Relabeling accuracy against clean labels
    Relabel(EstimatorArgs),
    /// Pseudo-label recall@s over validation samples
    Recall(RecallArgs),
    /// Influence-estimation-error bound experiment (LOO oracle + bounds)
    Bound(BoundArgs),
    /// Leave-one-out retraining oracle
    Loo(LooArgs),
    /// Metric sweep across training checkpoints or tuning steps
    Sweep(SweepArgs),
    /// Summarize the JSON artifacts in a directory
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// number of classes
    #[arg(long)]
    k: usize,
    /// total sample count (must be divisible by k)
    #[arg(long)]
    n: usize,
    #[arg(long)]
    dim: usize,
    /// distance of class means from the origin
    #[arg(long, default_value_t = 3.0)]
    sep: f64,
    /// noise spec: a preset (aggre-like | random-like | worst-like),
    /// `sym:<rate>`, or `pairflip:<rate>`
    #[arg(long)]
    noise: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// RunConfig JSON file (version iflab-run-1)
    #[arg(long)]
    config: PathBuf,
    /// seed override; defaults to the first seed in the config
    #[arg(long)]
    seed: Option<u64>,
    /// output directory override
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// tune with SAM (overrides the config's flat flag)
    #[arg(long)]
    flat: Option<bool>,
    /// start from a saved checkpoint instead of retraining
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Args)]
struct EstimatorArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// estimator variant: exact_if | lissa_if | tracin | vm | fvm
    #[arg(long)]
    estimator: String,
    /// output file override
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecallArgs {
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// how many top-ranked points recall inspects; defaults to the
    /// per-class training count
    #[arg(long)]
    s: Option<usize>,
}

#[derive(Args)]
struct BoundArgs {
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// LOO retraining seeds
    #[arg(long, default_value_t = 1)]
    num_seeds: usize,
    /// full-batch gradient-descent stopping criterion for LOO retrains
    #[arg(long, default_value_t = 1e-8)]
    grad_tol: f64,
}

#[derive(Args)]
struct LooArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// restrict to one training sample id (default: all samples)
    #[arg(long)]
    sample_id: Option<usize>,
    #[arg(long, default_value_t = 1)]
    num_seeds: usize,
    #[arg(long, default_value_t = 1e-8)]
    grad_tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// sweep across training checkpoints or tuning steps
    #[arg(long, default_value = "train")]
    mode: String,
}

#[derive(Args)]
struct ReportArgs {
    /// directory holding iflab JSON artifacts
    #[arg(long)]
    dir: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout with success status.
            if e.use_stderr() {
                eprint!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    if let Ok(threads) = std::env::var("IFLAB_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("usage: IFLAB_THREADS must be a positive integer");
                std::process::exit(1);
            }
        }
    }
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            let usage = matches!(
                e.downcast_ref::<iflab_core::Error>(),
                Some(iflab_core::Error::Usage(_)) | Some(iflab_core::Error::InvalidConfig(_))
            );
            eprintln!("error: {e:#}");
            std::process::exit(if usage { 1 } else { 2 });
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Tune(args) => cmd_tune(args),
        Command::Influence(args) => cmd_influence(args),
        Command::Detect(args) => cmd_metrics_task(args, Task::Detect),
        Command::Relabel(args) => cmd_metrics_task(args, Task::Relabel),
        Command::Recall(args) => cmd_recall(args),
        Command::Bound(args) => cmd_bound(args),
        Command::Loo(args) => cmd_loo(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn parse_noise(text: &str) -> anyhow::Result<NoiseSpec> {
    if let Some(preset) = NoiseSpec::preset(text) {
        return Ok(preset);
    }
    let spec = if let Some(rate) = text.strip_prefix("sym:") {
        NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate: rate.parse()?,
        }
    } else if let Some(rate) = text.strip_prefix("pairflip:") {
        NoiseSpec {
            kind: NoiseKind::AsymmetricPairflip,
            rate: rate.parse()?,
        }
    } else {
        return Err(iflab_core::Error::Usage(format!(
            "unknown noise spec {text:?} (want a preset, sym:<rate>, or pairflip:<rate>)"
        ))
        .into());
    };
    spec.validate()?;
    Ok(spec)
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    if args.k == 0 || args.n % args.k != 0 {
        return Err(iflab_core::Error::Usage(format!(
            "--n {} must be divisible by --k {}",
            args.n, args.k
        ))
        .into());
    }
    let mut rng = RngState::new(args.seed);
    let clean = gen_gaussian_mixture(args.k, args.n / args.k, args.dim, args.sep, &mut rng)?;
    let (dataset, flipped) = match &args.noise {
        None => (clean, 0),
        Some(text) => {
            let spec = parse_noise(text)?;
            let out = inject_label_noise(&clean, &spec, &mut rng)?;
            if out.rate_underflow {
                eprintln!("warning: rate rounds to zero flips; dataset unchanged");
            }
            (out.dataset, out.flipped)
        }
    };
    save_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} samples (k={}, dim={}, {} mislabeled) to {}",
        dataset.len(),
        dataset.num_classes,
        dataset.dim,
        flipped,
        args.out.display()
    );
    Ok(())
}

struct Pipeline {
    config: RunConfig,
    seed: u64,
    out_dir: PathBuf,
}

fn load_pipeline(args: &PipelineArgs) -> anyhow::Result<Pipeline> {
    let config = load_run_config(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    let seed = args.seed.unwrap_or(config.seeds[0]);
    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| config.output_dir.clone());
    std::fs::create_dir_all(&out_dir)?;
    Ok(Pipeline {
        config,
        seed,
        out_dir,
    })
}

fn estimator_from(config: &RunConfig, name: &str) -> anyhow::Result<EstimatorConfig> {
    let variant: Variant = name.parse::<Variant>()?;
    Ok(config
        .estimator(variant)
        .cloned()
        .unwrap_or_else(|| EstimatorConfig::new(variant)))
}

fn cmd_train(args: PipelineArgs) -> anyhow::Result<()> {
    let p = load_pipeline(&args)?;
    let (train_set, val_set) = prepare_data(&p.config, p.seed)?;
    let mut rng = RngState::new(p.seed).split(2);
    let checkpoints = train(&p.config.model, &train_set, &p.config.train, &mut rng)?;
    let ckpt_dir = p.out_dir.join(format!("seed{}", p.seed));
    std::fs::create_dir_all(&ckpt_dir)?;
    for c in &checkpoints {
        save_checkpoint(c, &p.config.model, &ckpt_dir.join(format!("ckpt_{}.bin", c.tag)))?;
    }
    let theta = &checkpoints.last().unwrap().params;
    println!(
        "trained {} steps ({} checkpoints) -> {}",
        p.config.train.steps,
        checkpoints.len(),
        ckpt_dir.display()
    );
    println!(
        "  train risk {:.4}  val risk {:.4}  val accuracy {:.4}",
        batch_risk(&p.config.model, theta, &train_set.samples)?,
        batch_risk(&p.config.model, theta, &val_set.samples)?,
        accuracy(&p.config.model, theta, &val_set.samples)?,
    );
    Ok(())
}

fn cmd_tune(args: TuneArgs) -> anyhow::Result<()> {
    let p = load_pipeline(&args.pipeline)?;
    let (train_set, val_set) = prepare_data(&p.config, p.seed)?;
    let start: Checkpoint = match &args.from {
        Some(path) => load_checkpoint(path, &p.config.model)?,
        None => {
            let mut rng = RngState::new(p.seed).split(2);
            train(&p.config.model, &train_set, &p.config.train, &mut rng)?
                .into_iter()
                .last()
                .expect("final checkpoint")
        }
    };
    let mut tune_cfg = p.config.tune.clone();
    if let Some(flat) = args.flat {
        tune_cfg.flat = flat;
    }
    let mut rng = RngState::new(p.seed).split(3);
    let tuned = tune_on_validation(&p.config.model, &start, &val_set, &tune_cfg, &mut rng)?;
    let ckpt_dir = p.out_dir.join(format!("seed{}", p.seed));
    std::fs::create_dir_all(&ckpt_dir)?;
    let path = ckpt_dir.join(format!("ckpt_{}.bin", tuned.tag));
    save_checkpoint(&tuned, &p.config.model, &path)?;
    println!(
        "tuned ({}) -> {}\n  val risk {:.4}  val accuracy {:.4}",
        tuned.tag,
        path.display(),
        batch_risk(&p.config.model, &tuned.params, &val_set.samples)?,
        accuracy(&p.config.model, &tuned.params, &val_set.samples)?,
    );
    Ok(())
}

fn cmd_influence(args: EstimatorArgs) -> anyhow::Result<()> {
    let p = load_pipeline(&args.pipeline)?;
    let est = estimator_from(&p.config, &args.estimator)?;
    let (train_set, val_set) = prepare_data(&p.config, p.seed)?;
    let checkpoints = iflab_core::eval::protocol::pipeline_checkpoints(
        &p.config, &est, &train_set, &val_set, p.seed,
    )?;
    let report = score_dataset(&p.config.model, &est, &train_set, &val_set, &checkpoints)?;
    let out = args.out.unwrap_or_else(|| {
        p.out_dir
            .join(format!("influence_{}_seed{}.json", est.variant.name(), p.seed))
    });
    save_report(&report, &out)?;

    let mut ranked = report.scores.clone();
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let noisiest: Vec<(usize, f64)> = match report.direction {
        Direction::LowerIsNoisier => ranked.iter().take(5).cloned().collect(),
        Direction::HigherIsNoisier => ranked.iter().rev().take(5).cloned().collect(),
    };
    println!(
        "scored {} samples with {} at {:?} in {:.2}s -> {}",
        report.scores.len(),
        est.variant.name(),
        report.checkpoint_tag,
        report.wall_time,
        out.display()
    );
    println!("  most-suspect ids: {noisiest:?}");
    Ok(())
}

enum Task {
    Detect,
    Relabel,
}

fn cmd_metrics_task(args: EstimatorArgs, task: Task) -> anyhow::Result<()> {
    let p = load_pipeline(&args.pipeline)?;
    let est = estimator_from(&p.config, &args.estimator)?;
    let report = match task {
        Task::Detect => detection_run(&p.config, &est)?,
        Task::Relabel => relabel_run(&p.config, &est)?,
    };
    let out = args.out.unwrap_or_else(|| {
        p.out_dir
            .join(format!("{}_{}.json", report.task, est.variant.name()))
    });
    save_metrics_report(&report, &out)?;
    print_metrics(&report, &out);
    Ok(())
}

fn cmd_recall(args: RecallArgs) -> anyhow::Result<()> {
    let p = load_pipeline(&args.estimator.pipeline)?;
    let mut config = p.config.clone();
    if args.s.is_some() {
        config.recall_s = args.s;
    }
    let est = estimator_from(&config, &args.estimator.estimator)?;
    let report = recall_run(&config, &est)?;
    let out = args.estimator.out.clone().unwrap_or_else(|| {
        p.out_dir
            .join(format!("recall_{}.json", est.variant.name()))
    });
    save_metrics_report(&report, &out)?;
    print_metrics(&report, &out);
    Ok(())
}

fn print_metrics(report: &MetricsReport, path: &Path) {
    println!(
        "{} / {} over {} seed(s) -> {}",
        report.task,
        report.estimator,
        report.per_seed.len(),
        path.display()
    );
    for (name, agg) in &report.mean_std {
        println!("  {name}: {:.4} +/- {:.4}", agg.mean, agg.std);
    }
}

fn loo_config_from(config: &RunConfig, grad_tol: f64, base_seed: u64) -> LooConfig {
    LooConfig {
        train: config.train.clone(),
        grad_tol: Some(grad_tol),
        base_seed,
    }
}

fn cmd_bound(args: BoundArgs) -> anyhow::Result<()> {
    let p = load_pipeline(&args.estimator.pipeline)?;
    let est = estimator_from(&p.config, &args.estimator.estimator)?;
    let (train_set, val_set) = prepare_data(&p.config, p.seed)?;
    let task = BoundTaskConfig {
        loo: loo_config_from(&p.config, args.grad_tol, p.seed),
        num_loo_seeds: args.num_seeds,
        tune: Some(p.config.tune.clone()),
        delta: args.delta,
        sharpness_probes: p.config.sharpness.probes,
        zero_tol_factor: 1e-9,
        max_loo_n: 200,
        seed: p.seed,
    };
    let (bound, influence, loo) =
        bound_experiment(&p.config.model, &est, &train_set, &val_set, &task)?;
    let out = args.estimator.out.clone().unwrap_or_else(|| {
        p.out_dir
            .join(format!("bound_{}_seed{}.json", est.variant.name(), p.seed))
    });
    save_bound_report(&bound, &out)?;
    save_loo_results(&loo, &out.with_extension("loo.json"))?;
    save_report(&influence, &out.with_extension("influence.json"))?;
    println!(
        "bound experiment ({}, seed {}): -> {}",
        est.variant.name(),
        p.seed,
        out.display()
    );
    println!(
        "  measured sign error {:.4}  theorem bound {:.4}  corollary {:.4} (clamped {:.4})",
        bound.measured_error, bound.theorem_bound, bound.corollary_bound, bound.corollary_bound_clamped
    );
    println!(
        "  mu {:.3e}  sharpness {:.4}  gamma {:.3e}  assumptions_hold {}  sides +{}/-{} (zero {})",
        bound.mu,
        bound.sharp_risk,
        bound.gamma,
        bound.assumptions_hold,
        bound.num_positive,
        bound.num_negative,
        bound.num_zero
    );
    Ok(())
}

fn cmd_loo(args: LooArgs) -> anyhow::Result<()> {
    let p = load_pipeline(&args.pipeline)?;
    let (train_set, val_set) = prepare_data(&p.config, p.seed)?;
    let config = loo_config_from(&p.config, args.grad_tol, p.seed);
    let results = match args.sample_id {
        Some(id) => vec![loo_retrain(
            &p.config.model,
            &train_set,
            id,
            &config,
            &val_set,
            args.num_seeds,
        )?],
        None => loo_all(
            &p.config.model,
            &train_set,
            &config,
            &val_set,
            args.num_seeds,
        )?,
    };
    let out = args
        .out
        .unwrap_or_else(|| p.out_dir.join(format!("loo_seed{}.json", p.seed)));
    save_loo_results(&results, &out)?;
    let positive = results.iter().filter(|r| r.delta_val_risk > 0.0).count();
    println!(
        "loo over {} sample(s), {} seed(s) -> {}",
        results.len(),
        args.num_seeds,
        out.display()
    );
    println!(
        "  {} positive-influence / {} negative-influence samples",
        positive,
        results.len() - positive
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let p = load_pipeline(&args.pipeline)?;
    let mode = match args.mode.as_str() {
        "train" => SweepMode::Train,
        "tune" => SweepMode::Tune,
        other => {
            return Err(iflab_core::Error::Usage(format!(
                "unknown sweep mode {other:?} (want train or tune)"
            ))
            .into())
        }
    };
    let report = epoch_sweep(&p.config, mode)?;
    let base = p.out_dir.join(format!("sweep_{}", args.mode));
    save_sweep_json(&report, &base.with_extension("json"))?;
    save_sweep_tsv(&report, &base.with_extension("tsv"))?;
    println!(
        "sweep ({} rows) -> {}.json / .tsv",
        report.rows.len(),
        base.display()
    );
    if let (Some(first), Some(last)) = (report.rows.first(), report.rows.last()) {
        println!(
            "  val accuracy {:.4} -> {:.4}; sharpness {:.4} -> {:.4}",
            first.val_accuracy, last.val_accuracy, first.sharp_risk, last.sharp_risk
        );
        for (i, (name, _)) in first.detection_auc.iter().enumerate() {
            println!(
                "  {name} detection auc {:.4} -> {:.4}",
                first.detection_auc[i].1, last.detection_auc[i].1
            );
        }
        for (name, c) in &report.auc_accuracy_correlation {
            println!("  {name} corr(val accuracy, detection auc) = {c:+.4}");
        }
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&args.dir)
        .with_context(|| format!("reading {}", args.dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "json").unwrap_or(false))
        .collect();
    entries.sort();
    if entries.is_empty() {
        println!("no JSON artifacts under {}", args.dir.display());
        return Ok(());
    }
    for path in entries {
        let Ok(text) = std::fs::read_to_string(&path) else {
            continue;
        };
        let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) else {
            continue;
        };
        let version = value
            .get("version")
            .and_then(|v| v.as_str())
            .unwrap_or("unversioned");
        let name = path.file_name().unwrap().to_string_lossy();
        match version {
            "iflab-metrics-1" => {
                let report: MetricsReport = serde_json::from_value(value.clone())?;
                println!("{name} [{version}]: {} / {}", report.task, report.estimator);
                for (metric, agg) in &report.mean_std {
                    println!("    {metric}: {:.4} +/- {:.4}", agg.mean, agg.std);
                }
            }
            "iflab-bound-1" => {
                if let Some(err) = value.get("measured_error") {
                    println!(
                        "{name} [{version}]: measured error {} vs corollary {}  (assumptions_hold {})",
                        err,
                        value.get("corollary_bound_clamped").unwrap_or(&serde_json::Value::Null),
                        value.get("assumptions_hold").unwrap_or(&serde_json::Value::Null),
                    );
                } else if let Some(results) = value.get("results").and_then(|r| r.as_array()) {
                    println!("{name} [{version}]: {} loo results", results.len());
                }
            }
            "iflab-inf-1" => {
                let n = value
                    .get("scores")
                    .and_then(|s| s.as_array())
                    .map(|a| a.len())
                    .unwrap_or(0);
                println!(
                    "{name} [{version}]: {n} scores, direction {}",
                    value.get("direction").and_then(|d| d.as_str()).unwrap_or("?")
                );
            }
            "iflab-sweep-1" => {
                let rows = value
                    .get("rows")
                    .and_then(|r| r.as_array())
                    .map(|a| a.len())
                    .unwrap_or(0);
                println!("{name} [{version}]: {rows} sweep rows");
            }
            other => println!("{name} [{other}]"),
        }
    }
    Ok(())
}
