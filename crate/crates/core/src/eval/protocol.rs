//! Experiment protocols: seeded pipelines from data generation through
//! training, tuning, scoring, and metric aggregation.

use crate::data::{gen_gaussian_mixture, inject_label_noise, load_dataset, split, Dataset,
    NoiseSpec, Sample};
use crate::error::{Error, Result};
use crate::eval::metrics::{
    average_precision, mean_std, recall_at_s, relabel_from_scores, roc_auc, RelabelOutcome,
};
use crate::influence::{score_with_context, EstimatorConfig, ScoreContext, Variant};
use crate::model::{batch_risk, predict, Checkpoint, ModelSpec};
use crate::numerics::RngState;
use crate::optim::{sharpness_risk, train, tune_trajectory, SgdConfig, TuneConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const RUN_FORMAT_VERSION: &str = "iflab-run-1";
pub const METRICS_FORMAT_VERSION: &str = "iflab-metrics-1";
pub const SWEEP_FORMAT_VERSION: &str = "iflab-sweep-1";

// RNG stream salts, one per pipeline stage.
const SALT_DATA: u64 = 1;
const SALT_TRAIN: u64 = 2;
const SALT_TUNE: u64 = 3;
const SALT_SHARP: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub k: usize,
    pub dim: usize,
    pub class_sep: f64,
    pub train_n: usize,
    pub val_n: usize,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Files { train: PathBuf, val: PathBuf },
    Generator(GeneratorConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessConfig {
    pub gamma: f64,
    pub probes: usize,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        SharpnessConfig {
            gamma: 0.05,
            probes: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: ModelSpec,
    pub train: SgdConfig,
    pub tune: TuneConfig,
    pub estimators: Vec<EstimatorConfig>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub metrics: Vec<String>,
    #[serde(default)]
    pub recall_s: Option<usize>,
    /// Cap on how many validation samples the recall protocol scores.
    #[serde(default)]
    pub recall_max_val: Option<usize>,
    #[serde(default)]
    pub sharpness: SharpnessConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed required".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.tune.validate()?;
        for e in &self.estimators {
            e.validate()?;
        }
        if let DataSource::Files { train, val } = &self.data {
            for p in [train, val] {
                if !p.exists() {
                    return Err(Error::InvalidConfig(format!(
                        "referenced dataset {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn estimator(&self, variant: Variant) -> Option<&EstimatorConfig> {
        self.estimators.iter().find(|e| e.variant == variant)
    }
}

#[derive(Serialize, Deserialize)]
struct RunFile {
    version: String,
    #[serde(flatten)]
    config: RunConfig,
}

pub fn save_run_config(config: &RunConfig, path: &Path) -> Result<()> {
    let file = RunFile {
        version: RUN_FORMAT_VERSION.to_string(),
        config: config.clone(),
    };
    serde_json::to_writer_pretty(std::fs::File::create(path)?, &file)?;
    Ok(())
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let file: RunFile = serde_json::from_reader(std::fs::File::open(path)?)?;
    if file.version != RUN_FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported run config version {:?}", file.version),
        });
    }
    file.config.validate()?;
    Ok(file.config)
}

/// Training and validation sets for one seed. Generator mode draws a fresh
/// mixture per seed and injects noise into the training split only; file
/// mode loads the same data for every seed.
pub fn prepare_data(config: &RunConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match &config.data {
        DataSource::Files { train, val } => Ok((load_dataset(train)?, load_dataset(val)?)),
        DataSource::Generator(g) => {
            let total = g.train_n + g.val_n;
            if total % g.k != 0 {
                return Err(Error::InvalidConfig(format!(
                    "train_n + val_n = {total} must be divisible by k = {}",
                    g.k
                )));
            }
            let mut rng = RngState::new(seed).split(SALT_DATA);
            let mixture = gen_gaussian_mixture(g.k, total / g.k, g.dim, g.class_sep, &mut rng)?;
            let fractions = [
                g.train_n as f64 / total as f64,
                g.val_n as f64 / total as f64,
            ];
            let mut parts = split(&mixture, &fractions, &mut rng)?;
            let val = parts.pop().expect("two parts");
            let mut train = parts.pop().expect("two parts");
            if let Some(noise) = &g.noise {
                train = inject_label_noise(&train, noise, &mut rng)?.dataset;
            }
            Ok((train, val))
        }
    }
}

/// Train, then tune when the estimator scores at a vm/fvm checkpoint.
/// Returns the full training checkpoint list with the tuned checkpoint
/// appended, ready for [`ScoreContext::build`].
pub fn pipeline_checkpoints(
    config: &RunConfig,
    estimator: &EstimatorConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    seed: u64,
) -> Result<Vec<Checkpoint>> {
    let mut rng = RngState::new(seed).split(SALT_TRAIN);
    let mut checkpoints = train(&config.model, train_set, &config.train, &mut rng)?;
    match estimator.variant {
        Variant::Vm | Variant::Fvm => {
            let mut tune_cfg = config.tune.clone();
            tune_cfg.flat = estimator.variant == Variant::Fvm;
            let start = checkpoints.last().expect("training emits a final checkpoint");
            let mut tune_rng = RngState::new(seed).split(SALT_TUNE);
            let tuned = crate::optim::tune_on_validation(
                &config.model,
                start,
                val_set,
                &tune_cfg,
                &mut tune_rng,
            )?;
            checkpoints.push(tuned);
        }
        _ => {}
    }
    Ok(checkpoints)
}

/// Fraction of samples whose predicted class matches the stored label.
pub fn accuracy(spec: &ModelSpec, params: &crate::model::ParamVector, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySet("accuracy"));
    }
    let mut hits = 0usize;
    for s in samples {
        if predict(spec, params, &s.x)? == s.y {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct SeedMetrics {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relabel_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relabel_top1_noisy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_at_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub estimator: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relabel_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_at_s: Option<f64>,
    pub per_seed: Vec<SeedMetrics>,
    pub mean_std: BTreeMap<String, Aggregate>,
}

impl MetricsReport {
    fn from_seeds(task: &str, estimator: &EstimatorConfig, per_seed: Vec<SeedMetrics>) -> Self {
        let mut mean_std = BTreeMap::new();
        let collect = |f: fn(&SeedMetrics) -> Option<f64>| -> Vec<f64> {
            per_seed.iter().filter_map(f).collect()
        };
        let mut headline = |name: &str, f: fn(&SeedMetrics) -> Option<f64>| -> Option<f64> {
            let xs = collect(f);
            if xs.is_empty() {
                return None;
            }
            let (mean, std) = mean_std_pair(&xs);
            mean_std.insert(name.to_string(), Aggregate { mean, std });
            Some(mean)
        };
        let roc = headline("roc_auc", |s| s.roc_auc);
        let ap = headline("average_precision", |s| s.average_precision);
        let relabel = headline("relabel_top1", |s| s.relabel_top1);
        headline("relabel_top1_noisy", |s| s.relabel_top1_noisy);
        let recall = headline("recall_at_s", |s| s.recall_at_s);
        MetricsReport {
            task: task.to_string(),
            estimator: estimator.variant.name().to_string(),
            roc_auc: roc,
            average_precision: ap,
            relabel_top1: relabel,
            recall_at_s: recall,
            per_seed,
            mean_std,
        }
    }
}

fn mean_std_pair(xs: &[f64]) -> (f64, f64) {
    mean_std(xs)
}

#[derive(Serialize, Deserialize)]
struct MetricsFile {
    version: String,
    #[serde(flatten)]
    report: MetricsReport,
}

pub fn save_metrics_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let file = MetricsFile {
        version: METRICS_FORMAT_VERSION.to_string(),
        report: report.clone(),
    };
    serde_json::to_writer_pretty(std::fs::File::create(path)?, &file)?;
    Ok(())
}

pub fn load_metrics_report(path: &Path) -> Result<MetricsReport> {
    let file: MetricsFile = serde_json::from_reader(std::fs::File::open(path)?)?;
    if file.version != METRICS_FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported metrics report version {:?}", file.version),
        });
    }
    Ok(file.report)
}

fn noisy_flags(train_set: &Dataset) -> Result<Vec<bool>> {
    let flags: Vec<bool> = train_set
        .samples
        .iter()
        .map(|s| s.noisy == Some(true))
        .collect();
    if !flags.iter().any(|f| *f) || flags.iter().all(|f| *f) {
        return Err(Error::InvalidConfig(
            "detection needs both noisy and clean training samples".into(),
        ));
    }
    Ok(flags)
}

/// Mislabeled-sample detection: score the training set, rank, and measure
/// ROC AUC / AP against the noisy flags.
pub fn detection_run(config: &RunConfig, estimator: &EstimatorConfig) -> Result<MetricsReport> {
    config.validate()?;
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let (train_set, val_set) = prepare_data(config, seed)?;
        let flags = noisy_flags(&train_set)?;
        let checkpoints =
            pipeline_checkpoints(config, estimator, &train_set, &val_set, seed)?;
        let report = crate::influence::score_dataset(
            &config.model,
            estimator,
            &train_set,
            &val_set,
            &checkpoints,
        )?;
        let scores: Vec<f64> = train_set
            .samples
            .iter()
            .map(|s| report.score_of(s.id).expect("every sample scored"))
            .collect();
        per_seed.push(SeedMetrics {
            seed,
            roc_auc: Some(roc_auc(&scores, &flags, report.direction)?),
            average_precision: Some(average_precision(&scores, &flags, report.direction)?),
            ..SeedMetrics::default()
        });
    }
    Ok(MetricsReport::from_seeds("detect", estimator, per_seed))
}

/// Relabeling rule: score `(x, k)` for every candidate class and take the
/// argmax under the estimator's helpfulness direction.
pub fn relabel_sample(
    ctx: &ScoreContext,
    x: &[f64],
    num_classes: usize,
) -> Result<RelabelOutcome> {
    let mut candidate_scores = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let candidate = Sample {
            id: usize::MAX,
            x: x.to_vec(),
            y: k,
            true_y: None,
            noisy: None,
        };
        let score = ctx.set_score(&candidate).map_err(|e| {
            Error::Usage(format!("relabel scorer failed at class {k}: {e}"))
        })?;
        candidate_scores.push(score);
    }
    relabel_from_scores(&candidate_scores, ctx.direction())
}

/// Relabel every training sample and compare against the clean labels.
pub fn relabel_run(config: &RunConfig, estimator: &EstimatorConfig) -> Result<MetricsReport> {
    config.validate()?;
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let (train_set, val_set) = prepare_data(config, seed)?;
        if train_set.samples.iter().any(|s| s.true_y.is_none()) {
            return Err(Error::InvalidConfig(
                "relabel evaluation needs true labels".into(),
            ));
        }
        let checkpoints =
            pipeline_checkpoints(config, estimator, &train_set, &val_set, seed)?;
        let ctx = ScoreContext::build(
            &config.model,
            estimator,
            &train_set,
            &val_set,
            &checkpoints,
        )?;
        let k = train_set.num_classes;
        let outcomes: Vec<(bool, bool)> = train_set
            .samples
            .par_iter()
            .map(|s| {
                let out = relabel_sample(&ctx, &s.x, k)?;
                Ok((out.label == s.true_y.unwrap(), s.noisy == Some(true)))
            })
            .collect::<Result<_>>()?;
        let total_hits = outcomes.iter().filter(|(hit, _)| *hit).count();
        let noisy_total = outcomes.iter().filter(|(_, n)| *n).count();
        let noisy_hits = outcomes.iter().filter(|(hit, n)| *hit && *n).count();
        per_seed.push(SeedMetrics {
            seed,
            relabel_top1: Some(total_hits as f64 / outcomes.len() as f64),
            relabel_top1_noisy: if noisy_total > 0 {
                Some(noisy_hits as f64 / noisy_total as f64)
            } else {
                None
            },
            ..SeedMetrics::default()
        });
    }
    Ok(MetricsReport::from_seeds("relabel", estimator, per_seed))
}

/// Pseudo-label protocol: for each evaluated validation sample, score every
/// training point, then measure recall@s over the `s` most helpful points
/// and the ROC AUC of ranking same-class (pseudo-positive) training points
/// as most helpful.
pub fn recall_run(config: &RunConfig, estimator: &EstimatorConfig) -> Result<MetricsReport> {
    config.validate()?;
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let (train_set, val_set) = prepare_data(config, seed)?;
        let checkpoints =
            pipeline_checkpoints(config, estimator, &train_set, &val_set, seed)?;
        let ctx = ScoreContext::build(
            &config.model,
            estimator,
            &train_set,
            &val_set,
            &checkpoints,
        )?;
        let s = config
            .recall_s
            .unwrap_or(train_set.len() / train_set.num_classes);
        let max_val = config.recall_max_val.unwrap_or(50).min(val_set.len());
        let train_labels: Vec<usize> = train_set.samples.iter().map(|z| z.y).collect();
        // Pair scores orient signed (higher = helpful) for every variant;
        // the pseudo-positive class is same-class-as-validation, i.e. most
        // helpful, so the AUC orientation is the flip of that.
        let pair_direction = ctx.pair_direction();
        let helpful_direction = pair_direction.flipped();

        let tvs = train_set
            .samples
            .par_iter()
            .map(|z| ctx.train_vector(z))
            .collect::<Result<Vec<_>>>()?;
        let per_val = val_set.samples[..max_val]
            .par_iter()
            .map(|z_val| {
                let vv = ctx.val_vector(z_val)?;
                let scores = tvs
                    .iter()
                    .map(|tv| ctx.pair_score(tv, &vv))
                    .collect::<Result<Vec<f64>>>()?;
                let recall = recall_at_s(&scores, &train_labels, z_val.y, s, pair_direction)?;
                let flags = crate::eval::metrics::pseudo_label(&train_labels, z_val.y);
                let auc = crate::eval::metrics::roc_auc(&scores, &flags, helpful_direction)?;
                Ok((recall, auc))
            })
            .collect::<Result<Vec<(f64, f64)>>>()?;
        let recalls: Vec<f64> = per_val.iter().map(|(r, _)| *r).collect();
        let aucs: Vec<f64> = per_val.iter().map(|(_, a)| *a).collect();
        per_seed.push(SeedMetrics {
            seed,
            recall_at_s: Some(mean_std(&recalls).0),
            roc_auc: Some(mean_std(&aucs).0),
            ..SeedMetrics::default()
        });
    }
    Ok(MetricsReport::from_seeds("recall", estimator, per_seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// across training checkpoints
    Train,
    /// across validation-tuning steps, starting from theta_star
    Tune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub step: usize,
    pub tag: String,
    pub val_accuracy: f64,
    pub val_risk: f64,
    pub sharp_risk: f64,
    /// (estimator name, detection ROC AUC at this state)
    pub detection_auc: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub mode: SweepMode,
    pub seed: u64,
    pub gamma: f64,
    pub rows: Vec<SweepRow>,
    /// Per estimator: Pearson correlation between validation accuracy and
    /// detection AUC across the swept states (when computable).
    pub auc_accuracy_correlation: Vec<(String, f64)>,
}

/// Per training checkpoint (or tuning step): validation accuracy and risk,
/// sharpness, and each estimator's detection ROC AUC evaluated at that
/// state. TracIn in train mode uses the checkpoint prefix up to the row.
pub fn epoch_sweep(config: &RunConfig, mode: SweepMode) -> Result<SweepReport> {
    config.validate()?;
    let seed = config.seeds[0];
    let (train_set, val_set) = prepare_data(config, seed)?;
    let flags = noisy_flags(&train_set)?;

    let states: Vec<Checkpoint> = match mode {
        SweepMode::Train => {
            if config.train.checkpoint_every == 0 {
                return Err(Error::InvalidConfig(
                    "sweep needs checkpoint_every > 0".into(),
                ));
            }
            let mut rng = RngState::new(seed).split(SALT_TRAIN);
            train(&config.model, &train_set, &config.train, &mut rng)?
        }
        SweepMode::Tune => {
            let mut rng = RngState::new(seed).split(SALT_TRAIN);
            let ckpts = train(&config.model, &train_set, &config.train, &mut rng)?;
            let start = ckpts.into_iter().last().expect("final checkpoint");
            let mut tune_rng = RngState::new(seed).split(SALT_TUNE);
            tune_trajectory(&config.model, &start, &val_set, &config.tune, &mut tune_rng)?
        }
    };

    let mut rows = Vec::with_capacity(states.len());
    for (i, state) in states.iter().enumerate() {
        let val_acc = accuracy(&config.model, &state.params, &val_set.samples)?;
        let val_risk = batch_risk(&config.model, &state.params, &val_set.samples)?;
        let mut sharp_rng = RngState::new(seed).split(SALT_SHARP + i as u64);
        let sharp = sharpness_risk(
            &config.model,
            &state.params,
            &val_set,
            config.sharpness.gamma,
            config.sharpness.probes,
            &mut sharp_rng,
        )?;
        let mut aucs = Vec::with_capacity(config.estimators.len());
        for est in &config.estimators {
            let eval_states: &[Checkpoint] = if est.variant == Variant::Tracin {
                &states[..=i]
            } else {
                std::slice::from_ref(state)
            };
            let ctx = ScoreContext::build_at(
                &config.model,
                est,
                &train_set,
                &val_set,
                eval_states,
            )?;
            let scored = score_with_context(&ctx, &train_set)?;
            let scores: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
            aucs.push((
                est.variant.name().to_string(),
                roc_auc(&scores, &flags, est.variant.direction())?,
            ));
        }
        rows.push(SweepRow {
            step: state.step,
            tag: state.tag.clone(),
            val_accuracy: val_acc,
            val_risk,
            sharp_risk: sharp,
            detection_auc: aucs,
        });
    }
    let mut correlations = Vec::new();
    if rows.len() >= 2 {
        let accs: Vec<f64> = rows.iter().map(|r| r.val_accuracy).collect();
        for (i, est) in config.estimators.iter().enumerate() {
            let aucs: Vec<f64> = rows.iter().map(|r| r.detection_auc[i].1).collect();
            if let Ok(c) = crate::eval::metrics::pearson(&accs, &aucs) {
                correlations.push((est.variant.name().to_string(), c));
            }
        }
    }
    Ok(SweepReport {
        mode,
        seed,
        gamma: config.sharpness.gamma,
        rows,
        auc_accuracy_correlation: correlations,
    })
}

#[derive(Serialize, Deserialize)]
struct SweepFile {
    version: String,
    #[serde(flatten)]
    report: SweepReport,
}

pub fn save_sweep_json(report: &SweepReport, path: &Path) -> Result<()> {
    let file = SweepFile {
        version: SWEEP_FORMAT_VERSION.to_string(),
        report: report.clone(),
    };
    serde_json::to_writer_pretty(std::fs::File::create(path)?, &file)?;
    Ok(())
}

pub fn load_sweep_json(path: &Path) -> Result<SweepReport> {
    let file: SweepFile = serde_json::from_reader(std::fs::File::open(path)?)?;
    if file.version != SWEEP_FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported sweep version {:?}", file.version),
        });
    }
    Ok(file.report)
}

/// Tab-separated table mirroring the JSON sweep, one row per state.
pub fn save_sweep_tsv(report: &SweepReport, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec![
        "step".to_string(),
        "tag".to_string(),
        "val_accuracy".to_string(),
        "val_risk".to_string(),
        "sharp_risk".to_string(),
    ];
    if let Some(first) = report.rows.first() {
        for (name, _) in &first.detection_auc {
            header.push(format!("auc_{name}"));
        }
    }
    writeln!(w, "{}", header.join("\t"))?;
    for row in &report.rows {
        let mut cells = vec![
            row.step.to_string(),
            row.tag.clone(),
            format!("{:.6}", row.val_accuracy),
            format!("{:.6}", row.val_risk),
            format!("{:.6}", row.sharp_risk),
        ];
        for (_, auc) in &row.detection_auc {
            cells.push(format!("{auc:.6}"));
        }
        writeln!(w, "{}", cells.join("\t"))?;
    }
    w.flush()?;
    Ok(())
}
