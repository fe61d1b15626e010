//! Ground truth and theory checks: leave-one-out retraining, sign-error
//! measurement against that ground truth, and the sharpness-based error
//! bounds with their assumption gates.

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::influence::{Direction, EstimatorConfig, InfluenceReport, ScoreContext, Variant};
use crate::model::{batch_risk, batch_risk_grad, init_params, ModelSpec, ParamVector};
use crate::numerics::{all_finite, norm2, RngState};
use crate::optim::{
    apply_sgd_update, sharpness_risk, train_from, tune_on_validation, MomentumState, SgdConfig,
    TuneConfig,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const BOUND_FORMAT_VERSION: &str = "iflab-bound-1";

/// Validation-risk change from retraining without one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub sample_id: usize,
    /// mean over seeds of `R_val(theta_without) - R_val(theta_full)`
    pub delta_val_risk: f64,
    pub seeds_used: usize,
    pub std_across_seeds: f64,
}

/// How LOO retrains: with `grad_tol` set, deterministic full-batch gradient
/// descent until the gradient norm criterion (the convex-exact path,
/// ignoring `batch_size`/`schedule`); otherwise fixed-step SGD through the
/// shared-seed stochastic path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooConfig {
    pub train: SgdConfig,
    #[serde(default)]
    pub grad_tol: Option<f64>,
    #[serde(default)]
    pub base_seed: u64,
}

/// Retrain from scratch under one seed.
pub fn retrain(
    spec: &ModelSpec,
    dataset: &Dataset,
    config: &LooConfig,
    seed: u64,
) -> Result<ParamVector> {
    let mut rng = RngState::new(seed);
    let mut params = init_params(spec, &mut rng)?;
    match config.grad_tol {
        Some(tol) => {
            let mut state = MomentumState::new(config.train.momentum, params.len());
            let mut last_risk = f64::NAN;
            for step in 0..config.train.steps {
                let (risk, grad) = batch_risk_grad(spec, &params, &dataset.samples)?;
                if !risk.is_finite() {
                    return Err(Error::Divergence { step, last_risk });
                }
                last_risk = risk;
                if norm2(&grad.values) <= tol {
                    break;
                }
                apply_sgd_update(
                    &mut params.values,
                    &grad.values,
                    config.train.learning_rate,
                    &mut state,
                );
                if !all_finite(&params.values) {
                    return Err(Error::Divergence { step, last_risk });
                }
            }
            Ok(params)
        }
        None => {
            let ckpts = train_from(spec, dataset, &config.train, &params, &mut rng)?;
            Ok(ckpts.into_iter().last().expect("final checkpoint").params)
        }
    }
}

fn without_sample(dataset: &Dataset, sample_id: usize) -> Result<Dataset> {
    let samples: Vec<Sample> = dataset
        .samples
        .iter()
        .filter(|s| s.id != sample_id)
        .cloned()
        .collect();
    if samples.len() == dataset.len() {
        return Err(Error::Usage(format!(
            "sample id {sample_id} not present in the training set"
        )));
    }
    Ok(Dataset {
        samples,
        num_classes: dataset.num_classes,
        dim: dataset.dim,
    })
}

fn delta_stats(deltas: &[f64]) -> (f64, f64) {
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Leave-one-out oracle for a single training sample: per seed, retrain on
/// the full set and on the set minus the sample (same seed for both), and
/// average the validation-risk change.
pub fn loo_retrain(
    spec: &ModelSpec,
    train_set: &Dataset,
    sample_id: usize,
    config: &LooConfig,
    val_set: &Dataset,
    num_seeds: usize,
) -> Result<LooResult> {
    if num_seeds == 0 {
        return Err(Error::InvalidConfig("num_seeds must be >= 1".into()));
    }
    let reduced = without_sample(train_set, sample_id)?;
    let mut deltas = Vec::with_capacity(num_seeds);
    for s in 0..num_seeds {
        let seed = config.base_seed + s as u64;
        let full = retrain(spec, train_set, config, seed).map_err(|e| seed_context(e, s))?;
        let minus = retrain(spec, &reduced, config, seed).map_err(|e| seed_context(e, s))?;
        let risk_full = batch_risk(spec, &full, &val_set.samples)?;
        let risk_minus = batch_risk(spec, &minus, &val_set.samples)?;
        deltas.push(risk_minus - risk_full);
    }
    let (mean, std) = delta_stats(&deltas);
    Ok(LooResult {
        sample_id,
        delta_val_risk: mean,
        seeds_used: num_seeds,
        std_across_seeds: std,
    })
}

fn seed_context(e: Error, seed_index: usize) -> Error {
    match e {
        Error::Divergence { step, last_risk } => Error::InvalidConfig(format!(
            "loo retrain diverged at seed index {seed_index}, step {step}, last risk {last_risk}"
        )),
        other => other,
    }
}

/// LOO over every training sample; the full-set baselines are trained once
/// per seed and shared, the per-sample retrains run in parallel.
pub fn loo_all(
    spec: &ModelSpec,
    train_set: &Dataset,
    config: &LooConfig,
    val_set: &Dataset,
    num_seeds: usize,
) -> Result<Vec<LooResult>> {
    if num_seeds == 0 {
        return Err(Error::InvalidConfig("num_seeds must be >= 1".into()));
    }
    let mut baselines = Vec::with_capacity(num_seeds);
    for s in 0..num_seeds {
        let seed = config.base_seed + s as u64;
        let full = retrain(spec, train_set, config, seed).map_err(|e| seed_context(e, s))?;
        baselines.push(batch_risk(spec, &full, &val_set.samples)?);
    }
    train_set
        .samples
        .par_iter()
        .map(|z| {
            let reduced = without_sample(train_set, z.id)?;
            let mut deltas = Vec::with_capacity(num_seeds);
            for s in 0..num_seeds {
                let seed = config.base_seed + s as u64;
                let minus =
                    retrain(spec, &reduced, config, seed).map_err(|e| seed_context(e, s))?;
                let risk_minus = batch_risk(spec, &minus, &val_set.samples)?;
                deltas.push(risk_minus - baselines[s]);
            }
            let (mean, std) = delta_stats(&deltas);
            Ok(LooResult {
                sample_id: z.id,
                delta_val_risk: mean,
                seeds_used: num_seeds,
                std_across_seeds: std,
            })
        })
        .collect()
}

/// Ids partitioned by the sign of the LOO ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignPartition {
    pub positive_ids: Vec<usize>,
    pub negative_ids: Vec<usize>,
    pub zero_ids: Vec<usize>,
}

pub fn sign_partition(results: &[LooResult], tolerance: f64) -> SignPartition {
    let mut p = SignPartition {
        positive_ids: vec![],
        negative_ids: vec![],
        zero_ids: vec![],
    };
    for r in results {
        if r.delta_val_risk > tolerance {
            p.positive_ids.push(r.sample_id);
        } else if r.delta_val_risk < -tolerance {
            p.negative_ids.push(r.sample_id);
        } else {
            p.zero_ids.push(r.sample_id);
        }
    }
    p
}

/// Default zero-band width: `1e-9 x max |delta|`, absorbing retraining
/// float noise.
pub fn default_zero_tolerance(results: &[LooResult]) -> f64 {
    1e-9
        * results
            .iter()
            .map(|r| r.delta_val_risk.abs())
            .fold(0.0, f64::max)
}

fn median(xs: &mut Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Scores oriented so that positive means helpful (positive influence).
/// Positive-only estimators (vm/fvm) additionally get median-centered so
/// "above median" plays the role of negative influence; the report has no
/// intrinsic sign to read off otherwise.
pub fn normalized_scores(report: &InfluenceReport) -> Vec<(usize, f64)> {
    let flip = match report.direction {
        Direction::LowerIsNoisier => 1.0,
        Direction::HigherIsNoisier => -1.0,
    };
    let mut oriented: Vec<(usize, f64)> = report
        .scores
        .iter()
        .map(|(id, s)| (*id, flip * s))
        .collect();
    if report.estimator.variant.positive_only() {
        let mut values: Vec<f64> = oriented.iter().map(|(_, s)| *s).collect();
        let m = median(&mut values);
        for (_, s) in oriented.iter_mut() {
            *s -= m;
        }
    }
    oriented
}

/// Fraction of sign disagreements against the LOO partition, zero-band ids
/// excluded from the denominator.
pub fn sign_error(report: &InfluenceReport, partition: &SignPartition) -> Result<f64> {
    let normalized: std::collections::HashMap<usize, f64> =
        normalized_scores(report).into_iter().collect();
    let effective = partition.positive_ids.len() + partition.negative_ids.len();
    if effective == 0 {
        return Err(Error::EmptySet("sign_error effective ids"));
    }
    let mut mismatches = 0usize;
    for id in &partition.positive_ids {
        let s = normalized
            .get(id)
            .ok_or_else(|| Error::Usage(format!("partition id {id} missing from report")))?;
        if *s <= 0.0 {
            mismatches += 1;
        }
    }
    for id in &partition.negative_ids {
        let s = normalized
            .get(id)
            .ok_or_else(|| Error::Usage(format!("partition id {id} missing from report")))?;
        if *s >= 0.0 {
            mismatches += 1;
        }
    }
    Ok(mismatches as f64 / effective as f64)
}

/// `exp(-2 mu^2 / sharp^2)` with `mu` the smaller per-side mean magnitude,
/// plus the better-than-random assumption gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremBoundResult {
    pub mu: f64,
    pub bound: f64,
    pub mean_positive_side: f64,
    pub mean_negative_side: f64,
    pub assumptions_hold: bool,
}

pub fn theorem_bound(
    report: &InfluenceReport,
    partition: &SignPartition,
    sharp_risk: f64,
) -> Result<TheoremBoundResult> {
    if partition.positive_ids.is_empty() || partition.negative_ids.is_empty() {
        return Err(Error::EmptySet("sign partition side"));
    }
    let normalized: std::collections::HashMap<usize, f64> =
        normalized_scores(report).into_iter().collect();
    let side_mean = |ids: &[usize]| -> Result<f64> {
        let mut total = 0.0;
        for id in ids {
            total += normalized
                .get(id)
                .ok_or_else(|| Error::Usage(format!("partition id {id} missing from report")))?;
        }
        Ok(total / ids.len() as f64)
    };
    let mean_pos = side_mean(&partition.positive_ids)?;
    let mean_neg = side_mean(&partition.negative_ids)?;
    let mu = mean_pos.abs().min(mean_neg.abs());
    let bound = if sharp_risk == 0.0 {
        if mu > 0.0 {
            0.0
        } else {
            1.0
        }
    } else {
        (-2.0 * mu * mu / (sharp_risk * sharp_risk)).exp()
    };
    Ok(TheoremBoundResult {
        mu,
        bound,
        mean_positive_side: mean_pos,
        mean_negative_side: mean_neg,
        assumptions_hold: mean_pos > 0.0 && mean_neg < 0.0,
    })
}

/// `theorem_value + sqrt(-ln(delta) / (2 n))`
pub fn corollary_bound(theorem_value: f64, delta: f64, n: usize) -> Result<f64> {
    if !(0.0 < delta && delta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "delta must be in (0, 1), got {delta}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("n must be >= 1".into()));
    }
    Ok(theorem_value + (-delta.ln() / (2.0 * n as f64)).sqrt())
}

/// End-to-end bound check artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub estimator: EstimatorConfig,
    pub mu: f64,
    pub sharp_risk: f64,
    pub gamma: f64,
    pub theorem_bound: f64,
    pub delta: f64,
    pub n: usize,
    /// raw value; can exceed 1
    pub corollary_bound: f64,
    pub corollary_bound_clamped: f64,
    pub measured_error: f64,
    pub assumptions_hold: bool,
    /// how scores were mapped to signs: "signed" or "median_centered"
    pub normalization: String,
    pub num_positive: usize,
    pub num_negative: usize,
    pub num_zero: usize,
}

/// Task around a bound experiment: the training/tuning recipe plus LOO and
/// sharpness controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTaskConfig {
    pub loo: LooConfig,
    pub num_loo_seeds: usize,
    #[serde(default)]
    pub tune: Option<TuneConfig>,
    pub delta: f64,
    #[serde(default = "default_sharpness_probes")]
    pub sharpness_probes: usize,
    #[serde(default = "default_zero_tol_factor")]
    pub zero_tol_factor: f64,
    #[serde(default = "default_max_loo_n")]
    pub max_loo_n: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_sharpness_probes() -> usize {
    8
}

fn default_zero_tol_factor() -> f64 {
    1e-9
}

fn default_max_loo_n() -> usize {
    200
}

/// Run the whole chain: LOO oracle over every training sample, estimator
/// scores with their parameter-change norms, `gamma = max ||delta theta||`,
/// sharpness at the evaluation point, measured sign error, and both bounds.
pub fn bound_experiment(
    spec: &ModelSpec,
    estimator: &EstimatorConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    task: &BoundTaskConfig,
) -> Result<(BoundReport, InfluenceReport, Vec<LooResult>)> {
    if train_set.len() > task.max_loo_n {
        return Err(Error::InvalidConfig(format!(
            "training set of {} exceeds the LOO cap {}",
            train_set.len(),
            task.max_loo_n
        )));
    }
    // Ground truth.
    let loo = loo_all(spec, train_set, &task.loo, val_set, task.num_loo_seeds)?;
    let max_abs_delta = loo
        .iter()
        .map(|r| r.delta_val_risk.abs())
        .fold(0.0, f64::max);
    let partition = sign_partition(&loo, task.zero_tol_factor * max_abs_delta);

    // Evaluation point: the full-set retrain under the LOO base seed, tuned
    // when the estimator needs a vm/fvm checkpoint.
    let theta_star = retrain(spec, train_set, &task.loo, task.loo.base_seed)?;
    let star_ckpt = crate::model::Checkpoint {
        params: theta_star,
        step: task.loo.train.steps,
        learning_rate_at_step: task.loo.train.learning_rate,
        tag: "theta_star".into(),
    };
    let eval_ckpt = match estimator.variant {
        Variant::Vm | Variant::Fvm => {
            let mut tune_cfg = task.tune.clone().ok_or_else(|| {
                Error::InvalidConfig("vm/fvm bound experiment needs a tune config".into())
            })?;
            tune_cfg.flat = estimator.variant == Variant::Fvm;
            let mut rng = RngState::new(task.seed).split(3);
            tune_on_validation(spec, &star_ckpt, val_set, &tune_cfg, &mut rng)?
        }
        _ => star_ckpt,
    };

    let ctx = ScoreContext::build_at(
        spec,
        estimator,
        train_set,
        val_set,
        std::slice::from_ref(&eval_ckpt),
    )?;
    let scored: Vec<(usize, f64, f64)> = train_set
        .samples
        .par_iter()
        .map(|z| {
            ctx.set_score_and_param_change(z)
                .map(|(s, pc)| (z.id, s, pc))
        })
        .collect::<Result<_>>()?;
    let mut scores: Vec<(usize, f64)> = scored.iter().map(|(id, s, _)| (*id, *s)).collect();
    scores.sort_by_key(|(id, _)| *id);
    let report = InfluenceReport {
        estimator: estimator.clone(),
        checkpoint_tag: ctx.checkpoint_tag().to_string(),
        direction: estimator.variant.direction(),
        scores,
        wall_time: 0.0,
    };

    let gamma = scored
        .iter()
        .map(|(_, _, pc)| *pc)
        .fold(0.0, f64::max)
        .max(1e-12);
    let mut sharp_rng = RngState::new(task.seed).split(4);
    let sharp = sharpness_risk(
        spec,
        &eval_ckpt.params,
        val_set,
        gamma,
        task.sharpness_probes,
        &mut sharp_rng,
    )?;

    let measured = sign_error(&report, &partition)?;
    let theorem = theorem_bound(&report, &partition, sharp)?;
    let n = partition.positive_ids.len() + partition.negative_ids.len();
    let corollary = corollary_bound(theorem.bound, task.delta, n)?;
    let bound_report = BoundReport {
        estimator: estimator.clone(),
        mu: theorem.mu,
        sharp_risk: sharp,
        gamma,
        theorem_bound: theorem.bound,
        delta: task.delta,
        n,
        corollary_bound: corollary,
        corollary_bound_clamped: corollary.clamp(0.0, 1.0),
        measured_error: measured,
        assumptions_hold: theorem.assumptions_hold,
        normalization: if estimator.variant.positive_only() {
            "median_centered".into()
        } else {
            "signed".into()
        },
        num_positive: partition.positive_ids.len(),
        num_negative: partition.negative_ids.len(),
        num_zero: partition.zero_ids.len(),
    };
    Ok((bound_report, report, loo))
}

#[derive(Serialize, Deserialize)]
struct BoundFile {
    version: String,
    #[serde(flatten)]
    report: BoundReport,
}

pub fn save_bound_report(report: &BoundReport, path: &Path) -> Result<()> {
    let file = BoundFile {
        version: BOUND_FORMAT_VERSION.to_string(),
        report: report.clone(),
    };
    serde_json::to_writer_pretty(std::fs::File::create(path)?, &file)?;
    Ok(())
}

pub fn load_bound_report(path: &Path) -> Result<BoundReport> {
    let file: BoundFile = serde_json::from_reader(std::fs::File::open(path)?)?;
    if file.version != BOUND_FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported bound report version {:?}", file.version),
        });
    }
    Ok(file.report)
}

#[derive(Serialize, Deserialize)]
struct LooFile {
    version: String,
    results: Vec<LooResult>,
}

pub fn save_loo_results(results: &[LooResult], path: &Path) -> Result<()> {
    let file = LooFile {
        version: BOUND_FORMAT_VERSION.to_string(),
        results: results.to_vec(),
    };
    serde_json::to_writer_pretty(std::fs::File::create(path)?, &file)?;
    Ok(())
}

pub fn load_loo_results(path: &Path) -> Result<Vec<LooResult>> {
    let file: LooFile = serde_json::from_reader(std::fs::File::open(path)?)?;
    if file.version != BOUND_FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported loo result version {:?}", file.version),
        });
    }
    Ok(file.results)
}
