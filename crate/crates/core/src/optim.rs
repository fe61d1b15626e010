//! Training and tuning loops: SGD with momentum and cosine decay, SAM's
//! two-step ascent/descent update, validation-minima tuning, and the probe
//! estimator for the sharpness-augmented risk.

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{batch_grad, batch_risk, batch_risk_grad, Checkpoint, ModelSpec, ParamVector};
use crate::numerics::{all_finite, axpy, norm2, scale, RngState};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8] = b"IFLAB-CKPT-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_schedule() -> Schedule {
    Schedule::Constant
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => cosine_lr(self.learning_rate, step, self.steps)
                .expect("step within range by construction"),
        }
    }
}

/// SAM perturbation radius (global L2 norm over the flat parameter vector)
/// plus the base SGD settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub gamma: f64,
    pub base: SgdConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    /// false: plain validation tuning ("vm"); true: SAM tuning ("fvm").
    pub flat: bool,
    pub sgd: SgdConfig,
    #[serde(default = "default_sam_gamma")]
    pub sam_gamma: f64,
}

fn default_sam_gamma() -> f64 {
    0.05
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.flat && self.sam_gamma <= 0.0 {
            return Err(Error::InvalidConfig(
                "sam_gamma must be > 0 for flat tuning".into(),
            ));
        }
        Ok(())
    }
}

/// Momentum buffer carrying its own smoothing coefficient.
#[derive(Clone, Debug)]
pub struct MomentumState {
    pub momentum: f64,
    buf: Vec<f64>,
}

impl MomentumState {
    pub fn new(momentum: f64, dim: usize) -> Self {
        MomentumState {
            momentum,
            buf: vec![0.0; dim],
        }
    }
}

/// `theta -= lr * (momentum-smoothed grad)`, in place.
pub fn apply_sgd_update(params: &mut [f64], grad: &[f64], lr: f64, state: &mut MomentumState) {
    debug_assert_eq!(params.len(), grad.len());
    debug_assert_eq!(params.len(), state.buf.len());
    if state.momentum == 0.0 {
        axpy(-lr, grad, params);
        return;
    }
    for (b, g) in state.buf.iter_mut().zip(grad) {
        *b = state.momentum * *b + g;
    }
    axpy(-lr, &state.buf, params);
}

/// One SGD step on a minibatch.
pub fn sgd_step(
    spec: &ModelSpec,
    params: &ParamVector,
    minibatch: &[Sample],
    lr: f64,
    state: &mut MomentumState,
) -> Result<ParamVector> {
    if lr <= 0.0 {
        return Err(Error::InvalidConfig("lr must be > 0".into()));
    }
    let g = batch_grad(spec, params, minibatch)?;
    let mut next = params.clone();
    apply_sgd_update(&mut next.values, &g.values, lr, state);
    Ok(next)
}

/// `base_lr * (1 + cos(pi * step / total)) / 2`
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidConfig(format!(
            "step {step} out of range for {total_steps} total steps"
        )));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

/// The SAM gradient: evaluate the batch gradient at the ascent point
/// `theta + gamma * g / ||g||`. Falls back to the plain gradient when the
/// gradient norm underflows.
pub fn sam_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    minibatch: &[Sample],
    gamma: f64,
) -> Result<ParamVector> {
    if gamma <= 0.0 {
        return Err(Error::InvalidConfig("sam gamma must be > 0".into()));
    }
    let g = batch_grad(spec, params, minibatch)?;
    let gn = norm2(&g.values);
    if gn < 1e-12 {
        return Ok(g);
    }
    let mut ascent = params.clone();
    axpy(gamma / gn, &g.values, &mut ascent.values);
    batch_grad(spec, &ascent, minibatch)
}

/// One SAM step: ascent to `theta + gamma * g/||g||`, descend with the
/// gradient taken there.
pub fn sam_step(
    spec: &ModelSpec,
    params: &ParamVector,
    minibatch: &[Sample],
    lr: f64,
    gamma: f64,
) -> Result<ParamVector> {
    let g = sam_grad(spec, params, minibatch, gamma)?;
    let mut next = params.clone();
    axpy(-lr, &g.values, &mut next.values);
    Ok(next)
}

/// Minibatch scheduler: without-replacement shuffling, reshuffled each epoch
/// from the seeded stream.
struct EpochBatches {
    samples: Vec<Sample>,
    cursor: usize,
    batch_size: usize,
}

impl EpochBatches {
    fn new(dataset: &Dataset, batch_size: usize) -> Self {
        EpochBatches {
            samples: dataset.samples.clone(),
            cursor: 0,
            batch_size,
        }
    }

    fn next_batch(&mut self, rng: &mut RngState) -> &[Sample] {
        if self.cursor >= self.samples.len() {
            rng.shuffle(&mut self.samples);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.samples.len());
        let batch = &self.samples[self.cursor..end];
        self.cursor = end;
        batch
    }
}

fn run_loop(
    spec: &ModelSpec,
    start: &ParamVector,
    dataset: &Dataset,
    config: &SgdConfig,
    rng: &mut RngState,
    sam_gamma: Option<f64>,
    final_tag: &str,
) -> Result<Vec<Checkpoint>> {
    spec.validate()?;
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySet("training set"));
    }
    let mut params = start.clone();
    let mut state = MomentumState::new(config.momentum, params.len());
    let mut batches = EpochBatches::new(dataset, config.batch_size);
    // Shuffle before the first epoch too.
    batches.cursor = batches.samples.len();

    let mut checkpoints = Vec::new();
    let emit_periodic = config.checkpoint_every > 0;
    if emit_periodic && config.steps > 0 {
        checkpoints.push(Checkpoint {
            params: params.clone(),
            step: 0,
            learning_rate_at_step: config.lr_at(0),
            tag: "init".into(),
        });
    }

    let mut last_risk = f64::NAN;
    for step in 0..config.steps {
        let lr = config.lr_at(step);
        let batch = batches.next_batch(rng);
        let evaluated = match sam_gamma {
            None => batch_risk_grad(spec, &params, batch),
            Some(gamma) => batch_risk(spec, &params, batch)
                .and_then(|risk| Ok((risk, sam_grad(spec, &params, batch, gamma)?))),
        };
        let (risk, grad) = match evaluated {
            Ok(rg) => rg,
            // Overflowed losses surface as non-finite errors; report them as
            // divergence with the last finite risk.
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { step, last_risk }),
            Err(e) => return Err(e),
        };
        if !risk.is_finite() {
            return Err(Error::Divergence {
                step,
                last_risk,
            });
        }
        last_risk = risk;
        apply_sgd_update(&mut params.values, &grad.values, lr, &mut state);
        if !all_finite(&params.values) {
            return Err(Error::Divergence { step, last_risk });
        }
        let done = step + 1;
        if emit_periodic && done % config.checkpoint_every == 0 && done < config.steps {
            checkpoints.push(Checkpoint {
                params: params.clone(),
                step: done,
                learning_rate_at_step: config.lr_at(done),
                tag: format!("step_{done}"),
            });
        }
    }
    checkpoints.push(Checkpoint {
        params,
        step: config.steps,
        learning_rate_at_step: config.lr_at(config.steps),
        tag: final_tag.into(),
    });
    Ok(checkpoints)
}

/// Train from scratch: parameters are initialized from `rng`, then SGD runs
/// for `config.steps`. The final checkpoint is tagged `"theta_star"`,
/// periodic ones `"step_<n>"` (plus `"init"` at step 0 when
/// `checkpoint_every > 0`).
pub fn train(
    spec: &ModelSpec,
    train_set: &Dataset,
    config: &SgdConfig,
    rng: &mut RngState,
) -> Result<Vec<Checkpoint>> {
    let init = crate::model::init_params(spec, rng)?;
    run_loop(spec, &init, train_set, config, rng, None, "theta_star")
}

/// [`train`] from an explicit starting point instead of a fresh init.
pub fn train_from(
    spec: &ModelSpec,
    train_set: &Dataset,
    config: &SgdConfig,
    init: &ParamVector,
    rng: &mut RngState,
) -> Result<Vec<Checkpoint>> {
    run_loop(spec, init, train_set, config, rng, None, "theta_star")
}

/// Tune a trained checkpoint on the validation set; plain SGD when
/// `flat == false` (result tagged `"vm"`), SAM otherwise (`"fvm"`).
pub fn tune_on_validation(
    spec: &ModelSpec,
    start: &Checkpoint,
    val_set: &Dataset,
    config: &TuneConfig,
    rng: &mut RngState,
) -> Result<Checkpoint> {
    let mut checkpoints = tune_trajectory(spec, start, val_set, config, rng)?;
    Ok(checkpoints.pop().expect("final checkpoint always emitted"))
}

/// Like [`tune_on_validation`] but returning the intermediate checkpoints
/// too (at `checkpoint_every`), for sweeps across tuning steps.
pub fn tune_trajectory(
    spec: &ModelSpec,
    start: &Checkpoint,
    val_set: &Dataset,
    config: &TuneConfig,
    rng: &mut RngState,
) -> Result<Vec<Checkpoint>> {
    config.validate()?;
    let tag = if config.flat { "fvm" } else { "vm" };
    if config.sgd.steps == 0 {
        return Ok(vec![Checkpoint {
            params: start.params.clone(),
            step: start.step,
            learning_rate_at_step: 0.0,
            tag: tag.into(),
        }]);
    }
    let gamma = if config.flat { Some(config.sam_gamma) } else { None };
    run_loop(spec, &start.params, val_set, &config.sgd, rng, gamma, tag)
}

/// Lower-bound estimate of the sharpness-augmented risk
/// `max_{||d|| <= gamma} R(theta + d)`: one normalized-gradient ascent
/// direction plus `num_probes` random directions of norm `gamma`, maxed with
/// the unperturbed risk so the estimate never undercuts the base value.
pub fn sharpness_risk(
    spec: &ModelSpec,
    params: &ParamVector,
    dataset: &Dataset,
    gamma: f64,
    num_probes: usize,
    rng: &mut RngState,
) -> Result<f64> {
    if gamma <= 0.0 {
        return Err(Error::InvalidConfig("gamma must be > 0".into()));
    }
    if num_probes == 0 {
        return Err(Error::InvalidConfig("num_probes must be >= 1".into()));
    }
    let samples = &dataset.samples;
    let base = batch_risk(spec, params, samples)?;
    let mut best = base;

    let g = batch_grad(spec, params, samples)?;
    let gn = norm2(&g.values);
    if gn >= 1e-12 {
        let mut probe = params.clone();
        axpy(gamma / gn, &g.values, &mut probe.values);
        best = best.max(batch_risk(spec, &probe, samples)?);
    }
    for _ in 0..num_probes {
        let mut dir = rng.gaussian_vec(params.len())?;
        let dn = norm2(&dir);
        if dn < 1e-12 {
            continue;
        }
        scale(gamma / dn, &mut dir);
        let mut probe = params.clone();
        axpy(1.0, &dir, &mut probe.values);
        best = best.max(batch_risk(spec, &probe, samples)?);
    }
    Ok(best)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec_hash: u64,
    step: usize,
    learning_rate_at_step: f64,
    tag: String,
    param_count: usize,
}

/// Binary checkpoint: magic string, little-endian u32 header length, JSON
/// header, then raw little-endian f64 parameters.
pub fn save_checkpoint(checkpoint: &Checkpoint, spec: &ModelSpec, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        spec_hash: spec.content_hash(),
        step: checkpoint.step,
        learning_rate_at_step: checkpoint.learning_rate_at_step,
        tag: checkpoint.tag.clone(),
        param_count: checkpoint.params.len(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for v in &checkpoint.params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, spec: &ModelSpec) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            line: 0,
            msg: "not an IFLAB-CKPT-1 file".into(),
        });
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.spec_hash != spec.content_hash() {
        return Err(Error::InvalidConfig(
            "checkpoint spec hash does not match the supplied model spec".into(),
        ));
    }
    if header.param_count != spec.param_count() {
        return Err(Error::DimensionMismatch {
            what: "checkpoint parameters",
            expected: spec.param_count(),
            got: header.param_count,
        });
    }
    let mut values = Vec::with_capacity(header.param_count);
    let mut buf = [0u8; 8];
    for _ in 0..header.param_count {
        r.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Ok(Checkpoint {
        params: ParamVector::from_values(values),
        step: header.step,
        learning_rate_at_step: header.learning_rate_at_step,
        tag: header.tag,
    })
}
