//! Influence estimators.
//!
//! Five variants share one scoring interface:
//!
//! - `exact_if` / `lissa_if`: the standard influence function
//!   `mean_val_grad^T (H_tr + lambda I)^{-1} g_tr`, with the inverse taken
//!   either through an explicit Cholesky solve or the LiSSA Neumann
//!   recursion. Helpful samples score positive, so mislabeled samples sit at
//!   the low end (`lower_is_noisier`).
//! - `tracin`: learning-rate-weighted gradient dot products summed across
//!   training checkpoints. Same orientation.
//! - `vm` / `fvm`: the quadratic form `g^T (H_val + lambda I)^{-1} g`
//!   evaluated at a checkpoint tuned on the validation set (plain tuning for
//!   `vm`, SAM tuning for `fvm`). The form is positive semidefinite by
//!   construction and large for samples the tuned model finds surprising, so
//!   reports carry `higher_is_noisier`. Backends: explicit solve, LiSSA
//!   (optionally through the randomized probe identity
//!   `E[g^T H^{-1} V V^T g] = g^T H^{-1} g`), or the diagonal empirical
//!   Fisher preconditioner.

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{
    batch_grad, explicit_hessian, grad, hvp, Checkpoint, ModelSpec, ParamVector,
};
use crate::numerics::{axpy, dot, norm2, spectral_norm_estimate, CholeskyFactor, RngState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const INFLUENCE_FORMAT_VERSION: &str = "iflab-inf-1";

/// Fixed salt for the probe vectors and the power-iteration start, so that
/// scoring is reproducible without threading an RNG through every call.
const PROBE_SEED: u64 = 0x1F1AB;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ExactIf,
    LissaIf,
    Tracin,
    Vm,
    Fvm,
}

impl Variant {
    pub fn direction(self) -> Direction {
        match self {
            Variant::ExactIf | Variant::LissaIf | Variant::Tracin => Direction::LowerIsNoisier,
            Variant::Vm | Variant::Fvm => Direction::HigherIsNoisier,
        }
    }

    /// VM/FVM produce nonnegative quadratic forms; they carry no sign.
    pub fn positive_only(self) -> bool {
        matches!(self, Variant::Vm | Variant::Fvm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ExactIf => "exact_if",
            Variant::LissaIf => "lissa_if",
            Variant::Tracin => "tracin",
            Variant::Vm => "vm",
            Variant::Fvm => "fvm",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "exact_if" => Ok(Variant::ExactIf),
            "lissa_if" => Ok(Variant::LissaIf),
            "tracin" => Ok(Variant::Tracin),
            "vm" => Ok(Variant::Vm),
            "fvm" => Ok(Variant::Fvm),
            other => Err(Error::Usage(format!(
                "unknown estimator {other:?} (expected exact_if|lissa_if|tracin|vm|fvm)"
            ))),
        }
    }
}

/// Which extreme of the score ranking contains mislabeled samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsNoisier,
    LowerIsNoisier,
}

impl Direction {
    pub fn flipped(self) -> Direction {
        match self {
            Direction::HigherIsNoisier => Direction::LowerIsNoisier,
            Direction::LowerIsNoisier => Direction::HigherIsNoisier,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianBackend {
    Explicit,
    Lissa,
    DiagFisher,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LissaConfig {
    pub depth: usize,
    pub repeats: usize,
    /// `None` selects `1.5 x` a power-iteration estimate of the damped
    /// Hessian norm at scoring time.
    pub scale: Option<f64>,
}

impl Default for LissaConfig {
    fn default() -> Self {
        LissaConfig {
            depth: 500,
            repeats: 4,
            scale: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub variant: Variant,
    #[serde(default)]
    pub damping: f64,
    /// Second-order weight in the per-sample score; `None` resolves to
    /// `1 / N_train` (the removal weight) at scoring time.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub lissa: LissaConfig,
    #[serde(default = "default_backend")]
    pub hessian_backend: HessianBackend,
    #[serde(default)]
    pub probes: usize,
}

fn default_backend() -> HessianBackend {
    HessianBackend::DiagFisher
}

impl EstimatorConfig {
    pub fn new(variant: Variant) -> Self {
        let hessian_backend = match variant {
            Variant::ExactIf => HessianBackend::Explicit,
            Variant::LissaIf => HessianBackend::Lissa,
            _ => HessianBackend::DiagFisher,
        };
        EstimatorConfig {
            variant,
            damping: 0.0,
            epsilon: None,
            lissa: LissaConfig::default(),
            hessian_backend,
            probes: 0,
        }
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    pub fn with_backend(mut self, backend: HessianBackend) -> Self {
        self.hessian_backend = backend;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.damping < 0.0 {
            return Err(Error::InvalidConfig("damping must be >= 0".into()));
        }
        if let Some(e) = self.epsilon {
            if e <= 0.0 {
                return Err(Error::InvalidConfig("epsilon must be > 0".into()));
            }
        }
        if let Some(s) = self.lissa.scale {
            if s <= 0.0 {
                return Err(Error::InvalidConfig("lissa scale must be > 0".into()));
            }
        }
        if self.lissa.repeats == 0 {
            return Err(Error::InvalidConfig("lissa repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// Damped diagonal of the empirical Fisher information matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalPreconditioner {
    pub diag: Vec<f64>,
}

/// Per-training-sample scores plus the provenance needed to interpret them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub estimator: EstimatorConfig,
    pub checkpoint_tag: String,
    pub direction: Direction,
    /// `(sample id, score)` sorted by id.
    pub scores: Vec<(usize, f64)>,
    pub wall_time: f64,
}

impl InfluenceReport {
    pub fn score_of(&self, id: usize) -> Option<f64> {
        self.scores
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|idx| self.scores[idx].1)
    }
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    version: String,
    #[serde(flatten)]
    report: InfluenceReport,
}

pub fn save_report(report: &InfluenceReport, path: &Path) -> Result<()> {
    let file = ReportFile {
        version: INFLUENCE_FORMAT_VERSION.to_string(),
        report: report.clone(),
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &file)?;
    use std::io::Write;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<InfluenceReport> {
    let file: ReportFile = serde_json::from_reader(std::fs::File::open(path)?)?;
    if file.version != INFLUENCE_FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported influence report version {:?}", file.version),
        });
    }
    Ok(file.report)
}

// ---------------------------------------------------------------------------
// LiSSA recursion
// ---------------------------------------------------------------------------

const LISSA_GROWTH_LIMIT: f64 = 1e6;

/// Truncated Neumann recursion `r <- v + (I - A/scale) r` for a symmetric
/// positive definite operator `A` given through `matvec`; after `depth`
/// iterations `r / scale` approximates `A^{-1} v`. Requires
/// `||A|| < 2 * scale` to contract.
pub fn lissa_recursion<F>(
    v: &[f64],
    depth: usize,
    repeats: usize,
    scale: f64,
    matvec: F,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if scale <= 0.0 {
        return Err(Error::InvalidConfig("lissa scale must be > 0".into()));
    }
    if repeats == 0 {
        return Err(Error::InvalidConfig("lissa repeats must be >= 1".into()));
    }
    let v_norm = norm2(v).max(1e-300);
    let mut acc = vec![0.0; v.len()];
    for _ in 0..repeats {
        let mut r = v.to_vec();
        for t in 0..depth {
            let av = matvec(&r)?;
            // r = v + r - A r / scale
            for i in 0..r.len() {
                r[i] = v[i] + r[i] - av[i] / scale;
            }
            if norm2(&r) > LISSA_GROWTH_LIMIT * v_norm {
                return Err(Error::LissaDiverged {
                    depth: t,
                    limit: LISSA_GROWTH_LIMIT,
                });
            }
        }
        axpy(1.0 / (repeats as f64 * scale), &r, &mut acc);
    }
    Ok(acc)
}

/// `1.5 x` power-iteration estimate of the damped Hessian spectral norm,
/// the default LiSSA scale.
pub fn lissa_auto_scale(
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[Sample],
    damping: f64,
) -> Result<f64> {
    let dim = params.len();
    let mut rng = RngState::new(PROBE_SEED).split(1);
    let norm = spectral_norm_estimate(dim, 30, &mut rng, |x| {
        let hv = hvp(spec, params, samples, &ParamVector::from_values(x.to_vec()))?;
        let mut out = hv.values;
        axpy(damping, x, &mut out);
        Ok(out)
    })?;
    Ok(1.5 * norm.max(damping).max(1e-12))
}

/// LiSSA estimate of `(H + damping I)^{-1} v`, with `H` the mean Hessian of
/// `samples` at `params`.
pub fn lissa_ihvp(
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[Sample],
    damping: f64,
    v: &[f64],
    config: &LissaConfig,
) -> Result<Vec<f64>> {
    let scale = match config.scale {
        Some(s) => s,
        None => lissa_auto_scale(spec, params, samples, damping)?,
    };
    lissa_recursion(v, config.depth, config.repeats, scale, |x| {
        let hv = hvp(spec, params, samples, &ParamVector::from_values(x.to_vec()))?;
        let mut out = hv.values;
        axpy(damping, x, &mut out);
        Ok(out)
    })
}

// ---------------------------------------------------------------------------
// Diagonal Fisher preconditioner
// ---------------------------------------------------------------------------

fn diag_from_grads<'a>(grads: impl Iterator<Item = &'a [f64]>, dim: usize, damping: f64) -> Vec<f64> {
    let mut diag = vec![0.0; dim];
    let mut count = 0usize;
    for g in grads {
        for (d, gi) in diag.iter_mut().zip(g) {
            *d += gi * gi;
        }
        count += 1;
    }
    let inv = 1.0 / count.max(1) as f64;
    for d in diag.iter_mut() {
        *d = *d * inv + damping;
    }
    diag
}

/// `diag_j = mean_m (g_{m,j})^2 + damping` over the validation set.
pub fn build_diag_fisher(
    spec: &ModelSpec,
    params: &ParamVector,
    val_set: &[Sample],
    damping: f64,
) -> Result<DiagonalPreconditioner> {
    if val_set.is_empty() {
        return Err(Error::EmptySet("diag fisher validation set"));
    }
    let grads: Vec<Vec<f64>> = val_set
        .iter()
        .map(|z| grad(spec, params, z).map(|g| g.values))
        .collect::<Result<_>>()?;
    let diag = diag_from_grads(grads.iter().map(|g| g.as_slice()), params.len(), damping);
    Ok(DiagonalPreconditioner { diag })
}

// ---------------------------------------------------------------------------
// Scoring context
// ---------------------------------------------------------------------------

/// The inverse-Hessian application behind a score.
enum Solver {
    Explicit(CholeskyFactor),
    Diag(Vec<f64>),
    Lissa {
        depth: usize,
        repeats: usize,
        scale: f64,
        damping: f64,
        samples: Vec<Sample>,
    },
}

impl Solver {
    fn apply(&self, spec: &ModelSpec, params: &ParamVector, g: &[f64]) -> Result<Vec<f64>> {
        match self {
            Solver::Explicit(factor) => factor.solve(g),
            Solver::Diag(diag) => {
                let mut out = Vec::with_capacity(g.len());
                for (gi, di) in g.iter().zip(diag) {
                    if *di <= 0.0 {
                        return Err(Error::NotPositiveDefinite {
                            pivot: out.len(),
                        });
                    }
                    out.push(gi / di);
                }
                Ok(out)
            }
            Solver::Lissa {
                depth,
                repeats,
                scale,
                damping,
                samples,
            } => lissa_recursion(g, *depth, *repeats, *scale, |x| {
                let hv = hvp(spec, params, samples, &ParamVector::from_values(x.to_vec()))?;
                let mut out = hv.values;
                axpy(*damping, x, &mut out);
                Ok(out)
            }),
        }
    }
}

struct TracinState {
    params: ParamVector,
    lr: f64,
    mean_val_grad: Vec<f64>,
}

enum ContextKind {
    Standard {
        eval_params: ParamVector,
        /// `(H_tr + lambda)^{-1} mean_val_grad`; one solve shared by every
        /// training sample through the symmetry of the damped Hessian.
        u_mean: Vec<f64>,
        solver: Solver,
    },
    Tracin {
        states: Vec<TracinState>,
    },
    VmFvm {
        tuned_params: ParamVector,
        solver: Solver,
        /// `(V_p, (H + lambda)^{-1} V_p)` pairs; nonempty only for the
        /// randomized probe estimator (lissa backend, probes > 0).
        probe_pairs: Vec<(Vec<f64>, Vec<f64>)>,
    },
}

/// Everything scoring needs, built once per (estimator, checkpoint) and
/// read-only afterwards so per-sample scoring parallelizes freely.
pub struct ScoreContext {
    spec: ModelSpec,
    estimator: EstimatorConfig,
    epsilon: f64,
    checkpoint_tag: String,
    kind: ContextKind,
}

/// Per-training-sample precomputation for pair (train, val) scores.
pub enum TrainVector {
    /// `(H + lambda)^{-1} g_tr`
    Standard { u: Vec<f64> },
    /// gradient of the training sample at every checkpoint
    Tracin { grads: Vec<Vec<f64>> },
    /// `(g_tr, (H_val + lambda)^{-1} g_tr)`
    VmFvm { u: Vec<f64> },
}

/// Per-validation-sample precomputation for pair scores.
pub enum ValVector {
    Standard { g: Vec<f64> },
    Tracin { grads: Vec<Vec<f64>> },
    /// Sample retained: the second-order term needs a fresh Hessian-vector
    /// product against the train-side direction.
    VmFvm { g: Vec<f64>, sample: Sample },
}

fn find_tagged<'a>(checkpoints: &'a [Checkpoint], tag: &str) -> Result<&'a Checkpoint> {
    checkpoints
        .iter()
        .rev()
        .find(|c| c.tag == tag)
        .ok_or_else(|| Error::Usage(format!("no checkpoint tagged {tag:?} supplied")))
}

impl ScoreContext {
    /// Select the variant-appropriate checkpoints by tag and build.
    /// `exact_if`/`lissa_if` use `"theta_star"`, `vm`/`fvm` the matching
    /// tuned tag, `tracin` every supplied checkpoint in order.
    pub fn build(
        spec: &ModelSpec,
        estimator: &EstimatorConfig,
        train_set: &Dataset,
        val_set: &Dataset,
        checkpoints: &[Checkpoint],
    ) -> Result<ScoreContext> {
        match estimator.variant {
            Variant::ExactIf | Variant::LissaIf => {
                let eval = find_tagged(checkpoints, "theta_star")?;
                Self::build_at(spec, estimator, train_set, val_set, std::slice::from_ref(eval))
            }
            Variant::Vm => {
                let eval = find_tagged(checkpoints, "vm")?;
                Self::build_at(spec, estimator, train_set, val_set, std::slice::from_ref(eval))
            }
            Variant::Fvm => {
                let eval = find_tagged(checkpoints, "fvm")?;
                Self::build_at(spec, estimator, train_set, val_set, std::slice::from_ref(eval))
            }
            Variant::Tracin => Self::build_at(spec, estimator, train_set, val_set, checkpoints),
        }
    }

    /// Build against explicit evaluation checkpoints, skipping tag checks;
    /// sweeps use this to probe arbitrary training or tuning states.
    pub fn build_at(
        spec: &ModelSpec,
        estimator: &EstimatorConfig,
        train_set: &Dataset,
        val_set: &Dataset,
        eval_checkpoints: &[Checkpoint],
    ) -> Result<ScoreContext> {
        estimator.validate()?;
        if eval_checkpoints.is_empty() {
            return Err(Error::Usage("at least one checkpoint required".into()));
        }
        if val_set.is_empty() {
            return Err(Error::EmptySet("validation set"));
        }
        if train_set.is_empty() {
            return Err(Error::EmptySet("training set"));
        }
        let epsilon = estimator
            .epsilon
            .unwrap_or(1.0 / train_set.len() as f64);

        // Hessian accumulation order is canonicalized by id so a shuffled
        // training set produces bitwise-identical scores.
        let mut train_canonical = train_set.samples.clone();
        train_canonical.sort_by_key(|s| s.id);

        let kind = match estimator.variant {
            Variant::ExactIf | Variant::LissaIf => {
                let eval = &eval_checkpoints[eval_checkpoints.len() - 1];
                let backend = match estimator.variant {
                    Variant::ExactIf => HessianBackend::Explicit,
                    _ => HessianBackend::Lissa,
                };
                let solver = build_solver(
                    spec,
                    backend,
                    &eval.params,
                    &train_canonical,
                    estimator,
                )?;
                let g_mean = batch_grad(spec, &eval.params, &val_set.samples)?;
                let u_mean = solver.apply(spec, &eval.params, &g_mean.values)?;
                ContextKind::Standard {
                    eval_params: eval.params.clone(),
                    u_mean,
                    solver,
                }
            }
            Variant::Tracin => {
                let mut states = Vec::with_capacity(eval_checkpoints.len());
                for c in eval_checkpoints {
                    let g = batch_grad(spec, &c.params, &val_set.samples)?;
                    states.push(TracinState {
                        params: c.params.clone(),
                        lr: c.learning_rate_at_step,
                        mean_val_grad: g.values,
                    });
                }
                ContextKind::Tracin { states }
            }
            Variant::Vm | Variant::Fvm => {
                let eval = &eval_checkpoints[eval_checkpoints.len() - 1];
                let solver = build_solver(
                    spec,
                    estimator.hessian_backend,
                    &eval.params,
                    &val_set.samples,
                    estimator,
                )?;
                let probe_pairs = if estimator.hessian_backend == HessianBackend::Lissa
                    && estimator.probes > 0
                {
                    let mut rng = RngState::new(PROBE_SEED);
                    let mut pairs = Vec::with_capacity(estimator.probes);
                    for _ in 0..estimator.probes {
                        let v = rng.gaussian_vec(eval.params.len())?;
                        let w = solver.apply(spec, &eval.params, &v)?;
                        pairs.push((v, w));
                    }
                    pairs
                } else {
                    Vec::new()
                };
                ContextKind::VmFvm {
                    tuned_params: eval.params.clone(),
                    solver,
                    probe_pairs,
                }
            }
        };
        Ok(ScoreContext {
            spec: spec.clone(),
            estimator: estimator.clone(),
            epsilon,
            checkpoint_tag: eval_checkpoints[eval_checkpoints.len() - 1].tag.clone(),
            kind,
        })
    }

    pub fn direction(&self) -> Direction {
        self.estimator.variant.direction()
    }

    /// Orientation of [`ScoreContext::pair_score`] values. Unlike the
    /// set-level vm/fvm quadratic form, the per-validation-sample score is
    /// dominated by its signed bilinear term for every variant, so higher
    /// always means more helpful.
    pub fn pair_direction(&self) -> Direction {
        Direction::LowerIsNoisier
    }

    pub fn checkpoint_tag(&self) -> &str {
        &self.checkpoint_tag
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Set-level influence of one training sample on the whole validation
    /// set.
    pub fn set_score(&self, z_tr: &Sample) -> Result<f64> {
        match &self.kind {
            ContextKind::Standard {
                eval_params, u_mean, ..
            } => {
                let g = grad(&self.spec, eval_params, z_tr)?;
                dot(u_mean, &g.values)
            }
            ContextKind::Tracin { states } => {
                let mut total = 0.0;
                for st in states {
                    let g = grad(&self.spec, &st.params, z_tr)?;
                    total += st.lr * dot(&st.mean_val_grad, &g.values)?;
                }
                Ok(total)
            }
            ContextKind::VmFvm {
                tuned_params,
                solver,
                probe_pairs,
            } => {
                let g = grad(&self.spec, tuned_params, z_tr)?;
                if probe_pairs.is_empty() {
                    let u = solver.apply(&self.spec, tuned_params, &g.values)?;
                    dot(&g.values, &u)
                } else {
                    let mut total = 0.0;
                    for (v, w) in probe_pairs {
                        total += dot(&g.values, w)? * dot(v, &g.values)?;
                    }
                    Ok(total / probe_pairs.len() as f64)
                }
            }
        }
    }

    /// Set score plus the estimated parameter-change norm
    /// `epsilon * ||(H + lambda)^{-1} g||` for the bound experiments.
    pub fn set_score_and_param_change(&self, z_tr: &Sample) -> Result<(f64, f64)> {
        let score = self.set_score(z_tr)?;
        let pc = match &self.kind {
            ContextKind::Standard {
                eval_params, solver, ..
            } => {
                let g = grad(&self.spec, eval_params, z_tr)?;
                let u = solver.apply(&self.spec, eval_params, &g.values)?;
                self.epsilon * norm2(&u)
            }
            ContextKind::Tracin { states } => {
                let mut step = vec![0.0; states[0].params.len()];
                for st in states {
                    let g = grad(&self.spec, &st.params, z_tr)?;
                    axpy(st.lr, &g.values, &mut step);
                }
                self.epsilon * norm2(&step)
            }
            ContextKind::VmFvm {
                tuned_params,
                solver,
                ..
            } => {
                let g = grad(&self.spec, tuned_params, z_tr)?;
                let u = solver.apply(&self.spec, tuned_params, &g.values)?;
                self.epsilon * norm2(&u)
            }
        };
        Ok((score, pc))
    }

    pub fn train_vector(&self, z_tr: &Sample) -> Result<TrainVector> {
        match &self.kind {
            ContextKind::Standard {
                eval_params, solver, ..
            } => {
                let g = grad(&self.spec, eval_params, z_tr)?;
                let u = solver.apply(&self.spec, eval_params, &g.values)?;
                Ok(TrainVector::Standard { u })
            }
            ContextKind::Tracin { states } => {
                let grads = states
                    .iter()
                    .map(|st| grad(&self.spec, &st.params, z_tr).map(|g| g.values))
                    .collect::<Result<Vec<_>>>()?;
                Ok(TrainVector::Tracin { grads })
            }
            ContextKind::VmFvm {
                tuned_params,
                solver,
                ..
            } => {
                let g = grad(&self.spec, tuned_params, z_tr)?;
                let u = solver.apply(&self.spec, tuned_params, &g.values)?;
                Ok(TrainVector::VmFvm { u })
            }
        }
    }

    pub fn val_vector(&self, z_val: &Sample) -> Result<ValVector> {
        match &self.kind {
            ContextKind::Standard { eval_params, .. } => {
                let g = grad(&self.spec, eval_params, z_val)?;
                Ok(ValVector::Standard { g: g.values })
            }
            ContextKind::Tracin { states } => {
                let grads = states
                    .iter()
                    .map(|st| grad(&self.spec, &st.params, z_val).map(|g| g.values))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ValVector::Tracin { grads })
            }
            ContextKind::VmFvm { tuned_params, .. } => {
                let g = grad(&self.spec, tuned_params, z_val)?;
                Ok(ValVector::VmFvm {
                    g: g.values,
                    sample: z_val.clone(),
                })
            }
        }
    }

    /// Influence of one training sample on one validation sample. For
    /// `vm`/`fvm` this is the two-term form: the bilinear first-order term
    /// plus `epsilon/2` times the curvature of the validation sample along
    /// the estimated parameter change.
    pub fn pair_score(&self, tv: &TrainVector, vv: &ValVector) -> Result<f64> {
        match (&self.kind, tv, vv) {
            (ContextKind::Standard { .. }, TrainVector::Standard { u }, ValVector::Standard { g }) => {
                dot(g, u)
            }
            (ContextKind::Tracin { states }, TrainVector::Tracin { grads: tg }, ValVector::Tracin { grads: vg }) => {
                let mut total = 0.0;
                for ((st, a), b) in states.iter().zip(tg).zip(vg) {
                    total += st.lr * dot(a, b)?;
                }
                Ok(total)
            }
            (
                ContextKind::VmFvm { tuned_params, .. },
                TrainVector::VmFvm { u },
                ValVector::VmFvm { g, sample },
            ) => {
                let first = dot(g, u)?;
                let hu = hvp(
                    &self.spec,
                    tuned_params,
                    std::slice::from_ref(sample),
                    &ParamVector::from_values(u.clone()),
                )?;
                let second = 0.5 * self.epsilon * dot(u, &hu.values)?;
                Ok(first + second)
            }
            _ => Err(Error::Usage(
                "train/val vectors built by a different estimator context".into(),
            )),
        }
    }
}

fn build_solver(
    spec: &ModelSpec,
    backend: HessianBackend,
    params: &ParamVector,
    hessian_samples: &[Sample],
    estimator: &EstimatorConfig,
) -> Result<Solver> {
    match backend {
        HessianBackend::Explicit => {
            let h = explicit_hessian(spec, params, hessian_samples, estimator.damping)?;
            Ok(Solver::Explicit(CholeskyFactor::new(&h)?))
        }
        HessianBackend::DiagFisher => {
            let pre = build_diag_fisher(spec, params, hessian_samples, estimator.damping)?;
            if pre.diag.iter().any(|d| *d <= 0.0) {
                return Err(Error::NotPositiveDefinite {
                    pivot: pre.diag.iter().position(|d| *d <= 0.0).unwrap_or(0),
                });
            }
            Ok(Solver::Diag(pre.diag))
        }
        HessianBackend::Lissa => {
            let scale = match estimator.lissa.scale {
                Some(s) => s,
                None => lissa_auto_scale(spec, params, hessian_samples, estimator.damping)?,
            };
            Ok(Solver::Lissa {
                depth: estimator.lissa.depth,
                repeats: estimator.lissa.repeats,
                scale,
                damping: estimator.damping,
                samples: hessian_samples.to_vec(),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// One-shot operations
// ---------------------------------------------------------------------------

/// Standard influence of `z_tr` on the mean validation loss, through the
/// explicit damped training Hessian. Computed in the mean-gradient form:
/// one solve against the mean validation gradient, then a dot product.
pub fn exact_if_set(
    spec: &ModelSpec,
    z_tr: &Sample,
    train_set: &Dataset,
    val_set: &Dataset,
    checkpoint: &Checkpoint,
    damping: f64,
) -> Result<f64> {
    let est = EstimatorConfig::new(Variant::ExactIf).with_damping(damping);
    let ctx = ScoreContext::build_at(
        spec,
        &est,
        train_set,
        val_set,
        std::slice::from_ref(checkpoint),
    )?;
    ctx.set_score(z_tr)
}

/// TracIn: learning-rate-weighted dot products of the training-sample
/// gradient with the mean validation gradient, summed across checkpoints.
pub fn tracin_score(
    spec: &ModelSpec,
    z_tr: &Sample,
    val_set: &Dataset,
    checkpoints: &[Checkpoint],
    learning_rates: &[f64],
) -> Result<f64> {
    if checkpoints.is_empty() {
        return Err(Error::EmptySet("tracin checkpoints"));
    }
    if checkpoints.len() != learning_rates.len() {
        return Err(Error::DimensionMismatch {
            what: "tracin learning rates",
            expected: checkpoints.len(),
            got: learning_rates.len(),
        });
    }
    let mut total = 0.0;
    for (c, lr) in checkpoints.iter().zip(learning_rates) {
        let g_val = batch_grad(spec, &c.params, &val_set.samples)?;
        let g_tr = grad(spec, &c.params, z_tr)?;
        total += lr * dot(&g_val.values, &g_tr.values)?;
    }
    Ok(total)
}

/// Set-level VM/FVM score of one training sample: the damped quadratic form
/// of its gradient at the tuned checkpoint. The checkpoint must be tagged
/// `"vm"` or `"fvm"`.
pub fn vmfvm_set_score(
    spec: &ModelSpec,
    z_tr: &Sample,
    val_set: &Dataset,
    tuned: &Checkpoint,
    backend: HessianBackend,
    damping: f64,
    probes: usize,
    lissa: &LissaConfig,
) -> Result<f64> {
    let variant = checked_tuned_variant(tuned)?;
    let mut est = EstimatorConfig::new(variant)
        .with_damping(damping)
        .with_backend(backend);
    est.probes = probes;
    est.lissa = *lissa;
    // The Hessian/Fisher lives on the validation set; the training set is
    // only consulted for the default epsilon, which set scores do not use.
    let train_stub = Dataset {
        samples: vec![z_tr.clone()],
        num_classes: spec.num_classes,
        dim: spec.input_dim,
    };
    let ctx = ScoreContext::build_at(
        spec,
        &est,
        &train_stub,
        val_set,
        std::slice::from_ref(tuned),
    )?;
    ctx.set_score(z_tr)
}

/// Per-validation-sample VM/FVM score: bilinear first-order term plus the
/// `epsilon/2`-weighted curvature term along the estimated parameter change.
pub fn vmfvm_sample_score(
    spec: &ModelSpec,
    z_tr: &Sample,
    z_val: &Sample,
    val_set: &Dataset,
    tuned: &Checkpoint,
    epsilon: f64,
    damping: f64,
    backend: HessianBackend,
    lissa: &LissaConfig,
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidConfig("epsilon must be > 0".into()));
    }
    let variant = checked_tuned_variant(tuned)?;
    let mut est = EstimatorConfig::new(variant)
        .with_damping(damping)
        .with_backend(backend);
    est.epsilon = Some(epsilon);
    est.lissa = *lissa;
    let train_stub = Dataset {
        samples: vec![z_tr.clone()],
        num_classes: spec.num_classes,
        dim: spec.input_dim,
    };
    let ctx = ScoreContext::build_at(
        spec,
        &est,
        &train_stub,
        val_set,
        std::slice::from_ref(tuned),
    )?;
    let tv = ctx.train_vector(z_tr)?;
    let vv = ctx.val_vector(z_val)?;
    ctx.pair_score(&tv, &vv)
}

fn checked_tuned_variant(tuned: &Checkpoint) -> Result<Variant> {
    match tuned.tag.as_str() {
        "vm" => Ok(Variant::Vm),
        "fvm" => Ok(Variant::Fvm),
        other => Err(Error::Usage(format!(
            "vm/fvm scoring needs a checkpoint tagged \"vm\" or \"fvm\", got {other:?}"
        ))),
    }
}

/// Score every training sample. Deterministic for a fixed config regardless
/// of the rayon worker count: the context is read-only and the indexed
/// collect preserves order.
pub fn score_dataset(
    spec: &ModelSpec,
    estimator: &EstimatorConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    checkpoints: &[Checkpoint],
) -> Result<InfluenceReport> {
    let start = std::time::Instant::now();
    let ctx = ScoreContext::build(spec, estimator, train_set, val_set, checkpoints)?;
    let mut scores = score_with_context(&ctx, train_set)?;
    scores.sort_by_key(|(id, _)| *id);
    Ok(InfluenceReport {
        estimator: estimator.clone(),
        checkpoint_tag: ctx.checkpoint_tag().to_string(),
        direction: estimator.variant.direction(),
        scores,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Parallel per-sample scoring against a prebuilt context.
pub fn score_with_context(ctx: &ScoreContext, train_set: &Dataset) -> Result<Vec<(usize, f64)>> {
    train_set
        .samples
        .par_iter()
        .map(|z| ctx.set_score(z).map(|s| (z.id, s)))
        .collect()
}
