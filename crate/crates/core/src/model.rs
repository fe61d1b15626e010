//! Differentiable classifiers: multinomial logistic regression and small
//! MLPs, exposing per-sample loss, exact analytic gradient, exact
//! Hessian-vector product, and (for small parameter counts) the explicit
//! Hessian.
//!
//! A logistic model is handled as a feedforward net with zero hidden layers,
//! so there is a single forward/backward/Pearlmutter code path. The loss is
//! softmax cross-entropy plus `(weight_decay / 2) * ||weights||^2`; the L2
//! term covers weight matrices only, never biases, and every per-sample loss
//! carries the full L2 term so that batch means count it exactly once.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numerics::{all_finite, Matrix, RngState};
use serde::{Deserialize, Serialize};

/// Parameter-count ceiling for [`explicit_hessian`]; above this the O(p^2)
/// matrix no longer fits the desk-scale memory budget.
pub const DEFAULT_HESSIAN_CAP: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize, weight_decay: f64) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            input_dim,
            num_classes,
            hidden_sizes: vec![],
            activation: Activation::Tanh,
            weight_decay,
        }
    }

    pub fn mlp(
        input_dim: usize,
        hidden_sizes: Vec<usize>,
        num_classes: usize,
        activation: Activation,
        weight_decay: f64,
    ) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            num_classes,
            hidden_sizes,
            activation,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be >= 1".into()));
        }
        match self.kind {
            ModelKind::Logistic if !self.hidden_sizes.is_empty() => Err(Error::InvalidConfig(
                "logistic model must not declare hidden layers".into(),
            )),
            ModelKind::Mlp if self.hidden_sizes.is_empty() => Err(Error::InvalidConfig(
                "mlp model needs at least one hidden layer".into(),
            )),
            _ if self.weight_decay < 0.0 => {
                Err(Error::InvalidConfig("weight_decay must be >= 0".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::of(self)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Stable 64-bit hash of the spec, stored in checkpoint files so a
    /// checkpoint cannot be loaded against the wrong architecture.
    pub fn content_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("spec serializes");
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Flat parameter vector; the slice-to-layer mapping lives in [`Layout`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector { values: vec![0.0; n] }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        ParamVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// One trained (or tuned) parameter state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub step: usize,
    pub learning_rate_at_step: f64,
    pub tag: String,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerSlice {
    pub w_start: usize,
    pub b_start: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSlice {
    fn w<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w_start..self.w_start + self.in_dim * self.out_dim]
    }

    fn b<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b_start..self.b_start + self.out_dim]
    }
}

/// Bijective mapping from flat parameter indices to per-layer weight and
/// bias slices; weights are row-major `(out_dim x in_dim)`.
#[derive(Clone, Debug)]
pub struct Layout {
    pub layers: Vec<LayerSlice>,
    pub total: usize,
}

impl Layout {
    pub fn of(spec: &ModelSpec) -> Layout {
        let mut dims = vec![spec.input_dim];
        dims.extend_from_slice(&spec.hidden_sizes);
        dims.push(spec.num_classes);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut offset = 0;
        for w in dims.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            layers.push(LayerSlice {
                w_start: offset,
                b_start: offset + in_dim * out_dim,
                in_dim,
                out_dim,
            });
            offset += in_dim * out_dim + out_dim;
        }
        Layout { layers, total: offset }
    }
}

fn check_sample(spec: &ModelSpec, sample: &Sample) -> Result<()> {
    if sample.x.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            what: "sample features",
            expected: spec.input_dim,
            got: sample.x.len(),
        });
    }
    if sample.y >= spec.num_classes {
        return Err(Error::LabelOutOfRange {
            label: sample.y,
            num_classes: spec.num_classes,
        });
    }
    Ok(())
}

fn check_params(spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    let expected = spec.param_count();
    if params.len() != expected {
        return Err(Error::DimensionMismatch {
            what: "parameter vector",
            expected,
            got: params.len(),
        });
    }
    Ok(())
}

/// Weights `N(0, 1/fan_in)`, biases zero; draw order is fixed by the layout.
pub fn init_params(spec: &ModelSpec, rng: &mut RngState) -> Result<ParamVector> {
    spec.validate()?;
    let layout = spec.layout();
    let mut values = vec![0.0; layout.total];
    for layer in &layout.layers {
        let scale = 1.0 / (layer.in_dim as f64).sqrt();
        for i in 0..layer.in_dim * layer.out_dim {
            values[layer.w_start + i] = rng.next_gaussian() * scale;
        }
    }
    Ok(ParamVector { values })
}

#[inline]
fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Tanh => z.tanh(),
        Activation::Relu => z.max(0.0),
    }
}

/// First derivative expressed through the activation value.
#[inline]
fn act_d1(kind: Activation, a: f64) -> f64 {
    match kind {
        Activation::Tanh => 1.0 - a * a,
        Activation::Relu => {
            if a > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Second derivative expressed through the activation value. Relu reports 0,
/// i.e. the generalized Hessian.
#[inline]
fn act_d2(kind: Activation, a: f64) -> f64 {
    match kind {
        Activation::Tanh => -2.0 * a * (1.0 - a * a),
        Activation::Relu => 0.0,
    }
}

/// Log-sum-exp-stable softmax cross-entropy. Returns `(loss, probabilities)`.
fn softmax_ce(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    let p: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    (lse - logits[y], p)
}

struct ForwardPass {
    /// `acts[0]` is the input, `acts[l]` the activation after hidden layer l.
    acts: Vec<Vec<f64>>,
    probs: Vec<f64>,
    ce: f64,
}

fn forward(spec: &ModelSpec, layout: &Layout, params: &[f64], sample: &Sample) -> ForwardPass {
    let num_layers = layout.layers.len();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(num_layers);
    acts.push(sample.x.clone());
    let mut logits = Vec::new();
    for (l, layer) in layout.layers.iter().enumerate() {
        let w = layer.w(params);
        let b = layer.b(params);
        let input = &acts[l];
        let mut z = vec![0.0; layer.out_dim];
        for o in 0..layer.out_dim {
            let row = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
            z[o] = b[o] + row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>();
        }
        if l + 1 == num_layers {
            logits = z;
        } else {
            acts.push(z.iter().map(|&v| act(spec.activation, v)).collect());
        }
    }
    let (ce, probs) = softmax_ce(&logits, sample.y);
    ForwardPass { acts, probs, ce }
}

fn l2_half_norm(layout: &Layout, params: &[f64]) -> f64 {
    layout
        .layers
        .iter()
        .map(|layer| layer.w(params).iter().map(|w| w * w).sum::<f64>())
        .sum::<f64>()
        * 0.5
}

/// Cross-entropy of the softmax output plus the L2 penalty.
pub fn loss(spec: &ModelSpec, params: &ParamVector, sample: &Sample) -> Result<f64> {
    check_params(spec, params)?;
    check_sample(spec, sample)?;
    let layout = spec.layout();
    let fwd = forward(spec, &layout, &params.values, sample);
    let total = fwd.ce + spec.weight_decay * l2_half_norm(&layout, &params.values);
    if !total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(total)
}

/// Backprop into `grad`, scaled by `weight`, starting from a finished
/// forward pass. The L2 contribution is handled by the callers.
fn accumulate_ce_grad(
    spec: &ModelSpec,
    layout: &Layout,
    params: &[f64],
    fwd: &ForwardPass,
    y: usize,
    weight: f64,
    grad: &mut [f64],
) {
    let num_layers = layout.layers.len();
    let mut delta: Vec<f64> = fwd.probs.clone();
    delta[y] -= 1.0;
    for l in (0..num_layers).rev() {
        let layer = &layout.layers[l];
        let input = &fwd.acts[l];
        for o in 0..layer.out_dim {
            let g_row = &mut grad[layer.w_start + o * layer.in_dim..layer.w_start + (o + 1) * layer.in_dim];
            let d = weight * delta[o];
            for (gi, xi) in g_row.iter_mut().zip(input) {
                *gi += d * xi;
            }
            grad[layer.b_start + o] += d;
        }
        if l > 0 {
            let w = layer.w(params);
            let mut prev = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let row = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let d = delta[o];
                for (pi, wi) in prev.iter_mut().zip(row) {
                    *pi += d * wi;
                }
            }
            for (pi, ai) in prev.iter_mut().zip(&fwd.acts[l]) {
                *pi *= act_d1(spec.activation, *ai);
            }
            delta = prev;
        }
    }
}

fn add_l2_grad(spec: &ModelSpec, layout: &Layout, params: &[f64], grad: &mut [f64]) {
    if spec.weight_decay == 0.0 {
        return;
    }
    for layer in &layout.layers {
        for i in 0..layer.in_dim * layer.out_dim {
            grad[layer.w_start + i] += spec.weight_decay * params[layer.w_start + i];
        }
    }
}

/// Exact analytic gradient of [`loss`].
pub fn grad(spec: &ModelSpec, params: &ParamVector, sample: &Sample) -> Result<ParamVector> {
    check_params(spec, params)?;
    check_sample(spec, sample)?;
    let layout = spec.layout();
    let fwd = forward(spec, &layout, &params.values, sample);
    let mut g = vec![0.0; layout.total];
    accumulate_ce_grad(spec, &layout, &params.values, &fwd, sample.y, 1.0, &mut g);
    add_l2_grad(spec, &layout, &params.values, &mut g);
    if !all_finite(&g) {
        return Err(Error::NonFinite("grad"));
    }
    Ok(ParamVector { values: g })
}

/// Mean per-sample loss; the L2 term appears once since every per-sample
/// loss carries it and the mean preserves it.
pub fn batch_risk(spec: &ModelSpec, params: &ParamVector, samples: &[Sample]) -> Result<f64> {
    batch_risk_grad_impl(spec, params, samples, false).map(|(r, _)| r)
}

/// Mean per-sample gradient.
pub fn batch_grad(spec: &ModelSpec, params: &ParamVector, samples: &[Sample]) -> Result<ParamVector> {
    batch_risk_grad_impl(spec, params, samples, true).map(|(_, g)| g.expect("grad requested"))
}

/// Fused risk + gradient in one pass over the batch.
pub fn batch_risk_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[Sample],
) -> Result<(f64, ParamVector)> {
    batch_risk_grad_impl(spec, params, samples, true).map(|(r, g)| (r, g.expect("grad requested")))
}

fn batch_risk_grad_impl(
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[Sample],
    want_grad: bool,
) -> Result<(f64, Option<ParamVector>)> {
    check_params(spec, params)?;
    if samples.is_empty() {
        return Err(Error::EmptySet("batch over dataset"));
    }
    let layout = spec.layout();
    let inv_n = 1.0 / samples.len() as f64;
    let mut risk = 0.0;
    let mut g = if want_grad { vec![0.0; layout.total] } else { vec![] };
    for sample in samples {
        check_sample(spec, sample)?;
        let fwd = forward(spec, &layout, &params.values, sample);
        risk += fwd.ce * inv_n;
        if want_grad {
            accumulate_ce_grad(spec, &layout, &params.values, &fwd, sample.y, inv_n, &mut g);
        }
    }
    risk += spec.weight_decay * l2_half_norm(&layout, &params.values);
    if !risk.is_finite() {
        return Err(Error::NonFinite("batch_risk"));
    }
    let grad_out = if want_grad {
        add_l2_grad(spec, &layout, &params.values, &mut g);
        if !all_finite(&g) {
            return Err(Error::NonFinite("batch_grad"));
        }
        Some(ParamVector { values: g })
    } else {
        None
    };
    Ok((risk, grad_out))
}

/// Exact Hessian-vector product of the mean loss over `samples`, via
/// forward-over-reverse differentiation (Pearlmutter's trick). Includes the
/// `weight_decay` contribution on weight coordinates.
pub fn hvp(
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[Sample],
    v: &ParamVector,
) -> Result<ParamVector> {
    check_params(spec, params)?;
    if v.len() != params.len() {
        return Err(Error::DimensionMismatch {
            what: "hvp direction",
            expected: params.len(),
            got: v.len(),
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptySet("hvp over dataset"));
    }
    let layout = spec.layout();
    let inv_n = 1.0 / samples.len() as f64;
    let mut out = vec![0.0; layout.total];
    for sample in samples {
        check_sample(spec, sample)?;
        hvp_sample(spec, &layout, &params.values, &v.values, sample, inv_n, &mut out);
    }
    if spec.weight_decay != 0.0 {
        for layer in &layout.layers {
            for i in 0..layer.in_dim * layer.out_dim {
                out[layer.w_start + i] += spec.weight_decay * v.values[layer.w_start + i];
            }
        }
    }
    if !all_finite(&out) {
        return Err(Error::NonFinite("hvp"));
    }
    Ok(ParamVector { values: out })
}

/// One sample's contribution to the CE Hessian-vector product, accumulated
/// into `out` with weight `weight`.
fn hvp_sample(
    spec: &ModelSpec,
    layout: &Layout,
    params: &[f64],
    v: &[f64],
    sample: &Sample,
    weight: f64,
    out: &mut [f64],
) {
    let fwd = forward(spec, layout, params, sample);
    let num_layers = layout.layers.len();

    // R-forward: directional derivatives of pre-activations and activations.
    let mut r_acts: Vec<Vec<f64>> = Vec::with_capacity(num_layers);
    r_acts.push(vec![0.0; sample.x.len()]);
    let mut r_zs: Vec<Vec<f64>> = Vec::with_capacity(num_layers);
    for (l, layer) in layout.layers.iter().enumerate() {
        let w = layer.w(params);
        let vw = layer.w(v);
        let vb = layer.b(v);
        let input = &fwd.acts[l];
        let r_input = &r_acts[l];
        let mut rz = vec![0.0; layer.out_dim];
        for o in 0..layer.out_dim {
            let row = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
            let vrow = &vw[o * layer.in_dim..(o + 1) * layer.in_dim];
            let mut s = vb[o];
            for i in 0..layer.in_dim {
                s += vrow[i] * input[i] + row[i] * r_input[i];
            }
            rz[o] = s;
        }
        if l + 1 < num_layers {
            let a = &fwd.acts[l + 1];
            r_acts.push(
                rz.iter()
                    .zip(a)
                    .map(|(r, ai)| act_d1(spec.activation, *ai) * r)
                    .collect(),
            );
        }
        r_zs.push(rz);
    }

    // R{softmax delta}: d(p - e_y)/dz applied to the logit perturbation.
    let p = &fwd.probs;
    let r_logits = &r_zs[num_layers - 1];
    let p_dot_r: f64 = p.iter().zip(r_logits).map(|(pi, ri)| pi * ri).sum();
    let mut r_delta: Vec<f64> = p
        .iter()
        .zip(r_logits)
        .map(|(pi, ri)| pi * (ri - p_dot_r))
        .collect();
    let mut delta: Vec<f64> = p.clone();
    delta[sample.y] -= 1.0;

    // R-backward, accumulating the R-gradient.
    for l in (0..num_layers).rev() {
        let layer = &layout.layers[l];
        let input = &fwd.acts[l];
        let r_input = &r_acts[l];
        for o in 0..layer.out_dim {
            let base = layer.w_start + o * layer.in_dim;
            let rd = weight * r_delta[o];
            let d = weight * delta[o];
            for i in 0..layer.in_dim {
                out[base + i] += rd * input[i] + d * r_input[i];
            }
            out[layer.b_start + o] += rd;
        }
        if l > 0 {
            let w = layer.w(params);
            let vw = layer.w(v);
            let mut u = vec![0.0; layer.in_dim];
            let mut ru = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let row = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let vrow = &vw[o * layer.in_dim..(o + 1) * layer.in_dim];
                let d = delta[o];
                let rd = r_delta[o];
                for i in 0..layer.in_dim {
                    u[i] += d * row[i];
                    ru[i] += d * vrow[i] + rd * row[i];
                }
            }
            let a_here = &fwd.acts[l];
            let rz_here = &r_zs[l - 1];
            let mut next_delta = vec![0.0; layer.in_dim];
            let mut next_r_delta = vec![0.0; layer.in_dim];
            for i in 0..layer.in_dim {
                let d1 = act_d1(spec.activation, a_here[i]);
                let d2 = act_d2(spec.activation, a_here[i]);
                next_delta[i] = u[i] * d1;
                next_r_delta[i] = ru[i] * d1 + u[i] * d2 * rz_here[i];
            }
            delta = next_delta;
            r_delta = next_r_delta;
        }
    }
}

/// Assemble `H + damping * I` column by column through [`hvp`] on basis
/// vectors, then symmetrize. Errors when the parameter count exceeds `cap`.
pub fn explicit_hessian_with_cap(
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[Sample],
    damping: f64,
    cap: usize,
) -> Result<Matrix> {
    let p = spec.param_count();
    if p > cap {
        return Err(Error::HessianCapExceeded { params: p, cap });
    }
    if damping < 0.0 {
        return Err(Error::InvalidConfig("damping must be >= 0".into()));
    }
    let mut h = Matrix::zeros(p, p);
    let mut e = ParamVector::zeros(p);
    for j in 0..p {
        e.values[j] = 1.0;
        let col = hvp(spec, params, samples, &e)?;
        for i in 0..p {
            h.entries[i * p + j] = col.values[i];
        }
        e.values[j] = 0.0;
    }
    h.symmetrize();
    h.add_diagonal(damping);
    Ok(h)
}

pub fn explicit_hessian(
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[Sample],
    damping: f64,
) -> Result<Matrix> {
    explicit_hessian_with_cap(spec, params, samples, damping, DEFAULT_HESSIAN_CAP)
}

/// Argmax class of the logits; ties resolve to the smallest index.
pub fn predict(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> Result<usize> {
    check_params(spec, params)?;
    if x.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            what: "predict features",
            expected: spec.input_dim,
            got: x.len(),
        });
    }
    let layout = spec.layout();
    let probe = Sample {
        id: 0,
        x: x.to_vec(),
        y: 0,
        true_y: None,
        noisy: None,
    };
    let fwd = forward(spec, &layout, &params.values, &probe);
    let mut best = 0;
    for (k, pk) in fwd.probs.iter().enumerate() {
        if *pk > fwd.probs[best] {
            best = k;
        }
    }
    Ok(best)
}
