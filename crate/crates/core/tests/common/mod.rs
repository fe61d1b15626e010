//! Shared fixtures and independent oracles for the integration suites.

// Each test target pulls in the subset it needs.
#![allow(dead_code)]

use iflab_core::data::{gen_gaussian_mixture, inject_label_noise, split, Dataset, NoiseSpec};
use iflab_core::eval::protocol::SharpnessConfig;
use iflab_core::eval::{DataSource, GeneratorConfig, RunConfig};
use iflab_core::model::{batch_grad, ModelSpec, ParamVector};
use iflab_core::numerics::{Matrix, RngState};
use iflab_core::optim::{Schedule, SgdConfig, TuneConfig};
use iflab_core::oracle::LooConfig;
use std::path::PathBuf;

/// The mid-scale noisy MLP detection task: K=4, dim=20, 1000 train samples
/// with 40% symmetric noise, 400 clean validation samples, one hidden layer
/// of 32. Tuning runs a short budget (100 steps) so the flat and plain
/// validation minima stay distinguishable.
pub fn detection_task() -> RunConfig {
    RunConfig {
        data: DataSource::Generator(GeneratorConfig {
            k: 4,
            dim: 20,
            class_sep: 3.0,
            train_n: 1000,
            val_n: 400,
            noise: Some(NoiseSpec::symmetric(0.40)),
        }),
        model: ModelSpec::mlp(20, vec![32], 4, iflab_core::model::Activation::Tanh, 5e-4),
        train: SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            steps: 1500,
            batch_size: 64,
            schedule: Schedule::Cosine,
            checkpoint_every: 0,
        },
        tune: TuneConfig {
            flat: false,
            sgd: SgdConfig {
                learning_rate: 0.01,
                momentum: 0.9,
                steps: 100,
                batch_size: 128,
                schedule: Schedule::Cosine,
                checkpoint_every: 0,
            },
            sam_gamma: 0.05,
        },
        estimators: vec![],
        seeds: vec![0],
        output_dir: PathBuf::from("/tmp/iflab-acceptance"),
        metrics: vec![],
        recall_s: None,
        recall_max_val: Some(20),
        sharpness: SharpnessConfig {
            gamma: 0.05,
            probes: 8,
        },
    }
}

/// Convex logistic task with symmetric label noise on the training half.
pub fn convex_task(
    seed: u64,
    n_per_class: usize,
    dim: usize,
    noise: f64,
) -> (ModelSpec, Dataset, Dataset) {
    let spec = ModelSpec::logistic(dim, 2, 0.05);
    let mut rng = RngState::new(seed).split(11);
    let mixture = gen_gaussian_mixture(2, n_per_class * 2, dim, 2.0, &mut rng).unwrap();
    let parts = split(&mixture, &[0.5, 0.5], &mut rng).unwrap();
    let train = inject_label_noise(&parts[0], &NoiseSpec::symmetric(noise), &mut rng)
        .unwrap()
        .dataset;
    (spec, train, parts[1].clone())
}

/// Deterministic full-batch gradient descent to a tight gradient-norm
/// criterion, the exact-LOO retraining recipe for convex problems.
pub fn convex_loo_config() -> LooConfig {
    LooConfig {
        train: SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            steps: 50_000,
            batch_size: usize::MAX / 2,
            schedule: Schedule::Constant,
            checkpoint_every: 0,
        },
        grad_tol: Some(1e-10),
        base_seed: 0,
    }
}

/// Central finite differences of the scalar loss.
pub fn fd_grad<F>(dim: usize, h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut g = vec![0.0; dim];
    let mut probe = vec![0.0; dim];
    for j in 0..dim {
        probe[j] = h;
        let plus = f(&probe);
        probe[j] = -h;
        let minus = f(&probe);
        probe[j] = 0.0;
        g[j] = (plus - minus) / (2.0 * h);
    }
    g
}

/// Central finite differences of the gradient along a direction; the
/// independent oracle for Hessian-vector products.
pub fn fd_hvp(
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[iflab_core::data::Sample],
    v: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut plus = params.clone();
    let mut minus = params.clone();
    for j in 0..v.len() {
        plus.values[j] += h * v[j];
        minus.values[j] -= h * v[j];
    }
    let gp = batch_grad(spec, &plus, samples).unwrap();
    let gm = batch_grad(spec, &minus, samples).unwrap();
    gp.values
        .iter()
        .zip(&gm.values)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect()
}

pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let denom = want.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let diff = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / denom
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &mut Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Jacobi eigenvalue iteration for small symmetric matrices; the
/// independent oracle for spectral claims.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows;
    let mut a = m.entries.clone();
    let idx = |i: usize, j: usize| i * n + j;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[idx(i, j)] * a[idx(i, j)];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[idx(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[idx(p, p)];
                let aqq = a[idx(q, q)];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[idx(k, p)];
                    let akq = a[idx(k, q)];
                    a[idx(k, p)] = c * akp - s * akq;
                    a[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[idx(p, k)];
                    let aqk = a[idx(q, k)];
                    a[idx(p, k)] = c * apk - s * aqk;
                    a[idx(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| a[idx(i, i)]).collect();
    eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eigs
}
