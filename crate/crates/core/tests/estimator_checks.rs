//! Cross-route consistency checks for the estimators: explicit solves vs
//! LiSSA vs the diagonal preconditioner vs the randomized probe identity,
//! plus the aggregation identity tying per-sample scores to the set-level
//! quadratic form.

mod common;

use common::*;
use iflab_core::data::{gen_gaussian_mixture, inject_label_noise, Dataset, NoiseSpec, Sample};
use iflab_core::eval::{relabel_sample, spearman};
use iflab_core::influence::{
    vmfvm_sample_score, vmfvm_set_score, EstimatorConfig, HessianBackend, LissaConfig,
    ScoreContext, Variant,
};
use iflab_core::model::{batch_grad, explicit_hessian, grad, Checkpoint, ModelSpec};
use iflab_core::numerics::{dot, norm2, CholeskyFactor, RngState};
use iflab_core::optim::{tune_on_validation, Schedule, SgdConfig, TuneConfig};

/// Convex toy with a tightly tuned validation minimum, shared by the
/// consistency checks below.
fn tuned_toy(seed: u64, per_class: usize) -> (ModelSpec, Dataset, Dataset, Checkpoint) {
    let spec = ModelSpec::logistic(6, 2, 0.05);
    let mut rng = RngState::new(seed);
    // One mixture split in half, so train and val share the class means.
    let mixture = gen_gaussian_mixture(2, per_class * 2, 6, 2.0, &mut rng).unwrap();
    let parts = iflab_core::data::split(&mixture, &[0.5, 0.5], &mut rng).unwrap();
    let train = inject_label_noise(&parts[0], &NoiseSpec::symmetric(0.2), &mut rng)
        .unwrap()
        .dataset;
    let val = parts[1].clone();
    let start = Checkpoint {
        params: iflab_core::model::init_params(&spec, &mut rng).unwrap(),
        step: 0,
        learning_rate_at_step: 0.0,
        tag: "theta_star".into(),
    };
    let tune = TuneConfig {
        flat: false,
        sgd: SgdConfig {
            learning_rate: 0.2,
            momentum: 0.9,
            steps: 6000,
            batch_size: usize::MAX / 2,
            schedule: Schedule::Constant,
            checkpoint_every: 0,
        },
        sam_gamma: 0.05,
    };
    let tuned = tune_on_validation(&spec, &start, &val, &tune, &mut RngState::new(seed)).unwrap();
    (spec, train, val, tuned)
}

#[test]
fn vmfvm_backends_agree_explicit_vs_lissa() {
    let (spec, train, val, tuned) = tuned_toy(5, 40);
    let damping = 0.05;
    let lissa = LissaConfig {
        depth: 500,
        repeats: 1,
        scale: None,
    };
    for z in train.samples.iter().take(25) {
        let exact = vmfvm_set_score(
            &spec,
            z,
            &val,
            &tuned,
            HessianBackend::Explicit,
            damping,
            0,
            &lissa,
        )
        .unwrap();
        let approx = vmfvm_set_score(
            &spec,
            z,
            &val,
            &tuned,
            HessianBackend::Lissa,
            damping,
            0,
            &lissa,
        )
        .unwrap();
        let rel = (exact - approx).abs() / exact.abs().max(1e-12);
        assert!(rel <= 1e-2, "sample {}: exact {exact:.6e} lissa {approx:.6e}", z.id);
    }
}

#[test]
fn vmfvm_explicit_vs_diag_rank_agreement() {
    // Spearman over 200 training points between the explicit and diagonal
    // Fisher backends.
    let (spec, train, val, tuned) = tuned_toy(9, 100);
    assert_eq!(train.len(), 200);
    let lissa = LissaConfig::default();
    let mut explicit = Vec::new();
    let mut diag = Vec::new();
    for z in &train.samples {
        explicit.push(
            vmfvm_set_score(&spec, z, &val, &tuned, HessianBackend::Explicit, 1e-8, 0, &lissa)
                .unwrap(),
        );
        diag.push(
            vmfvm_set_score(&spec, z, &val, &tuned, HessianBackend::DiagFisher, 1e-8, 0, &lissa)
                .unwrap(),
        );
    }
    let rho = spearman(&explicit, &diag).unwrap();
    assert!(rho >= 0.9, "cross-backend spearman {rho}");
}

#[test]
fn probe_estimator_unbiased_against_explicit_form() {
    // Fixed 20-parameter case: p = 2*9 + 2.
    let (spec, train, val, tuned) = tuned_toy(13, 30);
    let damping = 0.05;
    let h = explicit_hessian(&spec, &tuned.params, &val.samples, damping).unwrap();
    let factor = CholeskyFactor::new(&h).unwrap();
    let g = grad(&spec, &tuned.params, &train.samples[0]).unwrap();
    let exact = dot(&g.values, &factor.solve(&g.values).unwrap()).unwrap();

    // Monte-Carlo over the probe identity with the exact inverse.
    let mut rng = RngState::new(99);
    let probes = 10_000;
    let mut draws = Vec::with_capacity(probes);
    for _ in 0..probes {
        let v = rng.gaussian_vec(g.values.len()).unwrap();
        let w = factor.solve(&v).unwrap();
        draws.push(dot(&g.values, &w).unwrap() * dot(&v, &g.values).unwrap());
    }
    let mean_draw = mean(&draws);
    let var = draws.iter().map(|d| (d - mean_draw) * (d - mean_draw)).sum::<f64>()
        / (probes as f64 - 1.0);
    let se = (var / probes as f64).sqrt();
    assert!(
        (mean_draw - exact).abs() <= 2.0 * se,
        "probe mean {mean_draw:.6e} vs exact {exact:.6e}, se {se:.2e}"
    );

    // The production path (lissa backend + probes) should land within a few
    // standard errors of the explicit quadratic form too.
    let est_probe = vmfvm_set_score(
        &spec,
        &train.samples[0],
        &val,
        &tuned,
        HessianBackend::Lissa,
        damping,
        2000,
        &LissaConfig {
            depth: 400,
            repeats: 1,
            scale: None,
        },
    )
    .unwrap();
    let se_2000 = (var / 2000.0).sqrt();
    assert!(
        (est_probe - exact).abs() <= 4.0 * se_2000,
        "probe-path score {est_probe:.6e} vs exact {exact:.6e} (se {se_2000:.2e})"
    );
}

#[test]
fn sample_scores_aggregate_to_set_score() {
    // Averaging the per-validation-sample scores over the validation set:
    // the bilinear terms average to <mean val grad, u>, which vanishes at
    // the tuned optimum, and the curvature terms average to exactly
    // (epsilon/2) * g^T H^{-1} g when the damping is zero.
    let (spec, train, val, tuned) = tuned_toy(21, 40);
    let epsilon = 0.0125;
    // Gauge-fixing damping only; the softmax bias-shift mode makes the
    // undamped validation Hessian singular.
    let damping = 1e-9;
    let z_tr = &train.samples[3];
    let lissa = LissaConfig::default();

    let mut acc = 0.0;
    for z_val in &val.samples {
        acc += vmfvm_sample_score(
            &spec,
            z_tr,
            z_val,
            &val,
            &tuned,
            epsilon,
            damping,
            HessianBackend::Explicit,
            &lissa,
        )
        .unwrap();
    }
    let mean_sample_score = acc / val.len() as f64;

    let set = vmfvm_set_score(
        &spec,
        z_tr,
        &val,
        &tuned,
        HessianBackend::Explicit,
        damping,
        0,
        &lissa,
    )
    .unwrap();

    let h = explicit_hessian(&spec, &tuned.params, &val.samples, damping).unwrap();
    let factor = CholeskyFactor::new(&h).unwrap();
    let g_tr = grad(&spec, &tuned.params, z_tr).unwrap();
    let u = factor.solve(&g_tr.values).unwrap();
    let g_val = batch_grad(&spec, &tuned.params, &val.samples).unwrap();
    let first_order = dot(&g_val.values, &u).unwrap();
    // Mean of the per-sample curvature terms equals the curvature of the
    // mean Hessian by linearity.
    let hu = iflab_core::model::hvp(
        &spec,
        &tuned.params,
        &val.samples,
        &iflab_core::model::ParamVector::from_values(u.clone()),
    )
    .unwrap();
    let second_order = 0.5 * epsilon * dot(&u, &hu.values).unwrap();

    let expected = first_order + second_order;
    assert!(
        (mean_sample_score - expected).abs() <= 1e-9 * expected.abs().max(1e-12),
        "mean {mean_sample_score:.9e} vs first {first_order:.2e} + second {second_order:.9e}"
    );
    // Up to the vanishing damping, the curvature average reproduces the
    // set-level quadratic form.
    assert!(
        (second_order - 0.5 * epsilon * set).abs() <= 1e-6 * (0.5 * epsilon * set).abs(),
        "second-order {second_order:.9e} vs 0.5*eps*set {:.9e}",
        0.5 * epsilon * set
    );
    // The tuned optimum kills the bilinear average.
    assert!(
        first_order.abs() <= 1e-6 * second_order.abs().max(1e-12),
        "first-order {first_order:.2e} not vanishing vs {second_order:.2e}"
    );
}

#[test]
fn relabel_beats_trusting_noisy_labels_on_convex_toy() {
    // 30% symmetric noise; relabeling noisy samples with the vm estimator
    // must beat the (1 - rate) baseline of trusting given labels.
    let spec = ModelSpec::logistic(4, 2, 0.05);
    let mut accs = Vec::new();
    for seed in 0..5u64 {
        let mut rng = RngState::new(seed).split(7);
        let mixture = gen_gaussian_mixture(2, 120, 4, 3.0, &mut rng).unwrap();
        let parts = iflab_core::data::split(&mixture, &[0.5, 0.5], &mut rng).unwrap();
        let train = inject_label_noise(&parts[0], &NoiseSpec::symmetric(0.3), &mut rng)
            .unwrap()
            .dataset;
        let val = parts[1].clone();
        let start = Checkpoint {
            params: iflab_core::model::init_params(&spec, &mut rng).unwrap(),
            step: 0,
            learning_rate_at_step: 0.0,
            tag: "theta_star".into(),
        };
        let tune = TuneConfig {
            flat: false,
            sgd: SgdConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                steps: 4000,
                batch_size: usize::MAX / 2,
                schedule: Schedule::Constant,
                checkpoint_every: 0,
            },
            sam_gamma: 0.05,
        };
        let tuned = tune_on_validation(&spec, &start, &val, &tune, &mut rng).unwrap();
        let est = EstimatorConfig::new(Variant::Vm).with_damping(1e-8);
        let ctx = ScoreContext::build_at(
            &spec,
            &est,
            &train,
            &val,
            std::slice::from_ref(&tuned),
        )
        .unwrap();
        let noisy: Vec<&Sample> = train
            .samples
            .iter()
            .filter(|s| s.noisy == Some(true))
            .collect();
        let hits = noisy
            .iter()
            .filter(|s| relabel_sample(&ctx, &s.x, 2).unwrap().label == s.true_y.unwrap())
            .count();
        accs.push(hits as f64 / noisy.len() as f64);
    }
    let mean_acc = mean(&accs);
    assert!(
        mean_acc > 0.7,
        "relabel accuracy on noisy samples {mean_acc:.3} not above the trust-labels baseline 0.70"
    );
}

#[test]
fn mixture_is_linearly_separable_at_wide_separation() {
    // K=2, sep=6, dim=2: a logistic model fits the training set to >= 99%.
    let spec = ModelSpec::logistic(2, 2, 1e-4);
    let mut rng = RngState::new(31);
    let data = gen_gaussian_mixture(2, 100, 2, 6.0, &mut rng).unwrap();
    let config = SgdConfig {
        learning_rate: 0.5,
        momentum: 0.9,
        steps: 2000,
        batch_size: usize::MAX / 2,
        schedule: Schedule::Constant,
        checkpoint_every: 0,
    };
    let ckpts = iflab_core::optim::train(&spec, &data, &config, &mut rng).unwrap();
    let acc =
        iflab_core::eval::accuracy(&spec, &ckpts.last().unwrap().params, &data.samples).unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn gradient_descent_below_lipschitz_rate_is_monotone() {
    // lr under 1/L with L from the eigensolver oracle: full-batch descent
    // must never increase the risk.
    let spec = ModelSpec::logistic(3, 2, 0.05);
    let mut rng = RngState::new(17);
    let data = gen_gaussian_mixture(2, 30, 3, 2.0, &mut rng).unwrap();
    let params = iflab_core::model::init_params(&spec, &mut rng).unwrap();
    let h = explicit_hessian(&spec, &params, &data.samples, 0.0).unwrap();
    let eigs = symmetric_eigenvalues(&h);
    let lipschitz = *eigs.last().unwrap();
    let lr = 0.9 / lipschitz;

    let mut theta = params;
    let mut state = iflab_core::optim::MomentumState::new(0.0, theta.len());
    let mut last = iflab_core::model::batch_risk(&spec, &theta, &data.samples).unwrap();
    for _ in 0..100 {
        theta = iflab_core::optim::sgd_step(&spec, &theta, &data.samples, lr, &mut state).unwrap();
        let risk = iflab_core::model::batch_risk(&spec, &theta, &data.samples).unwrap();
        assert!(risk <= last + 1e-12, "risk rose from {last} to {risk}");
        last = risk;
    }
}

#[test]
fn damped_hessian_smallest_eigenvalue_respects_damping() {
    // Eigensolver oracle on the damped convex logistic Hessian. The
    // undamped spectrum is PSD with exactly one zero mode: shifting every
    // bias together never changes the softmax.
    let spec = ModelSpec::logistic(3, 3, 0.05);
    let mut rng = RngState::new(23);
    let data = gen_gaussian_mixture(3, 20, 3, 2.0, &mut rng).unwrap();
    let params = iflab_core::model::init_params(&spec, &mut rng).unwrap();

    let damping = 0.3;
    let damped = explicit_hessian(&spec, &params, &data.samples, damping).unwrap();
    let eigs = symmetric_eigenvalues(&damped);
    assert!(
        eigs[0] >= damping - 1e-8,
        "smallest damped eigenvalue {} < {damping}",
        eigs[0]
    );

    let free = explicit_hessian(&spec, &params, &data.samples, 0.0).unwrap();
    let eigs = symmetric_eigenvalues(&free);
    assert!(eigs[0] >= -1e-10, "undamped Hessian not PSD: {}", eigs[0]);
    // Exactly the gauge mode sits at zero; the rest of the spectrum is
    // strictly positive.
    assert!(eigs[0].abs() <= 1e-10);
    assert!(eigs[1] > 1e-6, "second eigenvalue {} not positive", eigs[1]);

    // The gauge direction itself: all biases moved together.
    let layout = spec.layout();
    let mut gauge = vec![0.0; spec.param_count()];
    for layer in &layout.layers {
        for i in 0..layer.out_dim {
            gauge[layer.b_start + i] = 1.0;
        }
    }
    let hv = iflab_core::model::hvp(
        &spec,
        &params,
        &data.samples,
        &iflab_core::model::ParamVector::from_values(gauge),
    )
    .unwrap();
    assert!(norm2(&hv.values) <= 1e-10, "gauge direction not null: {}", norm2(&hv.values));
}
