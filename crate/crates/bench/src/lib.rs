//! Shared fixtures for the kernel benchmarks.

use iflab_core::data::{gen_gaussian_mixture, Dataset};
use iflab_core::model::{init_params, Activation, ModelSpec, ParamVector};
use iflab_core::numerics::RngState;

pub struct Fixture {
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub train: Dataset,
    pub val: Dataset,
}

/// A mid-sized MLP task: K=4, dim=20, one hidden layer of 32 (804
/// parameters), the shape the detection experiments run at.
pub fn mlp_fixture(train_per_class: usize, val_per_class: usize) -> Fixture {
    let spec = ModelSpec::mlp(20, vec![32], 4, Activation::Tanh, 5e-4);
    let mut rng = RngState::new(77);
    let params = init_params(&spec, &mut rng).expect("init");
    let train = gen_gaussian_mixture(4, train_per_class, 20, 3.0, &mut rng).expect("train data");
    let val = gen_gaussian_mixture(4, val_per_class, 20, 3.0, &mut rng).expect("val data");
    Fixture {
        spec,
        params,
        train,
        val,
    }
}

/// A small logistic task for the dense-solver benchmarks.
pub fn logistic_fixture(per_class: usize, dim: usize) -> Fixture {
    let spec = ModelSpec::logistic(dim, 2, 1e-2);
    let mut rng = RngState::new(78);
    let params = init_params(&spec, &mut rng).expect("init");
    let train = gen_gaussian_mixture(2, per_class, dim, 3.0, &mut rng).expect("train data");
    let val = gen_gaussian_mixture(2, per_class, dim, 3.0, &mut rng).expect("val data");
    Fixture {
        spec,
        params,
        train,
        val,
    }
}
