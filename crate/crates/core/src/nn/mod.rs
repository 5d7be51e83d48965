//! Minimal CPU neural-network engine used by the patch classifiers and the
//! landmark heatmap regressor.
//!
//! Tensors are `(N, C, H, W)` `f32` arrays. Every layer caches what it needs
//! during a training-mode `forward` and accumulates parameter gradients in
//! `backward`. `infer` is the cache-free, read-only inference path, so a
//! trained model can be shared across threads.

mod conv;
mod layers;
mod loss;
mod optim;
mod state;

pub use conv::Conv2d;
pub use layers::{
    BatchNorm2d, GlobalAvgPool, Linear, MaxPool2d, Relu, Residual, Sequential, Upsample2,
};
pub use loss::{mse_loss, softmax, softmax_cross_entropy};
pub use optim::{Adam, Optimizer, Sgd};
pub use state::{StateDict, TensorData};

use ndarray::{Array4, ArrayD};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Tensor = Array4<f32>;

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything holding named parameters and buffers.
pub trait Module: Send + Sync {
    fn visit_params_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param)) {}

    /// Read-only visit of parameters and buffers (running statistics).
    fn visit_state(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &ArrayD<f32>)) {}

    /// Mutable visit of parameter values and buffers, used when loading.
    fn visit_state_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut ArrayD<f32>)) {}

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_state("", &mut |name, t| {
            if !name.ends_with("running_mean") && !name.ends_with("running_var") {
                n += t.len();
            }
        });
        n
    }
}

pub trait Layer: Module {
    /// Forward pass that caches activations for `backward`.
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor;

    /// Inference-mode forward without caching.
    fn infer(&self, x: &Tensor) -> Tensor;

    /// Propagates `grad` (d loss / d output) and returns d loss / d input.
    fn backward(&mut self, grad: &Tensor) -> Tensor;
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn kaiming_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<f32> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        (z * std) as f32
    })
}

pub(crate) fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> ArrayD<f32> {
    ArrayD::from_shape_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound) as f32)
}
