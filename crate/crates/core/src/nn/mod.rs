//! A small CPU convolutional engine with hand-written backward passes.
//!
//! Tensors are `[batch, channel, height, width]` in f32. Every layer has an
//! inference path taking `&self` (safe to share across threads) and a
//! training path that caches what its backward pass needs.

mod act;
mod adam;
mod block;
mod conv;
mod norm;
mod resize;

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use act::{Relu, Sigmoid};
pub use adam::{Adam, AdamState};
pub use block::{BasicBlock, Bottleneck, ConvBnRelu};
pub use conv::Conv2d;
pub use norm::BatchNorm2d;
pub use resize::{resize_bilinear, resize_bilinear_backward};

pub type Tensor = Array4<f32>;

/// A named parameter or buffer with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    /// Buffers (batch-norm running statistics) are saved but not optimized.
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: ArrayD<f32>) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Parameter traversal in a fixed order; checkpoints and the optimizer rely
/// on that order being stable.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

/// Weight initialization strategy for convolution kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Random,
    /// Glorot uniform in `±sqrt(6/(fan_in+fan_out))`.
    Xavier,
    /// Kaiming normal with std `sqrt(2/fan_in)`.
    He,
}

impl Init {
    pub fn sample<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> ArrayD<f32> {
        let receptive: usize = shape[2..].iter().product();
        let fan_in = (shape[1] * receptive) as f64;
        let fan_out = (shape[0] * receptive) as f64;
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match self {
            Init::Random => {
                let b = 1.0 / fan_in.sqrt();
                (0..n).map(|_| rng.random_range(-b..b) as f32).collect()
            }
            Init::Xavier => {
                let b = (6.0 / (fan_in + fan_out)).sqrt();
                (0..n).map(|_| rng.random_range(-b..b) as f32).collect()
            }
            Init::He => {
                let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                (0..n).map(|_| dist.sample(rng) as f32).collect()
            }
        };
        ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
    }
}

/// Elementwise sum of two same-shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    a + b
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Finite-difference checks for layer backward passes.

    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn random_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_shape_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    }

    /// Scalar objective `sum(y * probe)` for a fixed random probe.
    pub fn objective(y: &Tensor, probe: &Tensor) -> f64 {
        y.iter().zip(probe).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    }

    /// Compares analytic input and parameter gradients of a layer against
    /// central differences. `fwd` must run the training path.
    pub fn check<M: Module>(
        layer: &mut M,
        x: &Tensor,
        fwd: impl Fn(&mut M, &Tensor) -> Tensor,
        bwd: impl Fn(&mut M, &Tensor) -> Tensor,
        tol: f64,
    ) {
        let y = fwd(layer, x);
        let probe = random_tensor(y.dim(), 99);
        layer.zero_grad();
        let dx = bwd(layer, &probe);
        let eps = 3e-3f32;

        let mut xs = x.clone();
        for idx in (0..x.len()).step_by((x.len() / 23).max(1)) {
            let orig = xs.as_slice().unwrap()[idx];
            xs.as_slice_mut().unwrap()[idx] = orig + eps;
            let up = objective(&fwd(layer, &xs), &probe);
            xs.as_slice_mut().unwrap()[idx] = orig - eps;
            let down = objective(&fwd(layer, &xs), &probe);
            xs.as_slice_mut().unwrap()[idx] = orig;
            let num = (up - down) / (2.0 * eps as f64);
            let ana = dx.as_slice().unwrap()[idx] as f64;
            assert!(
                (num - ana).abs() <= tol * (1.0 + num.abs().max(ana.abs())),
                "input grad {idx}: numeric {num} analytic {ana}"
            );
        }

        let mut grads = Vec::new();
        layer.visit(&mut |p| {
            if p.trainable {
                grads.push(p.grad.clone())
            }
        });
        let mut k = 0;
        let mut names = Vec::new();
        layer.visit(&mut |p| {
            if p.trainable {
                names.push((k, p.len()));
                k += 1;
            }
        });
        for (pi, len) in names {
            for idx in (0..len).step_by((len / 7).max(1)) {
                let perturb = |layer: &mut M, delta: f32| {
                    let mut j = 0;
                    layer.visit_mut(&mut |p| {
                        if p.trainable {
                            if j == pi {
                                p.value.as_slice_mut().unwrap()[idx] += delta;
                            }
                            j += 1;
                        }
                    });
                };
                perturb(layer, eps);
                let up = objective(&fwd(layer, x), &probe);
                perturb(layer, -2.0 * eps);
                let down = objective(&fwd(layer, x), &probe);
                perturb(layer, eps);
                let num = (up - down) / (2.0 * eps as f64);
                let ana = grads[pi].as_slice().unwrap()[idx] as f64;
                assert!(
                    (num - ana).abs() <= tol * (1.0 + num.abs().max(ana.abs())),
                    "param {pi}[{idx}]: numeric {num} analytic {ana}"
                );
            }
        }
    }
}
