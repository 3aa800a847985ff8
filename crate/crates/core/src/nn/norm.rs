use ndarray::{ArrayD, IxDyn};

use super::{Module, Param, Tensor};

const EPS: f32 = 1e-5;
const MOMENTUM: f32 = 0.1;

/// Per-channel batch normalization over `(batch, height, width)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    channels: usize,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        let ones = || ArrayD::from_elem(IxDyn(&[channels]), 1.0f32);
        let zeros = || ArrayD::zeros(IxDyn(&[channels]));
        Self {
            gamma: Param::new(format!("{name}.gamma"), ones()),
            beta: Param::new(format!("{name}.beta"), zeros()),
            running_mean: Param::buffer(format!("{name}.running_mean"), zeros()),
            running_var: Param::buffer(format!("{name}.running_var"), ones()),
            channels,
            cache: None,
        }
    }

    fn affine(&self, x: &Tensor, mean: &[f32], inv_std: &[f32]) -> Tensor {
        let g = self.gamma.value.as_slice().unwrap();
        let b = self.beta.value.as_slice().unwrap();
        let mut y = x.as_standard_layout().into_owned();
        for mut sample in y.outer_iter_mut() {
            for (c, mut plane) in sample.outer_iter_mut().enumerate() {
                let scale = g[c] * inv_std[c];
                let shift = b[c] - mean[c] * scale;
                plane.mapv_inplace(|v| v * scale + shift);
            }
        }
        y
    }

    /// Evaluation mode: normalizes with the running statistics.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mean = self.running_mean.value.as_slice().unwrap();
        let inv_std: Vec<f32> = self
            .running_var
            .value
            .iter()
            .map(|v| 1.0 / (v + EPS).sqrt())
            .collect();
        self.affine(x, mean, &inv_std)
    }

    /// Training mode: batch statistics, running statistics updated.
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let m = (n * h * w) as f64;
        let mut mean = vec![0f32; c];
        let mut var = vec![0f32; c];
        for ch in 0..c {
            let plane = x.slice(ndarray::s![.., ch, .., ..]);
            let mu = plane.iter().map(|&v| v as f64).sum::<f64>() / m;
            let var_b = plane.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / m;
            mean[ch] = mu as f32;
            var[ch] = var_b as f32;
        }
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        {
            let rm = self.running_mean.value.as_slice_mut().unwrap();
            let rv = self.running_var.value.as_slice_mut().unwrap();
            for ch in 0..c {
                rm[ch] = (1.0 - MOMENTUM) * rm[ch] + MOMENTUM * mean[ch];
                rv[ch] = (1.0 - MOMENTUM) * rv[ch] + MOMENTUM * (var[ch] as f64 * unbias) as f32;
            }
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
        let mut x_hat = x.as_standard_layout().into_owned();
        for mut sample in x_hat.outer_iter_mut() {
            for (ch, mut plane) in sample.outer_iter_mut().enumerate() {
                let (mu, s) = (mean[ch], inv_std[ch]);
                plane.mapv_inplace(|v| (v - mu) * s);
            }
        }
        let g = self.gamma.value.as_slice().unwrap();
        let b = self.beta.value.as_slice().unwrap();
        let mut y = x_hat.clone();
        for mut sample in y.outer_iter_mut() {
            for (ch, mut plane) in sample.outer_iter_mut().enumerate() {
                let (gc, bc) = (g[ch], b[ch]);
                plane.mapv_inplace(|v| v * gc + bc);
            }
        }
        self.cache = Some((x_hat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (x_hat, inv_std) = self.cache.take().expect("batch-norm backward without forward");
        let (n, c, h, w) = x_hat.dim();
        let m = (n * h * w) as f64;
        let g = self.gamma.value.as_slice().unwrap().to_vec();
        let mut dx = Tensor::zeros((n, c, h, w));
        for ch in 0..c {
            let xh = x_hat.slice(ndarray::s![.., ch, .., ..]);
            let d = dy.slice(ndarray::s![.., ch, .., ..]);
            let mut sum_dy = 0f64;
            let mut sum_dy_xh = 0f64;
            ndarray::Zip::from(&d).and(&xh).for_each(|&a, &b| {
                sum_dy += a as f64;
                sum_dy_xh += a as f64 * b as f64;
            });
            self.gamma.grad[[ch]] += sum_dy_xh as f32;
            self.beta.grad[[ch]] += sum_dy as f32;
            let k = g[ch] as f64 * inv_std[ch] as f64 / m;
            let mean_dy = sum_dy;
            let mean_dy_xh = sum_dy_xh;
            let mut out = dx.slice_mut(ndarray::s![.., ch, .., ..]);
            ndarray::Zip::from(&mut out).and(&d).and(&xh).for_each(|o, &a, &b| {
                *o = (k * (m * a as f64 - mean_dy - b as f64 * mean_dy_xh)) as f32;
            });
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}
