use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayView3, ArrayViewMut3, IxDyn};
use rand::Rng;

use super::{Init, Module, Param, Tensor};
use crate::par;

/// 2-D convolution with square kernels, lowered to a matrix product per
/// sample (im2col).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cache: Option<Tensor>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = Param::new(format!("{name}.weight"), init.sample(&[cout, cin, k, k], rng));
        let bias = bias.then(|| Param::new(format!("{name}.bias"), ndarray::ArrayD::zeros(IxDyn(&[cout]))));
        Self {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
            pad,
            cache: None,
        }
    }

    /// 3x3, stride 1, "same" padding.
    pub fn same3<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, bias: bool, init: Init, rng: &mut R) -> Self {
        Self::new(name, cin, cout, 3, 1, 1, bias, init, rng)
    }

    pub fn pointwise<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, bias: bool, init: Init, rng: &mut R) -> Self {
        Self::new(name, cin, cout, 1, 1, 0, bias, init, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn out_dim(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Re-draws the kernel with `init` and zeroes the bias.
    pub fn reinit<R: Rng + ?Sized>(&mut self, init: Init, rng: &mut R) {
        self.weight.value = init.sample(&[self.cout, self.cin, self.k, self.k], rng);
        if let Some(b) = &mut self.bias {
            b.value.fill(0.0);
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn kernel(&self) -> ArrayView2<'_, f32> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.cout, self.cin * self.k * self.k))
            .expect("contiguous kernel")
    }

    /// Output columns `[lo, hi)` whose input column `ox * s + kx - p` lies
    /// inside `0..w`.
    fn valid_cols(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        // Largest ox with ox * s + kx - p <= w - 1.
        let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(wo) } else { 0 };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: ArrayView3<f32>, ho: usize, wo: usize) -> Array2<f32> {
        let (c, h, w) = x.dim();
        let (k, s, p) = (self.k, self.stride, self.pad);
        let mut cols = Array2::<f32>::zeros((c * k * k, ho * wo));
        let xs = x.as_slice().expect("contiguous input");
        let out = cols.as_slice_mut().expect("fresh array");
        for ci in 0..c {
            let plane = &xs[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * ho * wo;
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize || lo == hi {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut out[row + oy * wo + lo..row + oy * wo + hi];
                        let first = lo * s + kx - p;
                        if s == 1 {
                            dst.copy_from_slice(&src[first..first + (hi - lo)]);
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d = src[first + j * s];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f32>, mut dx: ArrayViewMut3<f32>, ho: usize, wo: usize) {
        let (c, h, w) = dx.dim();
        let (k, s, p) = (self.k, self.stride, self.pad);
        let src = cols.as_slice().expect("fresh array");
        let dxs = dx.as_slice_mut().expect("contiguous gradient");
        for ci in 0..c {
            let plane = &mut dxs[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * ho * wo;
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize || lo == hi {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let g = &src[row + oy * wo + lo..row + oy * wo + hi];
                        let first = lo * s + kx - p;
                        if s == 1 {
                            for (d, v) in dst[first..first + (hi - lo)].iter_mut().zip(g) {
                                *d += v;
                            }
                        } else {
                            for (j, v) in g.iter().enumerate() {
                                dst[first + j * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv {} expects {} channels, got {c}", self.weight.name, self.cin);
        let (ho, wo) = self.out_dim(h, w);
        let x = x.as_standard_layout();
        let mut y = Tensor::zeros((n, self.cout, ho, wo));
        let kernel = self.kernel();
        let bias = self.bias.as_ref().map(|b| b.value.as_slice().unwrap());
        let mut slots: Vec<ArrayViewMut3<f32>> = y.outer_iter_mut().collect();
        par::for_each_mut(&mut slots, |i, yi| {
            let xi = x.index_axis(ndarray::Axis(0), i);
            let mut out = yi
                .view_mut()
                .into_shape_with_order((self.cout, ho * wo))
                .expect("contiguous output");
            if self.is_pointwise() {
                let cols = xi.into_shape_with_order((c, h * w)).expect("contiguous input");
                general_mat_mul(1.0, &kernel, &cols, 0.0, &mut out);
            } else {
                let cols = self.im2col(xi, ho, wo);
                general_mat_mul(1.0, &kernel, &cols, 0.0, &mut out);
            }
            if let Some(b) = bias {
                for (mut row, bv) in out.outer_iter_mut().zip(b) {
                    row.mapv_inplace(|v| v + bv);
                }
            }
        });
        y
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.infer(x);
        self.cache = Some(x.as_standard_layout().into_owned());
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("conv backward without forward");
        let (n, c, h, w) = x.dim();
        let (ho, wo) = self.out_dim(h, w);
        let dy = dy.as_standard_layout();
        let kernel = self.kernel();
        let ckk = c * self.k * self.k;
        let mut dx = Tensor::zeros((n, c, h, w));
        let mut slots: Vec<ArrayViewMut3<f32>> = dx.outer_iter_mut().collect();
        let mut per_sample: Vec<Option<Array2<f32>>> = (0..n).map(|_| None).collect();
        {
            let mut work: Vec<(&mut ArrayViewMut3<f32>, &mut Option<Array2<f32>>)> =
                slots.iter_mut().zip(per_sample.iter_mut()).collect();
            par::for_each_mut(&mut work, |i, (dxi, dwi)| {
                let g = dy
                    .index_axis(ndarray::Axis(0), i)
                    .into_shape_with_order((self.cout, ho * wo))
                    .expect("contiguous gradient");
                let xi = x.index_axis(ndarray::Axis(0), i);
                let mut dw = Array2::<f32>::zeros((self.cout, ckk));
                if self.is_pointwise() {
                    let cols = xi.into_shape_with_order((c, h * w)).expect("contiguous input");
                    general_mat_mul(1.0, &g, &cols.t(), 0.0, &mut dw);
                    let mut dxv = dxi.view_mut().into_shape_with_order((c, h * w)).expect("contiguous");
                    general_mat_mul(1.0, &kernel.t(), &g, 0.0, &mut dxv);
                } else {
                    let cols = self.im2col(xi, ho, wo);
                    general_mat_mul(1.0, &g, &cols.t(), 0.0, &mut dw);
                    let mut dcols = Array2::<f32>::zeros((ckk, ho * wo));
                    general_mat_mul(1.0, &kernel.t(), &g, 0.0, &mut dcols);
                    self.col2im(&dcols, dxi.view_mut(), ho, wo);
                }
                **dwi = Some(dw);
            });
        }
        // Fixed-order reduction keeps results independent of thread count.
        let mut gw = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order((self.cout, ckk))
            .expect("contiguous grad");
        for dw in per_sample.into_iter().flatten() {
            gw += &dw;
        }
        if let Some(b) = &mut self.bias {
            let mut db = Array1::<f32>::zeros(self.cout);
            for i in 0..n {
                for co in 0..self.cout {
                    db[co] += dy.slice(ndarray::s![i, co, .., ..]).sum();
                }
            }
            let mut g = b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            g += &db;
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = conv.out_dim(h, w);
        let wt = &conv.weight.value;
        Tensor::from_shape_fn((n, conv.cout, ho, wo), |(b, co, oy, ox)| {
            let mut acc = conv.bias.as_ref().map_or(0.0, |bp| bp.value[[co]]);
            for ci in 0..c {
                for ky in 0..conv.k {
                    for kx in 0..conv.k {
                        let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt[[co, ci, ky, kx]] * x[[b, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let mut conv = Conv2d::new("c", 3, 5, k, s, p, true, Init::He, &mut rng);
            conv.bias.as_mut().unwrap().value.fill(0.25);
            let x = random_tensor((2, 3, 7, 9), 4);
            let fast = conv.infer(&x);
            let slow = naive(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-4, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn stride_two_rounds_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new("c", 1, 1, 3, 2, 1, false, Init::He, &mut rng);
        assert_eq!(conv.out_dim(100, 25), (50, 13));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::new("c", 2, 3, k, s, p, true, Init::Xavier, &mut rng);
            let x = random_tensor((2, 2, 5, 6), 7);
            check(&mut conv, &x, |m, x| m.forward(x), |m, dy| m.backward(dy), 2e-2);
        }
    }
}
