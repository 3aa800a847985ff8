//! Bilinear resampling with half-pixel centres (`align_corners = false`).

use super::Tensor;

/// For each output index: `(lower source index, upper source index, upper weight)`.
fn taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

pub fn resize_bilinear(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, hi, wi) = x.dim();
    if (hi, wi) == (h, w) {
        return x.clone();
    }
    let ty = taps(h, hi);
    let tx = taps(w, wi);
    let mut y = Tensor::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            let src = x.slice(ndarray::s![b, ch, .., ..]);
            let mut dst = y.slice_mut(ndarray::s![b, ch, .., ..]);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
                    let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
                    dst[[oy, ox]] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    y
}

/// Adjoint of [`resize_bilinear`] from an `h x w` source.
pub fn resize_bilinear_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, ho, wo) = dy.dim();
    if (ho, wo) == (h, w) {
        return dy.clone();
    }
    let ty = taps(ho, h);
    let tx = taps(wo, w);
    let mut dx = Tensor::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            let g = dy.slice(ndarray::s![b, ch, .., ..]);
            let mut dst = dx.slice_mut(ndarray::s![b, ch, .., ..]);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = g[[oy, ox]];
                    dst[[y0, x0]] += v * (1.0 - fy) * (1.0 - fx);
                    dst[[y0, x1]] += v * (1.0 - fy) * fx;
                    dst[[y1, x0]] += v * fy * (1.0 - fx);
                    dst[[y1, x1]] += v * fy * fx;
                }
            }
        }
    }
    dx
}
