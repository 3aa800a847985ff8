use super::Tensor;

#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn infer(x: &Tensor) -> Tensor {
        x.mapv(|v| v.max(0.0))
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = Self::infer(x);
        self.cache = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let y = self.cache.take().expect("relu backward without forward");
        let mut dx = dy.to_owned();
        ndarray::Zip::from(&mut dx).and(&y).for_each(|d, &v| {
            if v <= 0.0 {
                *d = 0.0
            }
        });
        dx
    }
}

/// Logistic sigmoid. Outputs are nudged into the open interval `(0, 1)` so
/// that saturated logits never produce an exact 0 or 1.
#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    cache: Option<Tensor>,
}

const LO: f32 = 1e-7;
const HI: f32 = 1.0 - 1e-7;

impl Sigmoid {
    pub fn infer(x: &Tensor) -> Tensor {
        x.mapv(|v| (1.0 / (1.0 + (-v).exp())).clamp(LO, HI))
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = Self::infer(x);
        self.cache = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let y = self.cache.take().expect("sigmoid backward without forward");
        let mut dx = dy.to_owned();
        ndarray::Zip::from(&mut dx).and(&y).for_each(|d, &p| *d *= p * (1.0 - p));
        dx
    }
}
