use ndarray::ArrayD;

use super::{Module, Param};

/// Optimizer state, kept separately so it can be checkpointed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState::default(),
        }
    }
}

impl Adam {
    /// Applies one update to every trainable parameter using its gradient.
    pub fn step(&mut self, model: &mut dyn Module, lr: f64) {
        let st = &mut self.state;
        if st.m.is_empty() {
            model.visit(&mut |p: &Param| {
                if p.trainable {
                    st.m.push(ArrayD::zeros(p.value.raw_dim()));
                    st.v.push(ArrayD::zeros(p.value.raw_dim()));
                }
            });
        }
        st.step += 1;
        let t = st.step as i32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let mut i = 0;
        model.visit_mut(&mut |p: &mut Param| {
            if !p.trainable {
                return;
            }
            let (m, v) = (&mut st.m[i], &mut st.v[i]);
            assert_eq!(m.shape(), p.value.shape(), "optimizer state does not match {}", p.name);
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
                });
            i += 1;
        });
    }
}
