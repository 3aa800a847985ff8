//! Combining the three per-encoder feature maps into one task feature map.

use ndarray::{s, Zip};
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Gate-weighted sum `M = Σ_i G^i ∘ F_i`.
    #[default]
    Vgm,
    Max,
    Min,
    Avg,
    Sum,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Vgm,
        FusionMode::Sum,
        FusionMode::Avg,
        FusionMode::Max,
        FusionMode::Min,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Vgm => "vgm",
            FusionMode::Max => "max",
            FusionMode::Min => "min",
            FusionMode::Avg => "avg",
            FusionMode::Sum => "sum",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown fusion mode `{s}` (expected vgm, max, min, avg or sum)"))
    }
}

/// Fuses `features` (three `[B, n, H, W]` maps). `gate` is `[B, 3, H, W]`
/// and only read in [`FusionMode::Vgm`], where gate channel `i` scales every
/// channel of `features[i]`.
pub fn fuse(gate: Option<&Tensor>, features: &[Tensor], mode: FusionMode) -> Tensor {
    assert_eq!(features.len(), 3, "fusion expects three feature maps");
    let [f1, f2, f3] = [&features[0], &features[1], &features[2]];
    match mode {
        FusionMode::Vgm => {
            // Accumulating in f64 keeps constant gates exactly equivalent to
            // the plain reductions even under cancellation.
            let g = gate.expect("VGM fusion needs a gate");
            let (b, n, _, _) = f1.dim();
            let mut m = Tensor::zeros(f1.raw_dim());
            for bi in 0..b {
                let gs: Vec<_> = (0..3).map(|i| g.slice(s![bi, i, .., ..])).collect();
                for c in 0..n {
                    let fs: Vec<_> = features.iter().map(|f| f.slice(s![bi, c, .., ..])).collect();
                    Zip::indexed(m.slice_mut(s![bi, c, .., ..])).for_each(|ix, m| {
                        let acc: f64 = (0..3).map(|i| gs[i][ix] as f64 * fs[i][ix] as f64).sum();
                        *m = acc as f32;
                    });
                }
            }
            m
        }
        FusionMode::Sum => Zip::from(f1).and(f2).and(f3).map_collect(|&a, &b, &c| (a as f64 + b as f64 + c as f64) as f32),
        FusionMode::Avg => {
            Zip::from(f1).and(f2).and(f3).map_collect(|&a, &b, &c| ((a as f64 + b as f64 + c as f64) / 3.0) as f32)
        }
        FusionMode::Max => Zip::from(f1).and(f2).and(f3).map_collect(|&a, &b, &c| a.max(b).max(c)),
        FusionMode::Min => Zip::from(f1).and(f2).and(f3).map_collect(|&a, &b, &c| a.min(b).min(c)),
    }
}

/// Gradients of [`fuse`] with respect to the three feature maps and, in VGM
/// mode, the gate. MAX and MIN route the gradient to the first extremal map.
pub fn fuse_backward(gate: Option<&Tensor>, features: &[Tensor], mode: FusionMode, dm: &Tensor) -> (Vec<Tensor>, Option<Tensor>) {
    let mut df: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(dm.raw_dim())).collect();
    match mode {
        FusionMode::Vgm => {
            let g = gate.expect("VGM fusion needs a gate");
            let (b, n, _, _) = dm.dim();
            let mut dg = Tensor::zeros(g.raw_dim());
            for bi in 0..b {
                for (i, f) in features.iter().enumerate() {
                    let gi = g.slice(s![bi, i, .., ..]);
                    for c in 0..n {
                        let dmc = dm.slice(s![bi, c, .., ..]);
                        Zip::from(df[i].slice_mut(s![bi, c, .., ..]))
                            .and(dmc)
                            .and(gi)
                            .for_each(|d, &dm, &g| *d = g * dm);
                        Zip::from(dg.slice_mut(s![bi, i, .., ..]))
                            .and(dmc)
                            .and(f.slice(s![bi, c, .., ..]))
                            .for_each(|d, &dm, &f| *d += f * dm);
                    }
                }
            }
            (df, Some(dg))
        }
        FusionMode::Sum | FusionMode::Avg => {
            let k = if mode == FusionMode::Avg { 1.0 / 3.0 } else { 1.0 };
            for d in &mut df {
                d.zip_mut_with(dm, |d, &g| *d = k * g);
            }
            (df, None)
        }
        FusionMode::Max | FusionMode::Min => {
            let better = |a: f32, b: f32| if mode == FusionMode::Max { a > b } else { a < b };
            let winner = Zip::from(&features[0])
                .and(&features[1])
                .and(&features[2])
                .map_collect(|&a, &b, &c| {
                    let mut best = (0u8, a);
                    for (i, v) in [(1, b), (2, c)] {
                        if better(v, best.1) {
                            best = (i, v);
                        }
                    }
                    best.0
                });
            for (i, d) in df.iter_mut().enumerate() {
                Zip::from(d).and(&winner).and(dm).for_each(|d, &k, &g| {
                    if k as usize == i {
                        *d = g
                    }
                });
            }
            (df, None)
        }
    }
}
