use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotationSet, EnfaceTriplet, Image, Junction, Sample};

/// Junctions closer than this to the frame edge after a rotation are dropped.
const BORDER_MARGIN: i64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rotation_range_deg: (f64, f64),
    pub gamma_range: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotation_range_deg: (-10.0, 10.0),
            gamma_range: (0.7, 1.9),
        }
    }
}

impl AugmentParams {
    /// Parameters under which `augment` returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotation_range_deg: (0.0, 0.0),
            gamma_range: (1.0, 1.0),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// One concrete draw of the augmentation: flips, then a rotation about the
/// image center, then a gamma curve on intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
    pub gamma: f64,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            angle_deg: 0.0,
            gamma: 1.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(p: &AugmentParams, rng: &mut R) -> Self {
        // Draw order is fixed so a seed always yields the same transform.
        let hflip = rng.random::<f64>() < p.hflip_prob;
        let vflip = rng.random::<f64>() < p.vflip_prob;
        let angle_deg = uniform(rng, p.rotation_range_deg);
        let gamma = uniform(rng, p.gamma_range);
        Self {
            hflip,
            vflip,
            angle_deg,
            gamma,
        }
    }

    fn rotates(&self) -> bool {
        self.angle_deg != 0.0
    }

    /// Forward map of a continuous `(x, y)` point on an `h x w` frame.
    pub fn map_point(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let mut x = if self.hflip { (w - 1) as f64 - x } else { x };
        let mut y = if self.vflip { (h - 1) as f64 - y } else { y };
        if self.rotates() {
            let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
            let (s, c) = self.angle_deg.to_radians().sin_cos();
            let (dx, dy) = (x - cx, y - cy);
            x = cx + c * dx - s * dy;
            y = cy + s * dx + c * dy;
        }
        (x, y)
    }

    /// Inverse map from an output pixel back to source coordinates.
    fn source_point(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let (mut x, mut y) = (x, y);
        if self.rotates() {
            let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
            let (s, c) = self.angle_deg.to_radians().sin_cos();
            let (dx, dy) = (x - cx, y - cy);
            x = cx + c * dx + s * dy;
            y = cy - s * dx + c * dy;
        }
        if self.hflip {
            x = (w - 1) as f64 - x;
        }
        if self.vflip {
            y = (h - 1) as f64 - y;
        }
        (x, y)
    }

    /// Resamples an image bilinearly; pixels mapped from outside are 0.
    pub fn warp_image(&self, img: &Image) -> Image {
        let (h, w) = img.dim();
        let at = |r: i64, c: i64| -> f64 {
            if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                0.0
            } else {
                img[[r as usize, c as usize]] as f64
            }
        };
        let mut out = Array2::from_shape_fn((h, w), |(r, c)| {
            let (sx, sy) = self.source_point(c as f64, r as f64, h, w);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x0 + 1) * fx * (1.0 - fy)
                + at(y0 + 1, x0) * (1.0 - fx) * fy
                + at(y0 + 1, x0 + 1) * fx * fy;
            v as f32
        });
        if self.gamma != 1.0 {
            let g = self.gamma as f32;
            out.mapv_inplace(|v| v.clamp(0.0, 1.0).powf(g));
        }
        out
    }

    /// Resamples a mask with nearest-neighbour lookup; outside is 0.
    pub fn warp_mask(&self, mask: &Array2<u8>) -> Array2<u8> {
        let (h, w) = mask.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            let (sx, sy) = self.source_point(c as f64, r as f64, h, w);
            let (x, y) = (sx.round() as i64, sy.round() as i64);
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                0
            } else {
                u8::from(mask[[y as usize, x as usize]] > 0)
            }
        })
    }

    /// Maps junctions, dropping those that leave the frame (or, after a
    /// rotation, land within the border margin) and any that collapse onto
    /// an already-kept pixel.
    pub fn map_junctions(&self, junctions: &[Junction], h: usize, w: usize) -> Vec<Junction> {
        let margin = if self.rotates() { BORDER_MARGIN } else { 0 };
        let mut seen = std::collections::HashSet::new();
        junctions
            .iter()
            .filter_map(|j| {
                let (x, y) = self.map_point(j.x as f64, j.y as f64, h, w);
                let (x, y) = (x.round() as i64, y.round() as i64);
                let inside = x >= margin
                    && y >= margin
                    && x < w as i64 - margin
                    && y < h as i64 - margin;
                (inside && seen.insert((x, y)))
                    .then(|| Junction::new(x as usize, y as usize, j.kind))
            })
            .collect()
    }

    pub fn apply(&self, s: &Sample) -> Sample {
        let (h, w) = s.dim();
        let t = &s.triplet;
        Sample {
            id: s.id.clone(),
            triplet: EnfaceTriplet {
                ivc: self.warp_image(&t.ivc),
                svc: self.warp_image(&t.svc),
                dvc: self.warp_image(&t.dvc),
            },
            annotations: AnnotationSet {
                vessel_mask: self.warp_mask(&s.annotations.vessel_mask),
                faz_mask: self.warp_mask(&s.annotations.faz_mask),
                junctions: self.map_junctions(&s.annotations.junctions, h, w),
            },
        }
    }
}

/// Draws a transform from `p` and applies it consistently to the images,
/// the masks and the junction list of `s`.
pub fn augment<R: Rng + ?Sized>(s: &Sample, p: &AugmentParams, rng: &mut R) -> Sample {
    Transform::sample(p, rng).apply(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BinaryMask, JunctionKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(h: usize, w: usize, junctions: Vec<Junction>) -> Sample {
        let img = Image::from_shape_fn((h, w), |(r, c)| ((r * 13 + c * 7) % 17) as f32 / 16.0);
        Sample {
            id: "toy".into(),
            triplet: EnfaceTriplet {
                ivc: img.clone(),
                svc: img.mapv(|v| 1.0 - v),
                dvc: img,
            },
            annotations: AnnotationSet {
                vessel_mask: BinaryMask::from_shape_fn((h, w), |(r, c)| u8::from((r + c) % 3 == 0)),
                faz_mask: BinaryMask::from_shape_fn((h, w), |(r, _)| u8::from(r < h / 2)),
                junctions,
            },
        }
    }

    #[test]
    fn hflip_reflects_junctions() {
        let t = Transform {
            hflip: true,
            ..Transform::identity()
        };
        let s = toy(20, 30, vec![Junction::new(4, 9, JunctionKind::Crossing)]);
        let out = t.apply(&s);
        assert_eq!(out.annotations.junctions, vec![Junction::new(30 - 1 - 4, 9, JunctionKind::Crossing)]);
        assert_eq!(out.triplet.ivc[[3, 0]], s.triplet.ivc[[3, 29]]);
        assert_eq!(out.annotations.vessel_mask[[5, 2]], s.annotations.vessel_mask[[5, 27]]);
    }

    #[test]
    fn vflip_reflects_rows() {
        let t = Transform {
            vflip: true,
            ..Transform::identity()
        };
        let s = toy(20, 30, vec![Junction::new(4, 9, JunctionKind::Bifurcation)]);
        let out = t.apply(&s);
        assert_eq!(out.annotations.junctions[0].y, 20 - 1 - 9);
        assert_eq!(out.triplet.svc[[0, 3]], s.triplet.svc[[19, 3]]);
    }

    #[test]
    fn identity_params_are_identity() {
        let s = toy(24, 24, vec![Junction::new(1, 1, JunctionKind::Crossing), Junction::new(12, 7, JunctionKind::Bifurcation)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(&s, &AugmentParams::identity(), &mut rng);
        assert_eq!(out, s);
    }

    #[test]
    fn sampled_parameters_respect_ranges() {
        let p = AugmentParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let t = Transform::sample(&p, &mut rng);
            assert!((-10.0..=10.0).contains(&t.angle_deg));
            assert!((0.7..=1.9).contains(&t.gamma));
        }
    }

    #[test]
    fn gamma_touches_images_only() {
        let t = Transform {
            gamma: 1.5,
            ..Transform::identity()
        };
        let s = toy(10, 10, vec![]);
        let out = t.apply(&s);
        assert_eq!(out.annotations, s.annotations);
        assert!((out.triplet.ivc[[1, 1]] - s.triplet.ivc[[1, 1]].powf(1.5)).abs() < 1e-6);
    }

    #[test]
    fn rotated_masks_stay_binary() {
        let t = Transform {
            angle_deg: 7.3,
            ..Transform::identity()
        };
        let out = t.apply(&toy(32, 32, vec![]));
        assert!(out.annotations.vessel_mask.iter().all(|&v| v <= 1));
        assert!(out.annotations.faz_mask.iter().all(|&v| v <= 1));
    }

    #[test]
    fn rotation_drops_junctions_near_border() {
        let t = Transform {
            angle_deg: 10.0,
            ..Transform::identity()
        };
        // A corner point rotates out of the frame; the center is fixed.
        let out = t.map_junctions(
            &[Junction::new(0, 0, JunctionKind::Crossing), Junction::new(15, 15, JunctionKind::Bifurcation)],
            31,
            31,
        );
        assert_eq!(out, vec![Junction::new(15, 15, JunctionKind::Bifurcation)]);
    }

    proptest! {
        #[test]
        fn junctions_follow_their_rasterized_dots(
            seed in 0u64..1000,
            pts in proptest::collection::vec((4usize..44, 4usize..44), 1..6),
        ) {
            let (h, w) = (48, 48);
            let junctions: Vec<Junction> = pts.iter().map(|&(x, y)| Junction::new(x, y, JunctionKind::Bifurcation)).collect();
            let mut dots = BinaryMask::zeros((h, w));
            for j in &junctions {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        dots[[(j.y as i64 + dy) as usize, (j.x as i64 + dx) as usize]] = 1;
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Transform::sample(&AugmentParams::default(), &mut rng);
            let warped = t.warp_mask(&dots);
            for j in t.map_junctions(&junctions, h, w) {
                let near = (-1i64..=1).any(|dy| (-1i64..=1).any(|dx| {
                    let (x, y) = (j.x as i64 + dx, j.y as i64 + dy);
                    x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && warped[[y as usize, x as usize]] == 1
                }));
                prop_assert!(near, "junction {:?} has no warped dot within 1 px", j);
            }
        }
    }
}
