//! Samples, dataset layout, normalization, augmentation and synthetic phantoms.

mod augment;
mod io;
mod phantom;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, AugmentParams, Transform};
pub use io::{
    load_junctions, load_sample, load_triplet, read_gray_png, save_junctions, save_sample, write_gray_png, Dataset,
};
pub use phantom::{generate_phantom, Phantom, PhantomConfig, Stroke};

/// Grayscale image with values in `[0, 1]`, indexed `[row, col]`.
pub type Image = Array2<f32>;
/// Binary mask with values in `{0, 1}`, indexed `[row, col]`.
pub type BinaryMask = Array2<u8>;

/// Three co-registered en-face angiograms of one eye.
#[derive(Debug, Clone, PartialEq)]
pub struct EnfaceTriplet {
    pub ivc: Image,
    pub svc: Image,
    pub dvc: Image,
}

impl EnfaceTriplet {
    pub fn new(ivc: Image, svc: Image, dvc: Image) -> Result<Self> {
        let t = Self { ivc, svc, dvc };
        t.validate()?;
        Ok(t)
    }

    /// `(height, width)`.
    pub fn dim(&self) -> (usize, usize) {
        self.ivc.dim()
    }

    pub fn layers(&self) -> [&Image; 3] {
        [&self.ivc, &self.svc, &self.dvc]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.ivc.dim();
        if self.svc.dim() != d || self.dvc.dim() != d {
            return Err(Error::Geometry(format!(
                "layer sizes differ: ivc {:?}, svc {:?}, dvc {:?}",
                d,
                self.svc.dim(),
                self.dvc.dim()
            )));
        }
        for (name, img) in ["ivc", "svc", "dvc"].iter().zip(self.layers()) {
            if let Some(v) = img.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Range(format!("{name} pixel {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JunctionKind {
    Bifurcation,
    Crossing,
}

/// A vascular junction at integer pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Junction {
    pub x: usize,
    pub y: usize,
    pub kind: JunctionKind,
}

impl Junction {
    pub fn new(x: usize, y: usize, kind: JunctionKind) -> Self {
        Self { x, y, kind }
    }

    pub fn distance(&self, other: &Junction) -> f64 {
        let dx = self.x as f64 - other.x as f64;
        let dy = self.y as f64 - other.y as f64;
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub vessel_mask: BinaryMask,
    pub faz_mask: BinaryMask,
    pub junctions: Vec<Junction>,
}

impl AnnotationSet {
    /// Checks mask binarity, geometry against `(h, w)`, junction bounds and
    /// junction uniqueness.
    pub fn validate(&self, (h, w): (usize, usize)) -> Result<()> {
        for (name, m) in [("vessel", &self.vessel_mask), ("faz", &self.faz_mask)] {
            if m.dim() != (h, w) {
                return Err(Error::Geometry(format!(
                    "{name} mask is {:?}, expected {:?}",
                    m.dim(),
                    (h, w)
                )));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::Range(format!("{name} mask is not binary")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for j in &self.junctions {
            if j.x >= w || j.y >= h {
                return Err(Error::Annotation(format!(
                    "junction ({}, {}) outside {}x{} frame",
                    j.x, j.y, w, h
                )));
            }
            if !seen.insert((j.x, j.y)) {
                return Err(Error::Annotation(format!(
                    "duplicate junction at ({}, {})",
                    j.x, j.y
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub triplet: EnfaceTriplet,
    pub annotations: AnnotationSet,
}

impl Sample {
    pub fn dim(&self) -> (usize, usize) {
        self.triplet.dim()
    }
}

/// Maps raw 8-bit intensities to `[0, 1]`.
pub fn normalize(raw: ArrayView2<i32>) -> Result<Image> {
    if let Some(v) = raw.iter().find(|v| !(0..=255).contains(*v)) {
        return Err(Error::Range(format!("raw pixel {v} outside [0, 255]")));
    }
    Ok(raw.mapv(|v| v as f32 / 255.0))
}

pub fn normalize_u8(raw: ArrayView2<u8>) -> Image {
    raw.mapv(|v| v as f32 / 255.0)
}

/// Thresholds a `[0, 1]` map into a `{0, 1}` mask (`value >= threshold` is 1).
pub fn binarize(map: ArrayView2<f32>, threshold: f32) -> BinaryMask {
    map.mapv(|v| u8::from(v >= threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalize_bounds_and_division() {
        let raw = array![[0, 255, 51]];
        let n = normalize(raw.view()).unwrap();
        assert_eq!(n[[0, 0]], 0.0);
        assert_eq!(n[[0, 1]], 1.0);
        assert!((n[[0, 2]] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn normalize_rejects_out_of_range() {
        assert!(matches!(normalize(array![[256]].view()), Err(Error::Range(_))));
        assert!(matches!(normalize(array![[-1]].view()), Err(Error::Range(_))));
    }

    #[test]
    fn normalize_preserves_argmax() {
        let raw = array![[3, 200, 17], [199, 0, 255], [8, 9, 10]];
        let n = normalize(raw.view()).unwrap();
        let argmax = |it: Vec<f64>| {
            it.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(
            argmax(raw.iter().map(|&v| v as f64).collect()),
            argmax(n.iter().map(|&v| v as f64).collect())
        );
    }

    #[test]
    fn triplet_rejects_mismatched_layers() {
        let a = Image::zeros((4, 4));
        let b = Image::zeros((4, 5));
        assert!(matches!(
            EnfaceTriplet::new(a.clone(), b, a),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn annotation_rejects_duplicates_and_out_of_bounds() {
        let mut ann = AnnotationSet {
            vessel_mask: BinaryMask::zeros((8, 8)),
            faz_mask: BinaryMask::zeros((8, 8)),
            junctions: vec![Junction::new(1, 1, JunctionKind::Crossing)],
        };
        assert!(ann.validate((8, 8)).is_ok());
        ann.junctions.push(Junction::new(1, 1, JunctionKind::Bifurcation));
        assert!(matches!(ann.validate((8, 8)), Err(Error::Annotation(_))));
        ann.junctions = vec![Junction::new(8, 0, JunctionKind::Crossing)];
        assert!(matches!(ann.validate((8, 8)), Err(Error::Annotation(_))));
    }
}
