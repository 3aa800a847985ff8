//! On-disk dataset layout.
//!
//! ```text
//! <root>/train.txt, <root>/test.txt     sample ids, one per line
//! <root>/<id>/ivc.png svc.png dvc.png   8-bit grayscale
//! <root>/<id>/vessel.png faz.png        8-bit masks, foreground >= 128
//! <root>/<id>/junctions.json            {"junctions": [{"x", "y", "kind"}]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{normalize_u8, AnnotationSet, BinaryMask, EnfaceTriplet, Image, Junction, Sample};
use crate::error::{Error, Result};

const LAYERS: [&str; 3] = ["ivc.png", "svc.png", "dvc.png"];

#[derive(Serialize, Deserialize)]
struct JunctionFile {
    junctions: Vec<Junction>,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::IncompleteSample(path))
    }
}

fn read_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .map_err(|e| Error::Geometry(e.to_string()))
}

/// Writes a `[0, 1]` map as an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, map: ArrayView2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let raw: Vec<u8> = map
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Geometry("image buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Geometry("mask buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn load_junctions(path: &Path) -> Result<Vec<Junction>> {
    let file: JunctionFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(file.junctions)
}

pub fn save_junctions(path: &Path, junctions: &[Junction]) -> Result<()> {
    let file = JunctionFile {
        junctions: junctions.to_vec(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Reads an 8-bit grayscale PNG as a `[0, 1]` map.
pub fn read_gray_png(path: &Path) -> Result<Image> {
    Ok(normalize_u8(read_gray(&require(path.to_path_buf())?)?.view()))
}

/// Loads only the three en-face layers of a sample directory.
pub fn load_triplet(dir: &Path) -> Result<EnfaceTriplet> {
    let layer_paths = LAYERS
        .iter()
        .map(|f| require(dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let raw = layer_paths
        .iter()
        .map(|p| read_gray(p))
        .collect::<Result<Vec<_>>>()?;
    let dim = raw[0].dim();
    for (name, r) in LAYERS.iter().zip(&raw) {
        if r.dim() != dim {
            return Err(Error::Geometry(format!(
                "{name} is {}x{}, ivc.png is {}x{}",
                r.dim().1,
                r.dim().0,
                dim.1,
                dim.0
            )));
        }
    }
    let mut layers: Vec<Image> = raw.iter().map(|r| normalize_u8(r.view())).collect();
    let dvc = layers.pop().unwrap();
    let svc = layers.pop().unwrap();
    let ivc = layers.pop().unwrap();
    EnfaceTriplet::new(ivc, svc, dvc)
}

/// Loads one sample directory; the directory name becomes the sample id.
pub fn load_sample(dir: &Path) -> Result<Sample> {
    for f in LAYERS.iter().chain(&["vessel.png", "faz.png", "junctions.json"]) {
        require(dir.join(f))?;
    }
    let triplet = load_triplet(dir)?;
    let dim = triplet.dim();
    let (vessel_path, faz_path, junction_path) = (dir.join("vessel.png"), dir.join("faz.png"), dir.join("junctions.json"));

    let read_mask = |p: &Path| -> Result<BinaryMask> {
        Ok(read_gray(p)?.mapv(|v| u8::from(v >= 128)))
    };
    let annotations = AnnotationSet {
        vessel_mask: read_mask(&vessel_path)?,
        faz_mask: read_mask(&faz_path)?,
        junctions: load_junctions(&junction_path)?,
    };
    annotations.validate(dim)?;

    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sample {
        id,
        triplet,
        annotations,
    })
}

/// Writes `sample` into `root/<sample.id>/`.
pub fn save_sample(root: &Path, sample: &Sample) -> Result<PathBuf> {
    let dir = root.join(&sample.id);
    fs::create_dir_all(&dir)?;
    for (name, img) in LAYERS.iter().zip(sample.triplet.layers()) {
        write_gray_png(&dir.join(name), img.view())?;
    }
    write_mask_png(&dir.join("vessel.png"), &sample.annotations.vessel_mask)?;
    write_mask_png(&dir.join("faz.png"), &sample.annotations.faz_mask)?;
    save_junctions(&dir.join("junctions.json"), &sample.annotations.junctions)?;
    Ok(dir)
}

/// A dataset root with split files.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::NoData(format!(
                "dataset root {} does not exist",
                root.display()
            )));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Sample ids listed in `<split>.txt`; blank lines are skipped.
    pub fn split(&self, name: &str) -> Result<Vec<String>> {
        let path = self.root.join(format!("{name}.txt"));
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::NoData(format!("cannot read split {}: {e}", path.display()))
        })?;
        let ids: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(*id)) {
            return Err(Error::Annotation(format!("duplicate sample id {dup} in {name}")));
        }
        Ok(ids)
    }

    pub fn write_split(&self, name: &str, ids: &[String]) -> Result<()> {
        let mut text = ids.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(self.root.join(format!("{name}.txt")), text)?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<Sample> {
        load_sample(&self.root.join(id))
    }

    pub fn load_split(&self, name: &str) -> Result<Vec<Sample>> {
        self.split(name)?.iter().map(|id| self.load(id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{JunctionKind, Junction};

    fn sample(h: usize, w: usize) -> Sample {
        let img = Image::from_shape_fn((h, w), |(r, c)| ((r * 7 + c * 3) % 256) as f32 / 255.0);
        Sample {
            id: "s0".into(),
            triplet: EnfaceTriplet::new(img.clone(), img.clone(), img).unwrap(),
            annotations: AnnotationSet {
                vessel_mask: BinaryMask::from_shape_fn((h, w), |(r, c)| u8::from(r == c)),
                faz_mask: BinaryMask::zeros((h, w)),
                junctions: vec![Junction::new(3, 4, JunctionKind::Crossing)],
            },
        }
    }

    #[test]
    fn save_then_load_304() {
        let tmp = tempfile::tempdir().unwrap();
        let s = sample(304, 304);
        let dir = save_sample(tmp.path(), &s).unwrap();
        let back = load_sample(&dir).unwrap();
        assert_eq!(back.dim(), (304, 304));
        assert_eq!(back, s);
    }

    #[test]
    fn empty_annotations_are_valid() {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = sample(16, 16);
        s.annotations.vessel_mask.fill(0);
        s.annotations.junctions.clear();
        let dir = save_sample(tmp.path(), &s).unwrap();
        let back = load_sample(&dir).unwrap();
        assert!(back.annotations.junctions.is_empty());
        assert!(back.annotations.vessel_mask.iter().all(|&v| v == 0));
    }

    #[test]
    fn missing_file_is_incomplete() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = save_sample(tmp.path(), &sample(8, 8)).unwrap();
        fs::remove_file(dir.join("faz.png")).unwrap();
        assert!(matches!(load_sample(&dir), Err(Error::IncompleteSample(_))));
    }

    #[test]
    fn mismatched_layer_is_geometry_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = save_sample(tmp.path(), &sample(304, 304)).unwrap();
        write_gray_png(&dir.join("svc.png"), Image::zeros((512, 512)).view()).unwrap();
        assert!(matches!(load_sample(&dir), Err(Error::Geometry(_))));
    }

    #[test]
    fn out_of_bounds_junction_is_annotation_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = save_sample(tmp.path(), &sample(8, 8)).unwrap();
        save_junctions(
            &dir.join("junctions.json"),
            &[Junction::new(8, 2, JunctionKind::Bifurcation)],
        )
        .unwrap();
        assert!(matches!(load_sample(&dir), Err(Error::Annotation(_))));
    }

    #[test]
    fn junction_json_schema() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("j.json");
        save_junctions(&p, &[Junction::new(1, 2, JunctionKind::Bifurcation)]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"junctions": [{"x": 1, "y": 2, "kind": "bifurcation"}]})
        );
    }

    #[test]
    fn dataset_splits() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = Dataset::open(tmp.path()).unwrap();
        save_sample(tmp.path(), &sample(8, 8)).unwrap();
        ds.write_split("train", &["s0".to_string()]).unwrap();
        assert_eq!(ds.split("train").unwrap(), vec!["s0"]);
        assert_eq!(ds.load_split("train").unwrap().len(), 1);
        assert!(ds.split("test").is_err());
    }
}
