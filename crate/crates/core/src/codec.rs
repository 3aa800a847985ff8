//! Junction target encodings and their decoders.
//!
//! Two targets are derived from a junction list: a Gaussian heatmap that
//! localizes every junction, and a coarse grid whose cells carry a presence
//! confidence plus a bifurcation / crossing / background class vector.
//! Decoding takes heatmap peaks for location and the grid cell under each
//! peak for the class.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::data::{Junction, JunctionKind};

pub const DEFAULT_SIGMA: f64 = 2.5;
pub const DEFAULT_CELL_SIZE: usize = 8;

/// Grid channel layout.
pub const CH_CONFIDENCE: usize = 0;
pub const CH_BIFURCATION: usize = 1;
pub const CH_CROSSING: usize = 2;
pub const CH_BACKGROUND: usize = 3;
pub const GRID_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Array2<f32>,
    pub sigma: f64,
}

/// `cells[[row, col, channel]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTarget {
    pub cells: Array3<f32>,
    pub cell_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub peak_threshold: f32,
    pub nms_radius: f64,
    pub confidence_threshold: f32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            peak_threshold: 0.4,
            nms_radius: 3.0,
            confidence_threshold: 0.5,
        }
    }
}

/// Everything needed to go from junctions to targets and back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecParams {
    pub sigma: f64,
    pub cell_size: usize,
    pub decode: DecodeParams,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            cell_size: DEFAULT_CELL_SIZE,
            decode: DecodeParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub score: f32,
}

/// Number of grid cells along an axis of `len` pixels.
pub fn grid_len(len: usize, cell_size: usize) -> usize {
    len.div_ceil(cell_size)
}

/// Pointwise maximum of unit-peak Gaussians centred on each junction.
pub fn encode_heatmap(junctions: &[Junction], h: usize, w: usize, sigma: f64) -> Heatmap {
    let mut values = Array2::<f32>::zeros((h, w));
    let inv = 1.0 / (2.0 * sigma * sigma);
    for j in junctions {
        // The kernel is separable: exp(-(dx²+dy²)/2σ²) = gx(dx)·gy(dy).
        let gx: Vec<f64> = (0..w)
            .map(|x| (-((x as f64 - j.x as f64).powi(2)) * inv).exp())
            .collect();
        let gy: Vec<f64> = (0..h)
            .map(|y| (-((y as f64 - j.y as f64).powi(2)) * inv).exp())
            .collect();
        for (y, mut row) in values.outer_iter_mut().enumerate() {
            let fy = gy[y];
            for (x, v) in row.iter_mut().enumerate() {
                let g = (fy * gx[x]) as f32;
                if g > *v {
                    *v = g;
                }
            }
        }
    }
    Heatmap { values, sigma }
}

/// Marks the cell of every junction with confidence 1 and a one-hot class.
/// When several junctions share a cell the one nearest the cell centre wins
/// (first in list order on ties).
pub fn encode_grid(junctions: &[Junction], h: usize, w: usize, cell_size: usize) -> GridTarget {
    let (rows, cols) = (grid_len(h, cell_size), grid_len(w, cell_size));
    let mut owner: Vec<Option<(f64, JunctionKind)>> = vec![None; rows * cols];
    let half = (cell_size as f64 - 1.0) / 2.0;
    for j in junctions {
        let (r, c) = (j.y / cell_size, j.x / cell_size);
        let centre = ((c * cell_size) as f64 + half, (r * cell_size) as f64 + half);
        let d = (j.x as f64 - centre.0).hypot(j.y as f64 - centre.1);
        let slot = &mut owner[r * cols + c];
        if slot.is_none_or(|(best, _)| d < best) {
            *slot = Some((d, j.kind));
        }
    }
    let mut cells = Array3::<f32>::zeros((rows, cols, GRID_CHANNELS));
    for r in 0..rows {
        for c in 0..cols {
            match owner[r * cols + c] {
                Some((_, kind)) => {
                    cells[[r, c, CH_CONFIDENCE]] = 1.0;
                    let ch = match kind {
                        JunctionKind::Bifurcation => CH_BIFURCATION,
                        JunctionKind::Crossing => CH_CROSSING,
                    };
                    cells[[r, c, ch]] = 1.0;
                }
                None => cells[[r, c, CH_BACKGROUND]] = 1.0,
            }
        }
    }
    GridTarget { cells, cell_size }
}

/// Strict 8-neighbour local maxima scoring at least `peak_threshold`,
/// thinned by greedy non-maximum suppression in descending score order.
pub fn extract_peaks(heatmap: ArrayView2<f32>, p: &DecodeParams) -> Vec<Peak> {
    let (h, w) = heatmap.dim();
    let mut peaks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = heatmap[[y, x]];
            if v < p.peak_threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    if heatmap[[yy as usize, xx as usize]] >= v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push(Peak { x, y, score: v });
            }
        }
    }
    // Stable sort keeps raster order among equal scores.
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Peak> = Vec::new();
    for pk in peaks {
        let close = kept.iter().any(|k| {
            (k.x as f64 - pk.x as f64).hypot(k.y as f64 - pk.y as f64) <= p.nms_radius
        });
        if !close {
            kept.push(pk);
        }
    }
    kept
}

/// Labels each peak with the class of its grid cell, dropping peaks whose
/// cell is not confident or whose argmax class is background.
pub fn assemble_junctions(
    peaks: &[Peak],
    grid: ArrayView3<f32>,
    cell_size: usize,
    p: &DecodeParams,
) -> Vec<Junction> {
    let (rows, cols, _) = grid.dim();
    peaks
        .iter()
        .filter_map(|pk| {
            let (r, c) = (pk.y / cell_size, pk.x / cell_size);
            if r >= rows || c >= cols || grid[[r, c, CH_CONFIDENCE]] < p.confidence_threshold {
                return None;
            }
            let mut best = CH_BIFURCATION;
            for ch in [CH_CROSSING, CH_BACKGROUND] {
                if grid[[r, c, ch]] > grid[[r, c, best]] {
                    best = ch;
                }
            }
            let kind = match best {
                CH_BIFURCATION => JunctionKind::Bifurcation,
                CH_CROSSING => JunctionKind::Crossing,
                _ => return None,
            };
            Some(Junction::new(pk.x, pk.y, kind))
        })
        .collect()
}

/// Full decoder: heatmap peaks labelled by the grid.
pub fn decode(heatmap: ArrayView2<f32>, grid: ArrayView3<f32>, cell_size: usize, p: &DecodeParams) -> Vec<Junction> {
    assemble_junctions(&extract_peaks(heatmap, p), grid, cell_size, p)
}

/// Encodes junctions into both targets and decodes them again.
pub fn round_trip(junctions: &[Junction], h: usize, w: usize, p: &CodecParams) -> Vec<Junction> {
    let hm = encode_heatmap(junctions, h, w, p.sigma);
    let grid = encode_grid(junctions, h, w, p.cell_size);
    decode(hm.values.view(), grid.cells.view(), p.cell_size, &p.decode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use JunctionKind::*;

    #[test]
    fn empty_heatmap_is_zero() {
        let hm = encode_heatmap(&[], 12, 9, 2.5);
        assert!(hm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_gaussian_values() {
        let hm = encode_heatmap(&[Junction::new(10, 10, Bifurcation)], 32, 32, 2.5);
        assert_eq!(hm.values[[10, 10]], 1.0);
        // exp(-9 / 12.5)
        let expected = (-9.0f64 / 12.5).exp();
        assert!((hm.values[[13, 10]] as f64 - expected).abs() < 1e-7);
        assert!((expected - 0.4868).abs() < 1e-4);
        assert!((hm.values[[10, 13]] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn adjacent_junctions_combine_by_max() {
        let js = [Junction::new(5, 5, Crossing), Junction::new(6, 5, Crossing)];
        let hm = encode_heatmap(&js, 12, 12, 2.5);
        assert!(hm.values.iter().all(|&v| v <= 1.0));
        assert_eq!(hm.values[[5, 5]], 1.0);
        assert_eq!(hm.values[[5, 6]], 1.0);
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(encode_grid(&[], 304, 304, 8).cells.dim(), (38, 38, 4));
        assert_eq!(encode_grid(&[], 512, 512, 8).cells.dim(), (64, 64, 4));
        assert_eq!(encode_grid(&[], 100, 60, 8).cells.dim(), (13, 8, 4));
    }

    #[test]
    fn grid_marks_containing_cell() {
        let g = encode_grid(&[Junction::new(20, 100, Crossing)], 304, 304, 8);
        assert_eq!(g.cells[[12, 2, CH_CONFIDENCE]], 1.0);
        assert_eq!(g.cells[[12, 2, CH_CROSSING]], 1.0);
        assert_eq!(g.cells[[12, 2, CH_BACKGROUND]], 0.0);
        assert_eq!(g.cells.index_axis(ndarray::Axis(2), CH_CONFIDENCE).sum(), 1.0);
    }

    #[test]
    fn empty_grid_is_background() {
        let g = encode_grid(&[], 16, 16, 8);
        for cell in g.cells.lanes(ndarray::Axis(2)) {
            assert_eq!(cell.to_vec(), vec![0.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn grid_collision_keeps_nearest_to_centre() {
        // Cell (0, 0) spans 0..8, centre 3.5.
        let js = [Junction::new(0, 0, Bifurcation), Junction::new(4, 3, Crossing)];
        let g = encode_grid(&js, 16, 16, 8);
        assert_eq!(g.cells[[0, 0, CH_CROSSING]], 1.0);
        assert_eq!(g.cells[[0, 0, CH_BIFURCATION]], 0.0);
    }

    #[test]
    fn peaks_of_zero_map() {
        assert!(extract_peaks(Array2::zeros((8, 8)).view(), &DecodeParams::default()).is_empty());
    }

    #[test]
    fn single_junction_single_peak() {
        let hm = encode_heatmap(&[Junction::new(17, 9, Bifurcation)], 32, 32, 2.5);
        let p = DecodeParams { peak_threshold: 0.5, nms_radius: 3.0, ..Default::default() };
        // Brute force: the only pixel above 0.5 that beats all neighbours.
        let mut brute = Vec::new();
        for y in 1..31 {
            for x in 1..31 {
                let v = hm.values[[y, x]];
                let beats = (-1i64..=1).all(|dy| (-1i64..=1).all(|dx| {
                    (dx == 0 && dy == 0) || hm.values[[(y as i64 + dy) as usize, (x as i64 + dx) as usize]] < v
                }));
                if v >= 0.5 && beats {
                    brute.push((x, y));
                }
            }
        }
        assert_eq!(brute, vec![(17, 9)]);
        let peaks = extract_peaks(hm.values.view(), &p);
        assert_eq!(peaks.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>(), brute);
    }

    #[test]
    fn nms_keeps_higher_peak() {
        let mut m = Array2::<f32>::zeros((10, 10));
        m[[5, 3]] = 0.9;
        m[[5, 5]] = 0.8;
        let peaks = extract_peaks(m.view(), &DecodeParams::default());
        assert_eq!(peaks.len(), 1);
        assert_eq!((peaks[0].x, peaks[0].y), (3, 5));
    }

    fn one_cell(conf: f32, classes: [f32; 3]) -> Array3<f32> {
        let mut g = Array3::zeros((1, 1, 4));
        g[[0, 0, 0]] = conf;
        for (i, v) in classes.iter().enumerate() {
            g[[0, 0, i + 1]] = *v;
        }
        g
    }

    #[test]
    fn assemble_gating_and_argmax() {
        let p = DecodeParams::default();
        let pk = [Peak { x: 3, y: 4, score: 0.9 }];
        let out = assemble_junctions(&pk, one_cell(0.9, [0.7, 0.2, 0.1]).view(), 8, &p);
        assert_eq!(out, vec![Junction::new(3, 4, Bifurcation)]);
        assert!(assemble_junctions(&pk, one_cell(0.3, [0.7, 0.2, 0.1]).view(), 8, &p).is_empty());
    }

    #[test]
    fn assemble_exhaustive_argmax_cases() {
        let p = DecodeParams::default();
        let pk = [Peak { x: 0, y: 0, score: 1.0 }];
        // Every ordering of three distinct levels, plus ties.
        let levels = [0.1f32, 0.5, 0.9];
        for a in levels {
            for b in levels {
                for c in levels {
                    let out = assemble_junctions(&pk, one_cell(1.0, [a, b, c]).view(), 8, &p);
                    let expected = if a >= b && a >= c {
                        Some(Bifurcation)
                    } else if b >= c {
                        Some(Crossing)
                    } else {
                        None
                    };
                    assert_eq!(out.first().map(|j| j.kind), expected, "classes {a} {b} {c}");
                }
            }
        }
    }

    #[test]
    fn round_trip_basic_cases() {
        let p = CodecParams::default();
        assert!(round_trip(&[], 304, 304, &p).is_empty());
        let centre = [Junction::new(152, 152, Crossing)];
        assert_eq!(round_trip(&centre, 304, 304, &p), centre.to_vec());
        let five = [
            Junction::new(20, 20, Bifurcation),
            Junction::new(100, 40, Crossing),
            Junction::new(200, 250, Bifurcation),
            Junction::new(280, 10, Crossing),
            Junction::new(150, 150, Bifurcation),
        ];
        let mut got = round_trip(&five, 304, 304, &p);
        let mut want = five.to_vec();
        got.sort_by_key(|j| (j.x, j.y));
        want.sort_by_key(|j| (j.x, j.y));
        assert_eq!(got, want);
    }

    fn layout() -> impl Strategy<Value = Vec<Junction>> {
        proptest::collection::vec((0usize..64, 0usize..64, any::<bool>()), 0..12).prop_map(|pts| {
            let mut out: Vec<Junction> = Vec::new();
            for (x, y, cross) in pts {
                let j = Junction::new(x, y, if cross { Crossing } else { Bifurcation });
                if out.iter().all(|o| o.distance(&j) > 12.0) {
                    out.push(j);
                }
            }
            out
        })
    }

    proptest! {
        #[test]
        fn heatmap_bounded(js in layout()) {
            let hm = encode_heatmap(&js, 64, 64, 2.5);
            prop_assert!(hm.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn grid_confidence_counts_occupied_cells(pts in proptest::collection::vec((0usize..40, 0usize..40), 0..30)) {
            let js: Vec<Junction> = pts.iter().map(|&(x, y)| Junction::new(x, y, Bifurcation)).collect();
            let g = encode_grid(&js, 40, 40, 8);
            let occupied: std::collections::HashSet<_> = js.iter().map(|j| (j.y / 8, j.x / 8)).collect();
            prop_assert_eq!(g.cells.index_axis(ndarray::Axis(2), CH_CONFIDENCE).sum() as usize, occupied.len());
        }

        #[test]
        fn round_trip_identity(js in layout()) {
            let mut got = round_trip(&js, 64, 64, &CodecParams::default());
            let mut want = js.clone();
            got.sort_by_key(|j| (j.x, j.y));
            want.sort_by_key(|j| (j.x, j.y));
            prop_assert_eq!(got, want);
        }

        #[test]
        fn raising_threshold_never_adds_junctions(
            vals in proptest::collection::vec(0.0f32..1.0, 256),
            t1 in 0.05f32..0.95,
            dt in 0.0f32..0.5,
        ) {
            let hm = Array2::from_shape_vec((16, 16), vals).unwrap();
            let grid = Array3::from_shape_fn((2, 2, 4), |(_, _, ch)| if ch == CH_BACKGROUND { 0.0 } else { 0.9 });
            let lo = DecodeParams { peak_threshold: t1, ..Default::default() };
            let hi = DecodeParams { peak_threshold: (t1 + dt).min(0.99), ..Default::default() };
            prop_assert!(decode(hm.view(), grid.view(), 8, &hi).len() <= decode(hm.view(), grid.view(), 8, &lo).len());
        }
    }
}
