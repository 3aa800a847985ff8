//! Synthetic vascular phantoms with exact ground truth.
//!
//! Vessel trees grow inward from the frame border as chains of straight
//! strokes. A tip either continues or splits in two. Strokes of one tree never
//! touch each other except at shared endpoints, so a tree cannot self-cross.
//! Trees are grown independently and then pruned until every contact between
//! two trees is a clean transversal crossing: shallow crossings, near misses,
//! crossings next to a vessel's free end and crowded junctions are removed by
//! cutting the smaller offending subtree. Ground truth is read off the final
//! stroke graph: a stroke end with two children is a bifurcation, and every
//! intersection of strokes from distinct trees is a crossing.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotationSet, BinaryMask, EnfaceTriplet, Image, Junction, JunctionKind, Sample};
use crate::error::{Error, Result};

type Point = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub n_trees: usize,
    pub faz_radius: f64,
    pub vessel_width_range: (f64, f64),
    pub branch_prob: f64,
    pub rng_seed: u64,
    pub segment_length_range: (f64, f64),
    /// Maximum number of splits along any root-to-tip path.
    pub max_depth: usize,
    pub max_strokes_per_tree: usize,
    pub min_junction_separation: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: (128, 128),
            n_trees: 3,
            faz_radius: 14.0,
            vessel_width_range: (2.0, 4.0),
            branch_prob: 0.6,
            rng_seed: 0,
            segment_length_range: (10.0, 20.0),
            max_depth: 5,
            max_strokes_per_tree: 40,
            min_junction_separation: 12.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let bad = |m: &str| Err(Error::Generation(m.to_string()));
        if h < 16 || w < 16 {
            return bad("image must be at least 16x16");
        }
        if self.n_trees == 0 {
            return bad("at least one vessel tree is required");
        }
        if !(self.faz_radius > 0.0 && self.faz_radius < h.min(w) as f64 / 4.0) {
            return bad("faz_radius must lie in (0, min(H, W) / 4)");
        }
        let (lo, hi) = self.vessel_width_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad("vessel_width_range must satisfy 0 < min <= max");
        }
        let (lo, hi) = self.segment_length_range;
        if !(lo >= 4.0 && lo <= hi) {
            return bad("segment_length_range must satisfy 4 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return bad("branch_prob must lie in [0, 1]");
        }
        if self.min_junction_separation < 2.0 {
            return bad("min_junction_separation must be at least 2 px");
        }
        Ok(())
    }
}

/// One rendered vessel segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stroke {
    pub tree: usize,
    pub a: Point,
    pub b: Point,
    pub width: f64,
}

/// A generated sample together with the strokes it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub sample: Sample,
    pub strokes: Vec<Stroke>,
    pub faz_center: Point,
}

fn sub(a: Point, b: Point) -> Point {
    (a.0 - b.0, a.1 - b.1)
}

fn cross(a: Point, b: Point) -> f64 {
    a.0 * b.1 - a.1 * b.0
}

fn dist(a: Point, b: Point) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p.0 - a.0) * ab.0 + (p.1 - a.1) * ab.1) / len2).clamp(0.0, 1.0);
    dist(p, (a.0 + t * ab.0, a.1 + t * ab.1))
}

fn segment_distance(a: Point, b: Point, c: Point, d: Point) -> f64 {
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

/// Interior intersection point and `|sin|` of the crossing angle.
fn proper_intersection(a: Point, b: Point, c: Point, d: Point) -> Option<(Point, f64)> {
    let r = sub(b, a);
    let s = sub(d, c);
    let denom = cross(r, s);
    if denom.abs() < 1e-12 {
        return None;
    }
    let ca = sub(c, a);
    let t = cross(ca, s) / denom;
    let u = cross(ca, r) / denom;
    const E: f64 = 1e-9;
    if t > E && t < 1.0 - E && u > E && u < 1.0 - E {
        let sin = denom.abs() / (r.0.hypot(r.1) * s.0.hypot(s.1));
        Some(((a.0 + t * r.0, a.1 + t * r.1), sin))
    } else {
        None
    }
}

struct Node {
    stroke: Stroke,
    parent: Option<usize>,
    alive: bool,
}

struct Tip {
    pos: Point,
    heading: f64,
    width: f64,
    depth: usize,
    parent: Option<usize>,
}

/// Grows every tree independently (self-avoiding, clear of the FAZ), then
/// prunes subtrees until the trees interact only through clean transversal
/// crossings.
struct Grower<'a> {
    cfg: &'a PhantomConfig,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    faz_center: Point,
}

impl Grower<'_> {
    fn in_frame(&self, p: Point, margin: f64) -> bool {
        let (h, w) = self.cfg.image_size;
        p.0 >= margin && p.1 >= margin && p.0 <= w as f64 - 1.0 - margin && p.1 <= h as f64 - 1.0 - margin
    }

    /// Clips `a -> b` to the frame; `true` when clipping happened.
    fn clip(&self, a: Point, b: Point) -> (Point, bool) {
        let (h, w) = self.cfg.image_size;
        let (xmax, ymax) = (w as f64 - 1.0, h as f64 - 1.0);
        let mut t = 1.0f64;
        let d = sub(b, a);
        for (p, dp, hi) in [(a.0, d.0, xmax), (a.1, d.1, ymax)] {
            if p + dp < 0.0 {
                t = t.min(-p / dp);
            } else if p + dp > hi {
                t = t.min((hi - p) / dp);
            }
        }
        if t < 1.0 {
            ((a.0 + t * d.0, a.1 + t * d.1), true)
        } else {
            (b, false)
        }
    }

    fn children(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.alive && n.parent == Some(i))
            .map(|(j, _)| j)
    }

    /// End points where a stroke splits into two live children.
    fn bifurcations(&self) -> Vec<(usize, Point)> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].alive && self.children(i).count() == 2)
            .map(|i| (i, self.nodes[i].stroke.b))
            .collect()
    }

    fn adjacent(&self, i: usize, j: usize) -> bool {
        let (s, t) = (&self.nodes[i].stroke, &self.nodes[j].stroke);
        s.tree == t.tree && (s.a == t.b || s.b == t.a || s.a == t.a)
    }

    fn is_tip(&self, i: usize) -> bool {
        self.children(i).next().is_none()
    }

    /// Same-tree validity of a candidate: length, FAZ clearance and no
    /// contact with non-adjacent strokes of its own tree.
    fn fits(&self, cand: &Stroke, extra: &[Stroke]) -> bool {
        if dist(cand.a, cand.b) < 4.0 {
            return false;
        }
        let clearance = self.cfg.faz_radius + cand.width / 2.0 + 2.0;
        if point_segment_distance(self.faz_center, cand.a, cand.b) < clearance {
            return false;
        }
        self.nodes
            .iter()
            .filter(|n| n.alive)
            .map(|n| &n.stroke)
            .chain(extra)
            .filter(|s| s.tree == cand.tree && s.a != cand.a && s.b != cand.a)
            .all(|s| segment_distance(cand.a, cand.b, s.a, s.b) >= (cand.width + s.width) / 2.0 + 2.0)
    }

    fn split_point_ok(&self, tree: usize, p: Point) -> bool {
        self.in_frame(p, 3.0)
            && self
                .bifurcations()
                .iter()
                .filter(|(i, _)| self.nodes[*i].stroke.tree == tree)
                .all(|(_, q)| dist(p, *q) >= self.cfg.min_junction_separation)
    }

    fn propose(&mut self, tree: usize, tip: &Tip, heading: f64, width: f64) -> (Stroke, bool) {
        let (lo, hi) = self.cfg.segment_length_range;
        let len = self.rng.random_range(lo..=hi);
        let b = (tip.pos.0 + len * heading.cos(), tip.pos.1 + len * heading.sin());
        let (b, clipped) = self.clip(tip.pos, b);
        (Stroke { tree, a: tip.pos, b, width }, clipped)
    }

    fn push(&mut self, stroke: Stroke, parent: Option<usize>) -> usize {
        self.nodes.push(Node { stroke, parent, alive: true });
        self.nodes.len() - 1
    }

    fn try_split(&mut self, tree: usize, tip: &Tip) -> Option<Vec<Tip>> {
        if !self.split_point_ok(tree, tip.pos) {
            return None;
        }
        let width = (tip.width * 0.8).max(self.cfg.vessel_width_range.0);
        for _ in 0..4 {
            let headings = [
                tip.heading - self.rng.random_range(25f64..45.0).to_radians(),
                tip.heading + self.rng.random_range(25f64..45.0).to_radians(),
            ];
            let (s1, c1) = self.propose(tree, tip, headings[0], width);
            let (s2, c2) = self.propose(tree, tip, headings[1], width);
            if !self.fits(&s1, &[]) || !self.fits(&s2, &[s1]) {
                continue;
            }
            let mut next = Vec::new();
            for (s, clipped, heading) in [(s1, c1, headings[0]), (s2, c2, headings[1])] {
                let id = self.push(s, tip.parent);
                if !clipped {
                    next.push(Tip { pos: s.b, heading, width, depth: tip.depth + 1, parent: Some(id) });
                }
            }
            return Some(next);
        }
        None
    }

    fn try_continue(&mut self, tree: usize, tip: &Tip) -> Option<Vec<Tip>> {
        for attempt in 0..6 {
            let spread = (20.0 + 15.0 * attempt as f64).to_radians();
            let heading = tip.heading + self.rng.random_range(-spread..=spread);
            let (s, clipped) = self.propose(tree, tip, heading, tip.width);
            if self.fits(&s, &[]) {
                let id = self.push(s, tip.parent);
                return Some(if clipped {
                    Vec::new()
                } else {
                    vec![Tip { pos: s.b, heading, parent: Some(id), ..*tip }]
                });
            }
        }
        None
    }

    fn root(&mut self, tree: usize) -> Tip {
        let (h, w) = self.cfg.image_size;
        let (cx, cy) = self.faz_center;
        let base = std::f64::consts::TAU * tree as f64 / self.cfg.n_trees as f64;
        let angle = base + self.rng.random_range(-0.4..0.4);
        // Root on the border along a ray from the FAZ center.
        let (dx, dy) = (angle.cos(), angle.sin());
        let reach = |d: f64, c: f64, hi: f64| match d {
            d if d > 0.0 => (hi - c) / d,
            d if d < 0.0 => -c / d,
            _ => f64::INFINITY,
        };
        let t = reach(dx, cx, w as f64 - 1.0).min(reach(dy, cy, h as f64 - 1.0));
        let pos = (
            (cx + t * dx).clamp(0.0, w as f64 - 1.0),
            (cy + t * dy).clamp(0.0, h as f64 - 1.0),
        );
        let inward = (cy - pos.1).atan2(cx - pos.0);
        Tip {
            pos,
            heading: inward + self.rng.random_range(-0.6..0.6),
            width: self.cfg.vessel_width_range.1,
            depth: 0,
            parent: None,
        }
    }

    fn grow(&mut self) {
        for tree in 0..self.cfg.n_trees {
            let mut queue = std::collections::VecDeque::from([self.root(tree)]);
            let start = self.nodes.len();
            while let Some(tip) = queue.pop_front() {
                if self.nodes.len() - start >= self.cfg.max_strokes_per_tree {
                    break;
                }
                let want_split = tip.parent.is_some()
                    && tip.depth < self.cfg.max_depth
                    && self.rng.random::<f64>() < self.cfg.branch_prob;
                let next = if want_split {
                    self.try_split(tree, &tip).or_else(|| self.try_continue(tree, &tip))
                } else {
                    self.try_continue(tree, &tip)
                };
                queue.extend(next.unwrap_or_default());
            }
        }
    }

    fn kill_subtree(&mut self, i: usize) {
        let mut stack = vec![i];
        while let Some(k) = stack.pop() {
            self.nodes[k].alive = false;
            stack.extend(self.children(k).collect::<Vec<_>>());
        }
    }

    /// All transversal intersections between live strokes of distinct trees.
    fn crossings(&self) -> Vec<(usize, usize, Point, f64)> {
        let live: Vec<usize> = (0..self.nodes.len()).filter(|&i| self.nodes[i].alive).collect();
        let mut out = Vec::new();
        for (k, &i) in live.iter().enumerate() {
            for &j in &live[k + 1..] {
                let (s, t) = (&self.nodes[i].stroke, &self.nodes[j].stroke);
                if s.tree == t.tree {
                    continue;
                }
                if let Some((x, sin)) = proper_intersection(s.a, s.b, t.a, t.b) {
                    out.push((i, j, x, sin));
                }
            }
        }
        out
    }

    fn subtree_size(&self, i: usize) -> usize {
        1 + self.children(i).map(|c| self.subtree_size(c)).sum::<usize>()
    }

    /// Finds one inter-tree defect and returns the stroke to prune: the one
    /// whose removal loses fewer strokes, ties going to the later tree.
    fn find_defect(&self) -> Option<usize> {
        let rank = |i: usize| (self.subtree_size(i), usize::MAX - self.nodes[i].stroke.tree);
        let later = |i: usize, j: usize| if rank(i) < rank(j) { i } else { j };
        let live: Vec<usize> = (0..self.nodes.len()).filter(|&i| self.nodes[i].alive).collect();
        let crossings = self.crossings();
        let crossing_pairs: std::collections::HashSet<(usize, usize)> =
            crossings.iter().map(|&(i, j, _, _)| (i, j)).collect();

        for &(i, j, x, sin) in &crossings {
            let (s, t) = (&self.nodes[i].stroke, &self.nodes[j].stroke);
            let arm = s.width.max(t.width) + 3.0;
            let ends_ok = [(i, s.a, false), (i, s.b, true), (j, t.a, false), (j, t.b, true)]
                .iter()
                .all(|&(n, e, is_end)| {
                    let need = if is_end && self.is_tip(n) { arm } else { 0.0 };
                    dist(x, e) >= need
                });
            if sin < 0.5 || !ends_ok || !self.in_frame(x, 3.0) {
                return Some(later(i, j));
            }
        }
        // Strokes of different trees must either cross cleanly or keep clear.
        for (k, &i) in live.iter().enumerate() {
            for &j in &live[k + 1..] {
                let (s, t) = (&self.nodes[i].stroke, &self.nodes[j].stroke);
                if s.tree == t.tree || crossing_pairs.contains(&(i, j)) {
                    continue;
                }
                // A stroke passing through a joint sits close to both strokes
                // that meet there while crossing only one of them.
                let via_neighbour = |p: usize, q: usize| {
                    crossings.iter().any(|&(c1, c2, _, _)| {
                        (c1 == q && self.adjacent(c2, p)) || (c2 == q && self.adjacent(c1, p))
                    })
                };
                if via_neighbour(i, j) || via_neighbour(j, i) {
                    continue;
                }
                if segment_distance(s.a, s.b, t.a, t.b) < (s.width + t.width) / 2.0 + 2.0 {
                    return Some(later(i, j));
                }
            }
        }
        // Junction spacing: crossings against each other and bifurcations.
        let bifs = self.bifurcations();
        let sep = self.cfg.min_junction_separation;
        for (k, &(i, j, x, _)) in crossings.iter().enumerate() {
            for &(i2, j2, y, _) in &crossings[k + 1..] {
                if dist(x, y) < sep {
                    let a = later(i, j);
                    let b = later(i2, j2);
                    return Some(later(a, b));
                }
            }
            for &(bi, p) in &bifs {
                if dist(x, p) < sep {
                    let c = later(i, j);
                    // Pruning one branch makes the split point disappear.
                    let branch = self.children(bi).last().expect("bifurcation has children");
                    return Some(later(c, branch));
                }
            }
        }
        for (k, &(bi, p)) in bifs.iter().enumerate() {
            for &(bj, q) in &bifs[k + 1..] {
                if dist(p, q) < sep {
                    let bi = self.children(bi).last().expect("bifurcation has children");
                    let bj = self.children(bj).last().expect("bifurcation has children");
                    return Some(later(bi, bj));
                }
            }
        }
        None
    }

    fn resolve(&mut self) {
        while let Some(victim) = self.find_defect() {
            self.kill_subtree(victim);
        }
    }
}

/// Renders a phantom sample; identical configs give bitwise-identical output.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let (h, w) = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let faz_center = (
        (w as f64 - 1.0) / 2.0 + rng.random_range(-2.0..=2.0),
        (h as f64 - 1.0) / 2.0 + rng.random_range(-2.0..=2.0),
    );
    let mut grower = Grower {
        cfg,
        rng,
        nodes: Vec::new(),
        faz_center,
    };
    grower.grow();
    grower.resolve();

    let mut junctions: Vec<(Point, JunctionKind)> = grower
        .bifurcations()
        .into_iter()
        .map(|(_, p)| (p, JunctionKind::Bifurcation))
        .collect();
    junctions.extend(grower.crossings().into_iter().map(|(_, _, x, _)| (x, JunctionKind::Crossing)));
    let strokes: Vec<Stroke> = grower.nodes.iter().filter(|n| n.alive).map(|n| n.stroke).collect();
    if strokes.is_empty() {
        return Err(Error::Generation("no vessel stroke could be placed".into()));
    }
    let mut rng = grower.rng;

    // Vessel intensity with a one-pixel anti-aliased rim, and the exact mask.
    let mut vessel = Image::zeros((h, w));
    let mut vessel_mask = BinaryMask::zeros((h, w));
    for s in &strokes {
        let r = s.width / 2.0;
        let pad = r + 1.5;
        let x0 = (s.a.0.min(s.b.0) - pad).floor().max(0.0) as usize;
        let x1 = ((s.a.0.max(s.b.0) + pad).ceil() as usize).min(w - 1);
        let y0 = (s.a.1.min(s.b.1) - pad).floor().max(0.0) as usize;
        let y1 = ((s.a.1.max(s.b.1) + pad).ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = point_segment_distance((x as f64, y as f64), s.a, s.b);
                if d <= r {
                    vessel_mask[[y, x]] = 1;
                }
                let v = (1.0 - (d - r)).clamp(0.0, 1.0) as f32;
                if v > vessel[[y, x]] {
                    vessel[[y, x]] = v;
                }
            }
        }
    }

    let in_faz = |x: usize, y: usize| dist((x as f64, y as f64), faz_center) <= cfg.faz_radius;
    let faz_mask = BinaryMask::from_shape_fn((h, w), |(y, x)| u8::from(in_faz(x, y)));

    // Capillary bed: box-blurred speckle, absent inside the FAZ.
    let speckle = Array2::from_shape_fn((h, w), |_| rng.random::<f32>());
    let capillary = Array2::from_shape_fn((h, w), |(y, x)| {
        if in_faz(x, y) {
            return 0.0;
        }
        let mut acc = 0.0;
        let mut n = 0.0;
        for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                acc += speckle[[yy, xx]];
                n += 1.0;
            }
        }
        0.15 + 0.35 * acc / n
    });

    let quantize = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    let mut svc = Image::zeros((h, w));
    let mut dvc = Image::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = vessel[[y, x]];
            let c = capillary[[y, x]];
            let d = dist((x as f64, y as f64), faz_center);
            let attenuation = ((d - cfg.faz_radius) / (2.0 * cfg.faz_radius)).clamp(0.0, 1.0) as f32;
            let n1 = rng.random::<f32>() - 0.5;
            let n2 = rng.random::<f32>() - 0.5;
            svc[[y, x]] = quantize(0.9 * v + 0.25 * c * (1.0 - v) + 0.04 * n1);
            dvc[[y, x]] = quantize(0.35 * v * attenuation + 0.9 * c + 0.04 * n2);
        }
    }
    let ivc = ndarray::Zip::from(&svc).and(&dvc).map_collect(|&a, &b| a.max(b));

    // Rendering never paints inside the FAZ: strokes keep a clearance of
    // half their width plus two pixels.
    debug_assert!(ndarray::Zip::from(&vessel_mask)
        .and(&faz_mask)
        .all(|&v, &f| v & f == 0));

    let junctions = junctions
        .into_iter()
        .map(|(p, kind)| Junction::new(p.0.round() as usize, p.1.round() as usize, kind))
        .collect();

    let sample = Sample {
        id: format!("phantom_{:06}", cfg.rng_seed),
        triplet: EnfaceTriplet { ivc, svc, dvc },
        annotations: AnnotationSet {
            vessel_mask,
            faz_mask,
            junctions,
        },
    };
    sample.annotations.validate((h, w))?;
    Ok(Phantom {
        sample,
        strokes,
        faz_center,
    })
}
