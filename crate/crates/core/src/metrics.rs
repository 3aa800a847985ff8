//! Segmentation and junction evaluation.
//!
//! Undefined ratios (zero denominators) are `None` and serialize as null;
//! they are never silently folded into 0.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, DecodeParams};
use crate::data::{binarize, BinaryMask, Junction, JunctionKind};
use crate::error::{Error, Result};
use crate::network::NetworkOutput;

pub const DEFAULT_TOLERANCE: f64 = 5.0;
pub const DEFAULT_SEG_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(Error::Geometry(format!(
            "prediction is {:?} but ground truth is {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`, with two empty masks scoring 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let den = 2 * c.tp + c.fp + c.fn_;
    Ok(if den == 0 { 1.0 } else { (2 * c.tp) as f64 / den as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaccDetail {
    pub value: f64,
    /// `None` when the side was omitted.
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    /// True when one side had no ground-truth pixels and could not be scored
    /// by convention, so `value` is the other side alone.
    pub one_sided: bool,
}

/// Mean of TPR and TNR.
///
/// When a class is absent from the ground truth its rate is 1 if the
/// prediction also never claims that class; otherwise the side is omitted
/// and the result is flagged as one-sided.
pub fn bacc_detail(pred: &BinaryMask, gt: &BinaryMask) -> Result<BaccDetail> {
    let c = confusion(pred, gt)?;
    if c.total() == 0 {
        return Err(Error::Geometry("cannot score an empty image".into()));
    }
    let side = |hit: u64, miss: u64, false_claims: u64| match hit + miss {
        0 if false_claims == 0 => Some(1.0),
        0 => None,
        n => Some(hit as f64 / n as f64),
    };
    let tpr = side(c.tp, c.fn_, c.fp);
    let tnr = side(c.tn, c.fp, c.fn_);
    let (value, one_sided) = match (tpr, tnr) {
        (Some(a), Some(b)) => ((a + b) / 2.0, false),
        (Some(a), None) | (None, Some(a)) => (a, true),
        (None, None) => unreachable!("a non-empty image has at least one ground-truth class"),
    };
    Ok(BaccDetail { value, tpr, tnr, one_sided })
}

pub fn bacc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(bacc_detail(pred, gt)?.value)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchStrategy {
    /// Maximum number of pairs, then minimum total distance.
    #[default]
    Optimal,
    /// Nearest pairs first.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `(pred_index, gt_index, distance)`, sorted by `pred_index`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
    pub tolerance: f64,
}

impl Matching {
    fn from_pairs(mut pairs: Vec<(usize, usize, f64)>, n_pred: usize, n_gt: usize, tolerance: f64) -> Self {
        pairs.sort_by_key(|p| p.0);
        let mut pred_used = vec![false; n_pred];
        let mut gt_used = vec![false; n_gt];
        for &(p, g, _) in &pairs {
            pred_used[p] = true;
            gt_used[g] = true;
        }
        let free = |used: Vec<bool>| used.iter().enumerate().filter(|(_, &u)| !u).map(|(i, _)| i).collect();
        Self {
            pairs,
            unmatched_pred: free(pred_used),
            unmatched_gt: free(gt_used),
            tolerance,
        }
    }

    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }
}

/// One-to-one matching of predictions to ground truth within `tol` pixels
/// (inclusive), ignoring class.
pub fn match_junctions(pred: &[Junction], gt: &[Junction], tol: f64) -> Matching {
    match_junctions_with(pred, gt, tol, MatchStrategy::Optimal)
}

pub fn match_junctions_with(pred: &[Junction], gt: &[Junction], tol: f64, strategy: MatchStrategy) -> Matching {
    let pairs = match strategy {
        MatchStrategy::Greedy => greedy_pairs(pred, gt, tol),
        MatchStrategy::Optimal => optimal_pairs(pred, gt, tol),
    };
    Matching::from_pairs(pairs, pred.len(), gt.len(), tol)
}

fn candidates(pred: &[Junction], gt: &[Junction], tol: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let d = p.distance(g);
            if d <= tol {
                out.push((i, j, d));
            }
        }
    }
    out
}

fn greedy_pairs(pred: &[Junction], gt: &[Junction], tol: f64) -> Vec<(usize, usize, f64)> {
    let mut cand = candidates(pred, gt, tol);
    cand.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut out = Vec::new();
    for (i, j, d) in cand {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            out.push((i, j, d));
        }
    }
    out
}

fn optimal_pairs(pred: &[Junction], gt: &[Junction], tol: f64) -> Vec<(usize, usize, f64)> {
    let cand = candidates(pred, gt, tol);
    if cand.is_empty() {
        return Vec::new();
    }
    // Only points with some partner within tolerance take part.
    let mut rows: Vec<usize> = cand.iter().map(|c| c.0).collect();
    let mut cols: Vec<usize> = cand.iter().map(|c| c.1).collect();
    rows.sort_unstable();
    rows.dedup();
    cols.sort_unstable();
    cols.dedup();
    let transpose = rows.len() > cols.len();
    let (n, m) = if transpose { (cols.len(), rows.len()) } else { (rows.len(), cols.len()) };

    // A forbidden pair costs more than any complete set of allowed pairs, so
    // the minimum-cost assignment first maximizes the number of real pairs.
    // The tiny index term prefers lower prediction indices among ties.
    let forbidden = (n as f64 + 1.0) * (tol + 1.0) + 1.0;
    let tie = 1e-9 / (pred.len() as f64 + 1.0);
    let mut cost = vec![vec![forbidden; m]; n];
    for &(i, j, d) in &cand {
        let r = rows.binary_search(&i).unwrap();
        let c = cols.binary_search(&j).unwrap();
        let v = d + tie * i as f64;
        if transpose {
            cost[c][r] = v;
        } else {
            cost[r][c] = v;
        }
    }
    let assignment = hungarian(&cost);
    let mut out = Vec::new();
    for (r, c) in assignment.into_iter().enumerate() {
        if cost[r][c] >= forbidden {
            continue;
        }
        let (pi, gi) = if transpose { (rows[c], cols[r]) } else { (rows[r], cols[c]) };
        out.push((pi, gi, pred[pi].distance(&gt[gi])));
    }
    out
}

/// Minimum-cost assignment of every row to a distinct column (`n <= m`).
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row assigned to column j (1-based, 0 = none).
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub dice: Option<f64>,
    pub bacc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallF1 {
    pub re: Option<f64>,
    pub f1: Option<f64>,
}

fn recall_f1(tp: usize, fp: usize, fn_: usize) -> RecallF1 {
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let re = ratio(tp, tp + fn_);
    let pr = ratio(tp, tp + fp);
    let f1 = match (pr, re) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    RecallF1 { re, f1 }
}

pub fn detection_metrics(m: &Matching) -> RecallF1 {
    recall_f1(m.pairs.len(), m.unmatched_pred.len(), m.unmatched_gt.len())
}

/// Bifurcation is the positive class. Matched pairs contribute by their two
/// labels; unmatched bifurcations count as misses or false alarms.
pub fn classification_metrics(m: &Matching, pred: &[Junction], gt: &[Junction]) -> RecallF1 {
    use JunctionKind::*;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for &(p, g, _) in &m.pairs {
        match (pred[p].kind, gt[g].kind) {
            (Bifurcation, Bifurcation) => tp += 1,
            (Crossing, Bifurcation) => fn_ += 1,
            (Bifurcation, Crossing) => fp += 1,
            (Crossing, Crossing) => {}
        }
    }
    fn_ += m.unmatched_gt.iter().filter(|&&g| gt[g].kind == Bifurcation).count();
    fp += m.unmatched_pred.iter().filter(|&&p| pred[p].kind == Bifurcation).count();
    recall_f1(tp, fp, fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub decode: DecodeParams,
    pub seg_threshold: f32,
    pub tolerance: f64,
    pub strategy: MatchStrategy,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            decode: DecodeParams::default(),
            seg_threshold: DEFAULT_SEG_THRESHOLD,
            tolerance: DEFAULT_TOLERANCE,
            strategy: MatchStrategy::Optimal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rv: SegScores,
    pub faz: SegScores,
    pub rvj_detection: RecallF1,
    pub rvj_classification: RecallF1,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 8] = [
        "rv_dice",
        "rv_bacc",
        "faz_dice",
        "faz_bacc",
        "rvj_det_re",
        "rvj_det_f1",
        "rvj_cls_re",
        "rvj_cls_f1",
    ];

    /// Values in report column order.
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            self.rv.dice,
            self.rv.bacc,
            self.faz.dice,
            self.faz.bacc,
            self.rvj_detection.re,
            self.rvj_detection.f1,
            self.rvj_classification.re,
            self.rvj_classification.f1,
        ]
    }
}

fn seg_scores(prob: &crate::data::Image, gt: &BinaryMask, threshold: f32) -> Result<SegScores> {
    let pred = binarize(prob.view(), threshold);
    Ok(SegScores {
        dice: Some(dice(&pred, gt)?),
        bacc: Some(bacc(&pred, gt)?),
    })
}

pub fn evaluate_sample(
    output: &NetworkOutput,
    ann: &crate::data::AnnotationSet,
    decode: &DecodeParams,
    seg_threshold: f32,
) -> Result<MetricsReport> {
    let p = EvalParams {
        decode: *decode,
        seg_threshold,
        ..Default::default()
    };
    evaluate_with(output, ann, &p)
}

pub fn evaluate_with(output: &NetworkOutput, ann: &crate::data::AnnotationSet, p: &EvalParams) -> Result<MetricsReport> {
    let pred = codec::decode(
        output.rvj_heatmap.view(),
        output.rvj_grid.view(),
        output.cell_size,
        &p.decode,
    );
    let m = match_junctions_with(&pred, &ann.junctions, p.tolerance, p.strategy);
    Ok(MetricsReport {
        rv: seg_scores(&output.rv_prob, &ann.vessel_mask, p.seg_threshold)?,
        faz: seg_scores(&output.faz_prob, &ann.faz_mask, p.seg_threshold)?,
        rvj_detection: detection_metrics(&m),
        rvj_classification: classification_metrics(&m, &pred, &ann.junctions),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
    /// Number of samples where the value was defined.
    pub n: usize,
}

/// Column-wise mean and std over the defined values.
pub fn aggregate(reports: &[MetricsReport]) -> [Summary; 8] {
    std::array::from_fn(|k| {
        let xs: Vec<f64> = reports.iter().filter_map(|r| r.values()[k]).collect();
        if xs.is_empty() {
            return Summary { mean: None, std: None, n: 0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Summary {
            mean: Some(mean),
            std: Some(var.sqrt()),
            n: xs.len(),
        }
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV with one row per sample, then `mean` and `std` rows. Undefined values
/// are empty cells.
pub fn write_report_csv<W: Write>(out: W, rows: &[(String, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample"];
    header.extend(MetricsReport::COLUMNS);
    w.write_record(&header)?;
    for (id, r) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(r.values().map(cell));
        w.write_record(&rec)?;
    }
    let summary = aggregate(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    let mut mean = vec!["mean".to_string()];
    mean.extend(summary.iter().map(|s| cell(s.mean)));
    let mut std = vec!["std".to_string()];
    std.extend(summary.iter().map(|s| cell(s.std)));
    w.write_record(&mean)?;
    w.write_record(&std)?;
    w.flush()?;
    Ok(())
}

pub fn save_report(path: &Path, rows: &[(String, MetricsReport)]) -> Result<()> {
    write_report_csv(std::fs::File::create(path)?, rows)
}

/// `mean ± std` in percent, as printed in result tables.
pub fn format_mean_std(s: &Summary) -> String {
    match (s.mean, s.std) {
        (Some(m), Some(sd)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd),
        _ => "n/a".into(),
    }
}
