use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::trainer::{train, TrainOptions};
use crate::codec::decode;
use crate::data::{
    binarize, generate_phantom, load_junctions, load_sample, load_triplet, read_gray_png, save_junctions, save_sample,
    write_gray_png, Dataset, JunctionKind, PhantomConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_with, format_mean_std, save_report, EvalParams, MetricsReport};
use crate::network::{load_checkpoint, FusionMode, InputMode, Network};
use crate::par;

pub const REPORT_FILE: &str = "metrics.csv";

/// Loads a checkpoint, refusing it when it was trained for another input mode.
pub fn load_network(checkpoint: &Path, input_mode: Option<InputMode>) -> Result<Network> {
    let ck = load_checkpoint(checkpoint)?;
    if let Some(want) = input_mode {
        let have = ck.manifest.network.encoder.input_mode;
        if have != want {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint was trained with input mode {}, requested {}",
                have.name(),
                want.name()
            )));
        }
    }
    ck.network(None)
}

/// Evaluation parameters from the training config stored in a checkpoint,
/// or the defaults when it carries none.
pub fn checkpoint_eval_params(checkpoint: &Path) -> Result<EvalParams> {
    let ck = load_checkpoint(checkpoint)?;
    Ok(ck
        .manifest
        .extra
        .get("config")
        .and_then(|c| serde_json::from_value::<TrainConfig>(c.clone()).ok())
        .unwrap_or_default()
        .eval_params())
}

/// Per-sample reports in split order.
pub fn evaluate_network(net: &Network, dataset: &Dataset, split: &str, params: &EvalParams) -> Result<Vec<(String, MetricsReport)>> {
    let ids = dataset.split(split)?;
    if ids.is_empty() {
        return Err(Error::NoData(format!("split `{split}` is empty")));
    }
    par::map_indexed(ids.len(), |i| {
        let s = dataset.load(&ids[i])?;
        let out = net.forward(&s.triplet)?;
        Ok((s.id.clone(), evaluate_with(&out, &s.annotations, params)?))
    })
    .into_iter()
    .collect()
}

/// Evaluates `checkpoint` on a split and writes the CSV report to `out`.
pub fn evaluate(
    checkpoint: &Path,
    dataset_root: &Path,
    split: &str,
    input_mode: Option<InputMode>,
    params: &EvalParams,
    out: &Path,
) -> Result<Vec<(String, MetricsReport)>> {
    let net = load_network(checkpoint, input_mode)?;
    let rows = evaluate_network(&net, &Dataset::open(dataset_root)?, split, params)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_report(out, &rows)?;
    Ok(rows)
}

/// Writes `rv_prob.png`, `faz_prob.png`, `heatmap.png` and `junctions.json`
/// for the triplet in `sample_dir`.
pub fn predict(checkpoint: &Path, sample_dir: &Path, out_dir: &Path, params: &EvalParams) -> Result<()> {
    let net = load_network(checkpoint, None)?;
    let triplet = load_triplet(sample_dir)?;
    let out = net.forward(&triplet)?;
    fs::create_dir_all(out_dir)?;
    write_gray_png(&out_dir.join("rv_prob.png"), out.rv_prob.view())?;
    write_gray_png(&out_dir.join("faz_prob.png"), out.faz_prob.view())?;
    write_gray_png(&out_dir.join("heatmap.png"), out.rvj_heatmap.view())?;
    let junctions = decode(out.rvj_heatmap.view(), out.rvj_grid.view(), out.cell_size, &params.decode);
    save_junctions(&out_dir.join("junctions.json"), &junctions)
}

const VESSEL: [f32; 3] = [0.95, 0.2, 0.2];
const FAZ_AGREE: [f32; 3] = [0.2, 0.85, 0.3];
const FAZ_OVER: [f32; 3] = [1.0, 0.85, 0.1];
const FAZ_UNDER: [f32; 3] = [0.2, 0.45, 1.0];
const BIFURCATION: [u8; 3] = [255, 0, 255];
const CROSSING: [u8; 3] = [0, 255, 255];

fn blend(px: &mut Rgb<u8>, tint: [f32; 3], alpha: f32) {
    for (c, t) in px.0.iter_mut().zip(tint) {
        *c = ((1.0 - alpha) * *c as f32 + alpha * 255.0 * t).round() as u8;
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

/// Overlay of a prediction on the sample's SVC image: predicted vessels in
/// red, FAZ agreement in green with over-segmentation in yellow and
/// under-segmentation in blue, bifurcations as magenta squares and crossings
/// as cyan crosses.
pub fn visualize(sample_dir: &Path, pred_dir: &Path, out: &Path) -> Result<()> {
    let sample = load_sample(sample_dir)?;
    let (h, w) = sample.dim();
    let rv = read_gray_png(&pred_dir.join("rv_prob.png"))?;
    let faz = read_gray_png(&pred_dir.join("faz_prob.png"))?;
    if rv.dim() != (h, w) || faz.dim() != (h, w) {
        return Err(Error::Geometry(format!(
            "prediction is {:?}, sample is {:?}",
            rv.dim(),
            (h, w)
        )));
    }
    let junctions = load_junctions(&pred_dir.join("junctions.json"))?;
    let rv = binarize(rv.view(), 0.5);
    let faz = binarize(faz.view(), 0.5);
    let gt_faz = &sample.annotations.faz_mask;

    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (sample.triplet.svc[[y as usize, x as usize]] * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel_mut(x as u32, y as u32);
            if rv[[y, x]] > 0 {
                blend(px, VESSEL, 0.55);
            }
            match (faz[[y, x]] > 0, gt_faz[[y, x]] > 0) {
                (true, true) => blend(px, FAZ_AGREE, 0.45),
                (true, false) => blend(px, FAZ_OVER, 0.6),
                (false, true) => blend(px, FAZ_UNDER, 0.6),
                (false, false) => {}
            }
        }
    }
    for j in &junctions {
        let (x, y) = (j.x as i64, j.y as i64);
        match j.kind {
            JunctionKind::Bifurcation => {
                for d in -2..=2 {
                    for e in [-2, 2] {
                        put(&mut img, x + d, y + e, BIFURCATION);
                        put(&mut img, x + e, y + d, BIFURCATION);
                    }
                }
            }
            JunctionKind::Crossing => {
                for d in -3..=3 {
                    put(&mut img, x + d, y + d, CROSSING);
                    put(&mut img, x + d, y - d, CROSSING);
                }
            }
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    img.save(out)?;
    Ok(())
}

/// Split assignment of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Writes `count` phantoms (seeds `base.rng_seed + i`) under `out`, with
/// `all`, `train` and `test` split files. The last fifth (rounded down) of
/// the samples is held out for `test`; the rest is `train`.
pub fn synth(count: usize, base: &PhantomConfig, out: &Path) -> Result<SynthSummary> {
    if count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    base.validate()?;
    fs::create_dir_all(out)?;
    let ids: Vec<String> = par::map_indexed(count, |i| {
        let cfg = PhantomConfig {
            rng_seed: base.rng_seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let mut p = generate_phantom(&cfg)?;
        p.sample.id = format!("phantom_{i:04}");
        save_sample(out, &p.sample)?;
        Ok(p.sample.id)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let ds = Dataset::open(out)?;
    let n_test = count / 5;
    let (train, test) = ids.split_at(count - n_test);
    ds.write_split("all", &ids)?;
    ds.write_split("train", train)?;
    ds.write_split("test", test)?;
    Ok(SynthSummary {
        root: out.to_path_buf(),
        train: train.to_vec(),
        test: test.to_vec(),
    })
}

/// One configuration compared by [`ablate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    Fusion(FusionMode),
    Input(InputMode),
}

impl AblationMode {
    pub fn name(self) -> String {
        match self {
            AblationMode::Fusion(m) => m.name().to_string(),
            AblationMode::Input(m) => format!("input-{}", m.name()),
        }
    }

    fn label(self) -> String {
        match self {
            AblationMode::Fusion(m) => m.name().to_uppercase(),
            AblationMode::Input(InputMode::MultiEnface) => "Multi-input".into(),
            AblationMode::Input(InputMode::SingleIvc) => "Single-input (IVC)".into(),
            AblationMode::Input(InputMode::Triplicate) => "Triplicate input".into(),
        }
    }

    fn apply(self, cfg: &mut TrainConfig) {
        match self {
            AblationMode::Fusion(m) => cfg.fusion_mode = m,
            AblationMode::Input(m) => cfg.input_mode = m,
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if let Ok(m) = s.parse::<FusionMode>() {
            return Ok(AblationMode::Fusion(m));
        }
        s.trim_start_matches("input-")
            .parse::<InputMode>()
            .map(AblationMode::Input)
            .map_err(|_| format!("unknown mode `{s}` (fusion: vgm|max|min|avg|sum, input: multi|single|triplicate)"))
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub checkpoint: PathBuf,
    pub reports: Vec<(String, MetricsReport)>,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub table: String,
    pub table_path: PathBuf,
}

pub const TABLE_HEADER: [&str; 9] = [
    "Mode",
    "RV DICE",
    "RV BACC",
    "FAZ DICE",
    "FAZ BACC",
    "RVJ Det. RE",
    "RVJ Det. F1",
    "RVJ Cls. RE",
    "RVJ Cls. F1",
];

/// Markdown table with one `mean ± std` row (percent) per mode.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "| {} |", TABLE_HEADER.join(" | "));
    let _ = writeln!(t, "|{}", "---|".repeat(TABLE_HEADER.len()));
    for r in rows {
        let reports: Vec<MetricsReport> = r.reports.iter().map(|x| x.1).collect();
        let cells: Vec<String> = aggregate(&reports).iter().map(format_mean_std).collect();
        let _ = writeln!(t, "| {} | {} |", r.mode.label(), cells.join(" | "));
    }
    t
}

/// Trains and evaluates one run per mode. Each run writes to
/// `<checkpoint_dir>/ablate_<mode>/`; the table goes to
/// `<checkpoint_dir>/ablation.md`.
pub fn ablate(cfg: &TrainConfig, modes: &[AblationMode], verbose: bool) -> Result<AblationResult> {
    if modes.is_empty() {
        return Err(Error::Config("no ablation modes requested".into()));
    }
    let dataset = Dataset::open(&cfg.dataset_root)?;
    let mut rows = Vec::new();
    for &mode in modes {
        let mut run = cfg.clone();
        mode.apply(&mut run);
        run.checkpoint_dir = cfg.checkpoint_dir.join(format!("ablate_{}", mode.name()));
        if verbose {
            eprintln!("== {} ==", mode.label());
        }
        let outcome = train(
            &run,
            &TrainOptions {
                verbose,
                ..Default::default()
            },
        )?;
        let reports = evaluate_network(&outcome.network, &dataset, &run.eval_split, &run.eval_params())?;
        save_report(&run.checkpoint_dir.join(REPORT_FILE), &reports)?;
        rows.push(AblationRow {
            mode,
            checkpoint: outcome.checkpoint,
            reports,
        });
    }
    let table = ablation_table(&rows);
    let table_path = cfg.checkpoint_dir.join("ablation.md");
    fs::write(&table_path, &table)?;
    Ok(AblationResult { rows, table, table_path })
}
