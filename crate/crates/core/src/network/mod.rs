//! The three-encoder fusion network and its task heads.
//!
//! Each en-face layer has its own first convolution block (the stem); every
//! later encoder layer is a single physically shared module that processes
//! the three stem outputs stacked along the batch axis. Sharing is therefore
//! structural: there is only one copy of those weights to update.

mod checkpoint;
mod fuse;

use ndarray::{concatenate, s, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{grid_len, DEFAULT_CELL_SIZE};
use crate::data::{EnfaceTriplet, Image};
use crate::error::{Error, Result};
use crate::nn::{
    resize_bilinear, resize_bilinear_backward, BasicBlock, Bottleneck, Conv2d, ConvBnRelu, Init, Module, Param,
    Sigmoid, Tensor,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, CHECKPOINT_VERSION};
pub use fuse::{fuse, fuse_backward, FusionMode};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    #[default]
    Resnet50,
    /// Four basic residual stages of widths 16, 32, 64, 128.
    Reduced,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputMode {
    /// IVC, SVC and DVC, one per encoder.
    #[default]
    #[serde(rename = "multi", alias = "multi_enface")]
    MultiEnface,
    /// IVC fed to all three encoders.
    #[serde(rename = "single", alias = "single_ivc")]
    SingleIvc,
    /// One image fed to all three encoders, which differ only in how their
    /// first layer was initialized.
    #[serde(rename = "triplicate")]
    Triplicate,
}

impl InputMode {
    pub fn name(self) -> &'static str {
        match self {
            InputMode::MultiEnface => "multi",
            InputMode::SingleIvc => "single",
            InputMode::Triplicate => "triplicate",
        }
    }
}

impl std::str::FromStr for InputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "multi" | "multi_enface" => Ok(InputMode::MultiEnface),
            "single" | "single_ivc" => Ok(InputMode::SingleIvc),
            "triplicate" => Ok(InputMode::Triplicate),
            _ => Err(format!("unknown input mode `{s}` (expected multi, single or triplicate)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Rv,
    Faz,
    Rvj,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Rv, Task::Faz, Task::Rvj];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub topology: Topology,
    /// Channels of every fused feature map `F_i`.
    pub n_ch: usize,
    pub input_mode: InputMode,
    /// Per-encoder stem initialization; `None` picks He for all three, or
    /// random / Xavier / He in triplicate mode.
    pub first_layer_init: Option<[Init; 3]>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            topology: Topology::Resnet50,
            n_ch: 64,
            input_mode: InputMode::MultiEnface,
            first_layer_init: None,
        }
    }
}

impl EncoderConfig {
    pub fn inits(&self) -> [Init; 3] {
        self.first_layer_init.unwrap_or(match self.input_mode {
            InputMode::Triplicate => [Init::Random, Init::Xavier, Init::He],
            _ => [Init::He; 3],
        })
    }

    /// Output channels of the stem.
    pub fn stem_channels(&self) -> usize {
        match self.topology {
            Topology::Resnet50 => 64,
            Topology::Reduced => 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    pub fusion_mode: FusionMode,
    /// Width of the voting gate convolutions.
    pub gate_channels: usize,
    /// Width of the task head convolutions.
    pub head_channels: usize,
    /// Grid cell edge in pixels; must be a power of two.
    pub cell_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fusion_mode: FusionMode::Vgm,
            gate_channels: 32,
            head_channels: 32,
            cell_size: DEFAULT_CELL_SIZE,
        }
    }
}

impl NetworkConfig {
    /// Small configuration for tests and desk-scale runs.
    pub fn reduced(n_ch: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                topology: Topology::Reduced,
                n_ch,
                ..Default::default()
            },
            gate_channels: n_ch,
            head_channels: n_ch,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.n_ch == 0 || self.gate_channels == 0 || self.head_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !self.cell_size.is_power_of_two() || self.cell_size < 2 {
            return Err(Error::Config(format!("cell_size {} is not a power of two >= 2", self.cell_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Block {
    Basic(BasicBlock),
    Bottleneck(Bottleneck),
}

impl Block {
    fn infer(&self, x: &Tensor) -> Tensor {
        match self {
            Block::Basic(b) => b.infer(x),
            Block::Bottleneck(b) => b.infer(x),
        }
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        match self {
            Block::Basic(b) => b.forward(x),
            Block::Bottleneck(b) => b.forward(x),
        }
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        match self {
            Block::Basic(b) => b.backward(dy),
            Block::Bottleneck(b) => b.backward(dy),
        }
    }

    fn module(&self) -> &dyn Module {
        match self {
            Block::Basic(b) => b,
            Block::Bottleneck(b) => b,
        }
    }

    fn module_mut(&mut self) -> &mut dyn Module {
        match self {
            Block::Basic(b) => b,
            Block::Bottleneck(b) => b,
        }
    }
}

/// Residual stages as `(blocks, output channels)`; every stage halves the
/// resolution.
fn build_stages(topology: Topology, cin: usize, rng: &mut ChaCha8Rng) -> Vec<(Vec<Block>, usize)> {
    let mut stages = Vec::new();
    let mut c = cin;
    match topology {
        Topology::Reduced => {
            for (k, width) in [16, 32, 64, 128].into_iter().enumerate() {
                let b = BasicBlock::new(&format!("encoder.stage{k}.0"), c, width, 2, rng);
                stages.push((vec![Block::Basic(b)], width));
                c = width;
            }
        }
        Topology::Resnet50 => {
            for (k, (depth, mid)) in [(3, 64), (4, 128), (6, 256), (3, 512)].into_iter().enumerate() {
                let blocks = (0..depth)
                    .map(|j| {
                        let stride = if j == 0 { 2 } else { 1 };
                        let b = Bottleneck::new(&format!("encoder.stage{k}.{j}"), c, mid, stride, rng);
                        c = mid * Bottleneck::EXPANSION;
                        Block::Bottleneck(b)
                    })
                    .collect();
                stages.push((blocks, c));
            }
        }
    }
    stages
}

/// Convolution blocks then a sigmoid output convolution.
#[derive(Debug, Clone)]
struct ConvStack {
    blocks: Vec<ConvBnRelu>,
    out: Conv2d,
    sigmoid: Sigmoid,
}

impl ConvStack {
    fn infer(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.infer(&y);
        }
        Sigmoid::infer(&self.out.infer(&y))
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        for b in &mut self.blocks {
            y = b.forward(&y);
        }
        let y = self.out.forward(&y);
        self.sigmoid.forward(&y)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let d = self.sigmoid.backward(dy);
        let mut d = self.out.backward(&d);
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        d
    }
}

impl Module for ConvStack {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.blocks.iter().for_each(|b| b.visit(f));
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.out.visit_mut(f);
    }
}

fn gate_net(name: &str, cin: usize, width: usize, rng: &mut ChaCha8Rng) -> ConvStack {
    ConvStack {
        blocks: (0..3)
            .map(|k| {
                let c = if k == 0 { cin } else { width };
                ConvBnRelu::new(&format!("{name}.block{k}"), c, width, 3, 1, Init::He, rng)
            })
            .collect(),
        out: Conv2d::same3(&format!("{name}.out"), width, 3, true, Init::Xavier, rng),
        sigmoid: Sigmoid::default(),
    }
}

fn prob_head(name: &str, cin: usize, width: usize, rng: &mut ChaCha8Rng) -> ConvStack {
    ConvStack {
        blocks: (0..2)
            .map(|k| {
                let c = if k == 0 { cin } else { width };
                ConvBnRelu::new(&format!("{name}.block{k}"), c, width, 3, 1, Init::He, rng)
            })
            .collect(),
        out: Conv2d::pointwise(&format!("{name}.out"), width, 1, true, Init::Xavier, rng),
        sigmoid: Sigmoid::default(),
    }
}

fn grid_head(name: &str, cin: usize, width: usize, cell_size: usize, rng: &mut ChaCha8Rng) -> ConvStack {
    let downs = cell_size.trailing_zeros() as usize;
    ConvStack {
        blocks: (0..downs)
            .map(|k| {
                let c = if k == 0 { cin } else { width };
                ConvBnRelu::new(&format!("{name}.down{k}"), c, width, 3, 2, Init::He, rng)
            })
            .collect(),
        out: Conv2d::pointwise(&format!("{name}.out"), width, 4, true, Init::Xavier, rng),
        sigmoid: Sigmoid::default(),
    }
}

/// Per-encoder fused features and stem activations, each `[B, ·, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatureSet {
    pub features: Vec<Tensor>,
    pub first_layer_outputs: Vec<Tensor>,
}

/// Batched predictions: maps are `[B, 1, H, W]`, the grid is `[B, 4, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub rv: Tensor,
    pub faz: Tensor,
    pub heatmap: Tensor,
    pub grid: Tensor,
}

impl BatchOutput {
    pub fn len(&self) -> usize {
        self.rv.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, i: usize, cell_size: usize) -> NetworkOutput {
        NetworkOutput {
            rv_prob: self.rv.slice(s![i, 0, .., ..]).to_owned(),
            faz_prob: self.faz.slice(s![i, 0, .., ..]).to_owned(),
            rvj_heatmap: self.heatmap.slice(s![i, 0, .., ..]).to_owned(),
            rvj_grid: self.grid.slice(s![i, .., .., ..]).permuted_axes([1, 2, 0]).to_owned(),
            cell_size,
        }
    }
}

/// Predictions for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    pub rv_prob: Image,
    pub faz_prob: Image,
    pub rvj_heatmap: Image,
    /// `[S, S, 4]` in the codec's channel layout.
    pub rvj_grid: Array3<f32>,
    pub cell_size: usize,
}

#[derive(Debug, Clone)]
struct Cache {
    batch: usize,
    size: (usize, usize),
    level_dims: Vec<(usize, usize)>,
    features: Vec<Tensor>,
    gates: Vec<Option<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    stems: Vec<ConvBnRelu>,
    stages: Vec<Vec<Block>>,
    /// 1x1 projections of the stem output and every stage output to `n_ch`.
    projections: Vec<Conv2d>,
    gates: Vec<ConvStack>,
    rv_head: ConvStack,
    faz_head: ConvStack,
    heatmap_head: ConvStack,
    grid_head: ConvStack,
    cache: Option<Cache>,
}

impl Network {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = &cfg.encoder;
        let c0 = enc.stem_channels();
        let stems = enc
            .inits()
            .iter()
            .enumerate()
            .map(|(i, &init)| ConvBnRelu::new(&format!("encoder{i}.stem"), 1, c0, 3, 1, init, &mut rng))
            .collect();
        let built = build_stages(enc.topology, c0, &mut rng);
        let mut level_channels = vec![c0];
        level_channels.extend(built.iter().map(|s| s.1));
        let projections = level_channels
            .iter()
            .enumerate()
            .map(|(k, &c)| Conv2d::pointwise(&format!("encoder.proj{k}"), c, enc.n_ch, true, Init::He, &mut rng))
            .collect();
        let gates = ["rv", "faz", "rvj"]
            .iter()
            .map(|t| gate_net(&format!("vgm.{t}"), 3 * c0, cfg.gate_channels, &mut rng))
            .collect();
        let (n, hc) = (enc.n_ch, cfg.head_channels);
        Ok(Self {
            stems,
            stages: built.into_iter().map(|s| s.0).collect(),
            projections,
            gates,
            rv_head: prob_head("head.rv", n, hc, &mut rng),
            faz_head: prob_head("head.faz", n, hc, &mut rng),
            heatmap_head: prob_head("head.rvj.heatmap", n, hc, &mut rng),
            grid_head: grid_head("head.rvj.grid", n, hc, cfg.cell_size, &mut rng),
            cfg,
            cache: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Switches the fusion operator; parameters are unaffected.
    pub fn set_fusion_mode(&mut self, mode: FusionMode) {
        self.cfg.fusion_mode = mode;
    }

    /// Packs triplets into the `[B, 3, H, W]` encoder input for this
    /// network's input mode.
    pub fn input_tensor(&self, triplets: &[&EnfaceTriplet]) -> Result<Tensor> {
        input_tensor(triplets, self.cfg.encoder.input_mode)
    }

    /// Parameters one encoder sees, in order: its own stem, then the shared
    /// layers.
    pub fn encoder_parameters(&self, i: usize) -> Vec<(String, ndarray::ArrayD<f32>)> {
        let mut out = Vec::new();
        self.stems[i].visit(&mut |p| out.push((p.name.clone(), p.value.clone())));
        let mut shared = Vec::new();
        self.visit_shared(&mut |p| shared.push((p.name.clone(), p.value.clone())));
        out.extend(shared);
        out
    }

    /// Number of parameters a design with three unshared encoders would have.
    pub fn unshared_parameter_count(&self) -> usize {
        let mut shared = 0;
        self.visit_shared(&mut |p| {
            if p.trainable {
                shared += p.len()
            }
        });
        self.num_trainable() + 2 * shared
    }

    fn visit_shared(&self, f: &mut dyn FnMut(&Param)) {
        for stage in &self.stages {
            stage.iter().for_each(|b| b.module().visit(f));
        }
        self.projections.iter().for_each(|p| p.visit(f));
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (b, c, h, w) = x.dim();
        if b == 0 || c != 3 || h == 0 || w == 0 {
            return Err(Error::Geometry(format!("expected [B, 3, H, W] input, got {:?}", x.dim())));
        }
        if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("input value {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Encoder pass in evaluation mode.
    pub fn encode(&self, x: &Tensor) -> Result<FusedFeatureSet> {
        self.check_input(x)?;
        let (b, _, h, w) = x.dim();
        let stem_out: Vec<Tensor> = (0..3)
            .map(|i| self.stems[i].infer(&x.slice(s![.., i..i + 1, .., ..]).to_owned()))
            .collect();
        let mut level = concatenate(Axis(0), &stem_out.iter().map(|t| t.view()).collect::<Vec<_>>())
            .expect("stem outputs share a shape");
        let mut fused = resize_bilinear(&self.projections[0].infer(&level), h, w);
        for (k, stage) in self.stages.iter().enumerate() {
            for blk in stage {
                level = blk.infer(&level);
            }
            fused += &resize_bilinear(&self.projections[k + 1].infer(&level), h, w);
        }
        Ok(FusedFeatureSet {
            features: split_batch(&fused, b),
            first_layer_outputs: stem_out,
        })
    }

    /// Gate of `task` from the three stem activations, `[B, 3, H, W]`.
    pub fn vgm_forward(&self, first_layer_outputs: &[Tensor], task: Task) -> Tensor {
        self.gates[task.index()].infer(&concat_channels(first_layer_outputs))
    }

    fn task_features(&self, fs: &FusedFeatureSet) -> Vec<Tensor> {
        let mode = self.cfg.fusion_mode;
        Task::ALL
            .iter()
            .map(|&t| {
                let gate = (mode == FusionMode::Vgm).then(|| self.vgm_forward(&fs.first_layer_outputs, t));
                fuse(gate.as_ref(), &fs.features, mode)
            })
            .collect()
    }

    pub fn rv_head(&self, m: &Tensor) -> Tensor {
        self.rv_head.infer(m)
    }

    pub fn faz_head(&self, m: &Tensor) -> Tensor {
        self.faz_head.infer(m)
    }

    /// Heatmap `[B, 1, H, W]` and grid `[B, 4, S, S]`.
    pub fn rvj_head(&self, m: &Tensor) -> (Tensor, Tensor) {
        (self.heatmap_head.infer(m), self.grid_head.infer(m))
    }

    /// Evaluation-mode forward pass; safe to call from several threads.
    pub fn infer(&self, x: &Tensor) -> Result<BatchOutput> {
        let fs = self.encode(x)?;
        let m = self.task_features(&fs);
        let (heatmap, grid) = self.rvj_head(&m[2]);
        Ok(BatchOutput {
            rv: self.rv_head(&m[0]),
            faz: self.faz_head(&m[1]),
            heatmap,
            grid,
        })
    }

    /// Evaluation-mode prediction for one triplet.
    pub fn forward(&self, triplet: &EnfaceTriplet) -> Result<NetworkOutput> {
        triplet.validate()?;
        let x = self.input_tensor(&[triplet])?;
        let out = self.infer(&x)?;
        Ok(out.sample(0, self.cfg.cell_size))
    }

    /// Training-mode forward pass (batch statistics) that records what
    /// [`Network::backward`] needs.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<BatchOutput> {
        self.check_input(x)?;
        let (b, _, h, w) = x.dim();
        let stem_out: Vec<Tensor> = (0..3)
            .map(|i| self.stems[i].forward(&x.slice(s![.., i..i + 1, .., ..]).to_owned()))
            .collect();
        let mut level = concatenate(Axis(0), &stem_out.iter().map(|t| t.view()).collect::<Vec<_>>())
            .expect("stem outputs share a shape");
        let mut level_dims = vec![(h, w)];
        let mut fused = resize_bilinear(&self.projections[0].forward(&level), h, w);
        for (k, stage) in self.stages.iter_mut().enumerate() {
            for blk in stage.iter_mut() {
                level = blk.forward(&level);
            }
            let (_, _, lh, lw) = level.dim();
            level_dims.push((lh, lw));
            fused += &resize_bilinear(&self.projections[k + 1].forward(&level), h, w);
        }
        let features = split_batch(&fused, b);

        let mode = self.cfg.fusion_mode;
        let gin = (mode == FusionMode::Vgm).then(|| concat_channels(&stem_out));
        let mut gates = Vec::new();
        let mut m = Vec::new();
        for t in Task::ALL {
            let gate = gin.as_ref().map(|g| self.gates[t.index()].forward(g));
            m.push(fuse(gate.as_ref(), &features, mode));
            gates.push(gate);
        }
        let out = BatchOutput {
            rv: self.rv_head.forward(&m[0]),
            faz: self.faz_head.forward(&m[1]),
            heatmap: self.heatmap_head.forward(&m[2]),
            grid: self.grid_head.forward(&m[2]),
        };
        self.cache = Some(Cache {
            batch: b,
            size: (h, w),
            level_dims,
            features,
            gates,
        });
        Ok(out)
    }

    /// Accumulates parameter gradients for the loss gradients `d` (same
    /// shapes as the outputs of the matching [`Network::forward_train`]).
    pub fn backward(&mut self, d: &BatchOutput) {
        let cache = self.cache.take().expect("backward without forward_train");
        let mode = self.cfg.fusion_mode;
        let mut dm = vec![self.rv_head.backward(&d.rv), self.faz_head.backward(&d.faz)];
        let mut d_rvj = self.heatmap_head.backward(&d.heatmap);
        d_rvj += &self.grid_head.backward(&d.grid);
        dm.push(d_rvj);

        let c0 = self.cfg.encoder.stem_channels();
        let (h, w) = cache.size;
        let b = cache.batch;
        let mut d_features: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(cache.features[0].raw_dim())).collect();
        let mut d_gin = Tensor::zeros((b, 3 * c0, h, w));
        for t in Task::ALL {
            let gate = cache.gates[t.index()].as_ref();
            let (df, dg) = fuse_backward(gate, &cache.features, mode, &dm[t.index()]);
            for (acc, d) in d_features.iter_mut().zip(&df) {
                *acc += d;
            }
            if let Some(dg) = dg {
                d_gin += &self.gates[t.index()].backward(&dg);
            }
        }

        let d_fused = concatenate(Axis(0), &d_features.iter().map(|t| t.view()).collect::<Vec<_>>())
            .expect("feature gradients share a shape");
        let mut d_levels: Vec<Tensor> = cache
            .level_dims
            .iter()
            .zip(self.projections.iter_mut())
            .map(|(&(lh, lw), proj)| proj.backward(&resize_bilinear_backward(&d_fused, lh, lw)))
            .collect();
        let mut d = d_levels.pop().expect("at least one level");
        for (k, stage) in self.stages.iter_mut().enumerate().rev() {
            for blk in stage.iter_mut().rev() {
                d = blk.backward(&d);
            }
            d += &d_levels[k];
        }
        for (i, stem) in self.stems.iter_mut().enumerate() {
            let mut di = d.slice(s![i * b..(i + 1) * b, .., .., ..]).to_owned();
            di += &d_gin.slice(s![.., i * c0..(i + 1) * c0, .., ..]);
            stem.backward(&di);
        }
    }

    /// Grid side length for an `h x w` input.
    pub fn grid_size(&self, h: usize, w: usize) -> (usize, usize) {
        (grid_len(h, self.cfg.cell_size), grid_len(w, self.cfg.cell_size))
    }
}

impl Module for Network {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.stems.iter().for_each(|s| s.visit(f));
        self.visit_shared(f);
        self.gates.iter().for_each(|g| g.visit(f));
        self.rv_head.visit(f);
        self.faz_head.visit(f);
        self.heatmap_head.visit(f);
        self.grid_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stems.iter_mut().for_each(|s| s.visit_mut(f));
        for stage in &mut self.stages {
            stage.iter_mut().for_each(|b| b.module_mut().visit_mut(f));
        }
        self.projections.iter_mut().for_each(|p| p.visit_mut(f));
        self.gates.iter_mut().for_each(|g| g.visit_mut(f));
        self.rv_head.visit_mut(f);
        self.faz_head.visit_mut(f);
        self.heatmap_head.visit_mut(f);
        self.grid_head.visit_mut(f);
    }
}

/// `[B, 3, H, W]` encoder input.
pub fn input_tensor(triplets: &[&EnfaceTriplet], mode: InputMode) -> Result<Tensor> {
    let first = triplets.first().ok_or_else(|| Error::NoData("empty batch".into()))?;
    let (h, w) = first.dim();
    let mut x = Tensor::zeros((triplets.len(), 3, h, w));
    for (b, t) in triplets.iter().enumerate() {
        if t.dim() != (h, w) {
            return Err(Error::Geometry(format!("batch mixes {:?} and {:?} images", (h, w), t.dim())));
        }
        let slots: [&Image; 3] = match mode {
            InputMode::MultiEnface => [&t.ivc, &t.svc, &t.dvc],
            InputMode::SingleIvc | InputMode::Triplicate => [&t.ivc; 3],
        };
        for (i, img) in slots.iter().enumerate() {
            x.slice_mut(s![b, i, .., ..]).assign(img);
        }
    }
    Ok(x)
}

fn split_batch(x: &Tensor, b: usize) -> Vec<Tensor> {
    (0..3).map(|i| x.slice(s![i * b..(i + 1) * b, .., .., ..]).to_owned()).collect()
}

fn concat_channels(xs: &[Tensor]) -> Tensor {
    concatenate(Axis(1), &xs.iter().map(|t| t.view()).collect::<Vec<_>>()).expect("maps share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::random_tensor;

    fn small(mode: InputMode) -> NetworkConfig {
        let mut cfg = NetworkConfig::reduced(4);
        cfg.encoder.input_mode = mode;
        cfg
    }

    fn triplet(h: usize, w: usize, seed: u64) -> EnfaceTriplet {
        let r = random_tensor((3, 1, h, w), seed).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        EnfaceTriplet::new(
            r.slice(s![0, 0, .., ..]).to_owned(),
            r.slice(s![1, 0, .., ..]).to_owned(),
            r.slice(s![2, 0, .., ..]).to_owned(),
        )
        .unwrap()
    }

    fn in_unit_interval(t: &Tensor) -> bool {
        t.iter().all(|&v| v > 0.0 && v < 1.0)
    }

    #[test]
    fn output_shapes_follow_input() {
        let net = Network::new(small(InputMode::MultiEnface), 0).unwrap();
        for (size, s) in [(40, 5), (37, 5), (64, 8)] {
            let out = net.forward(&triplet(size, size, 1)).unwrap();
            assert_eq!(out.rv_prob.dim(), (size, size));
            assert_eq!(out.faz_prob.dim(), (size, size));
            assert_eq!(out.rvj_heatmap.dim(), (size, size));
            assert_eq!(out.rvj_grid.dim(), (s, s, 4));
        }
    }

    #[test]
    fn fused_features_are_full_resolution() {
        let net = Network::new(small(InputMode::MultiEnface), 0).unwrap();
        let x = net.input_tensor(&[&triplet(24, 32, 2)]).unwrap();
        let fs = net.encode(&x).unwrap();
        assert_eq!(fs.features.len(), 3);
        for f in &fs.features {
            assert_eq!(f.dim(), (1, 4, 24, 32));
        }
        for t in Task::ALL {
            let g = net.vgm_forward(&fs.first_layer_outputs, t);
            assert_eq!(g.dim(), (1, 3, 24, 32));
            assert!(in_unit_interval(&g));
        }
    }

    #[test]
    fn zero_input_gives_finite_gates() {
        let net = Network::new(small(InputMode::MultiEnface), 0).unwrap();
        let fs = net.encode(&Tensor::zeros((1, 3, 16, 16))).unwrap();
        for t in Task::ALL {
            assert!(in_unit_interval(&net.vgm_forward(&fs.first_layer_outputs, t)));
        }
    }

    #[test]
    fn outputs_are_probabilities_and_deterministic() {
        let net = Network::new(small(InputMode::MultiEnface), 3).unwrap();
        let x = net.input_tensor(&[&triplet(32, 32, 4), &triplet(32, 32, 5)]).unwrap();
        let a = net.infer(&x).unwrap();
        let b = net.infer(&x).unwrap();
        assert_eq!(a, b);
        for t in [&a.rv, &a.faz, &a.heatmap, &a.grid] {
            assert!(in_unit_interval(t));
        }
    }

    #[test]
    fn unnormalized_input_is_a_range_error() {
        let net = Network::new(small(InputMode::MultiEnface), 0).unwrap();
        let x = Tensor::from_elem((1, 3, 16, 16), 2.0);
        assert!(matches!(net.infer(&x), Err(Error::Range(_))));
    }

    #[test]
    fn swapping_layers_changes_the_output() {
        let net = Network::new(small(InputMode::MultiEnface), 7).unwrap();
        let t = triplet(32, 32, 8);
        let swapped = EnfaceTriplet::new(t.ivc.clone(), t.dvc.clone(), t.svc.clone()).unwrap();
        assert_ne!(net.forward(&t).unwrap(), net.forward(&swapped).unwrap());
    }

    #[test]
    fn single_mode_replicates_ivc() {
        let t = triplet(8, 8, 9);
        let x = input_tensor(&[&t], InputMode::SingleIvc).unwrap();
        for i in 0..3 {
            assert_eq!(x.slice(s![0, i, .., ..]), t.ivc);
        }
    }

    #[test]
    fn triplicate_encoders_differ_at_init() {
        let net = Network::new(small(InputMode::Triplicate), 0).unwrap();
        let x = net.input_tensor(&[&triplet(16, 16, 10)]).unwrap();
        let fs = net.encode(&x).unwrap();
        assert_ne!(fs.features[0], fs.features[1]);
        assert_ne!(fs.features[1], fs.features[2]);
    }

    #[test]
    fn heads_have_independent_parameters() {
        let mut net = Network::new(small(InputMode::MultiEnface), 0).unwrap();
        net.rv_head.out.weight.value.fill(0.25);
        assert_ne!(net.rv_head.out.weight.value, net.faz_head.out.weight.value);
        let mut names = Vec::new();
        net.visit(&mut |p| names.push(p.name.clone()));
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn sharing_shrinks_the_model() {
        for topology in [Topology::Reduced, Topology::Resnet50] {
            let mut cfg = NetworkConfig::default();
            cfg.encoder.topology = topology;
            let net = Network::new(cfg, 0).unwrap();
            assert!(net.num_trainable() < net.unshared_parameter_count());
        }
    }

    #[test]
    fn reduced_topology_is_at_most_an_eighth() {
        let count = |topology| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut n = 0;
            for (blocks, _) in build_stages(topology, 16, &mut rng) {
                for b in &blocks {
                    n += b.module().num_trainable();
                }
            }
            n
        };
        assert!(8 * count(Topology::Reduced) <= count(Topology::Resnet50));
    }

    #[test]
    fn encoders_expose_identical_shared_layers() {
        let net = Network::new(small(InputMode::MultiEnface), 0).unwrap();
        let e: Vec<_> = (0..3).map(|i| net.encoder_parameters(i)).collect();
        let stem_len = e[0].iter().filter(|(n, _)| n.starts_with("encoder0.stem")).count();
        assert!(stem_len > 0);
        assert_eq!(e[0][stem_len..], e[1][stem_len..]);
        assert_eq!(e[0][stem_len..], e[2][stem_len..]);
        assert_ne!(e[0][..stem_len], e[1][..stem_len]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Probe a few parameters of every major component against a
        // linear objective of all four outputs.
        let mut cfg = small(InputMode::MultiEnface);
        cfg.encoder.n_ch = 3;
        cfg.gate_channels = 3;
        cfg.head_channels = 3;
        let mut net = Network::new(cfg, 11).unwrap();
        let x = net.input_tensor(&[&triplet(16, 16, 12), &triplet(16, 16, 13)]).unwrap();
        let probes = {
            let out = net.forward_train(&x).unwrap();
            BatchOutput {
                rv: random_tensor(out.rv.dim(), 21),
                faz: random_tensor(out.faz.dim(), 22),
                heatmap: random_tensor(out.heatmap.dim(), 23),
                grid: random_tensor(out.grid.dim(), 24),
            }
        };
        let objective = |net: &mut Network| -> f64 {
            let o = net.forward_train(&x).unwrap();
            [(&o.rv, &probes.rv), (&o.faz, &probes.faz), (&o.heatmap, &probes.heatmap), (&o.grid, &probes.grid)]
                .iter()
                .map(|(a, b)| a.iter().zip(b.iter()).map(|(&u, &v)| u as f64 * v as f64).sum::<f64>())
                .sum()
        };
        net.zero_grad();
        net.forward_train(&x).unwrap();
        net.backward(&probes);
        let mut analytic = Vec::new();
        net.visit(&mut |p| {
            if p.trainable && (p.name.ends_with(".weight") || p.name.ends_with(".bias")) {
                analytic.push((p.name.clone(), p.grad.clone()));
            }
        });
        let targets = ["encoder1.stem.conv", "encoder.stage0", "encoder.stage1", "encoder.stage3", "encoder.proj0", "vgm.rv.out", "vgm.rvj.block0", "head.faz.out", "head.rvj.grid.down0"];
        let eps = 1e-2f32;
        let (mut nums, mut anas) = (Vec::new(), Vec::new());
        for (name, grad) in analytic.iter().filter(|(n, _)| targets.iter().any(|t| n.starts_with(t))) {
            for flat in [0, grad.len() / 2] {
                let nudge = |net: &mut Network, delta: f32| {
                    net.visit_mut(&mut |p| {
                        if &p.name == name {
                            let v = p.value.as_slice_mut().unwrap();
                            v[flat] += delta;
                        }
                    });
                };
                nudge(&mut net, eps);
                let up = objective(&mut net);
                nudge(&mut net, -2.0 * eps);
                let down = objective(&mut net);
                nudge(&mut net, eps);
                let num = (up - down) / (2.0 * eps as f64);
                nums.push(num);
                anas.push(grad.as_slice().unwrap()[flat] as f64);
            }
        }
        // Single entries deep in the encoder are noisy in f32 (ReLU kinks,
        // round-off), so the check is on agreement of the whole vector.
        let dot: f64 = nums.iter().zip(&anas).map(|(a, b)| a * b).sum();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let cosine = dot / (norm(&nums) * norm(&anas));
        assert!(cosine > 0.995, "cosine {cosine}");
        let close = nums
            .iter()
            .zip(&anas)
            .filter(|(n, a)| (*n - *a).abs() <= 0.1 * n.abs().max(a.abs()).max(0.1))
            .count();
        assert!(close * 5 >= nums.len() * 4, "{close}/{}", nums.len());
    }
}
