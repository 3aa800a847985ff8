use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::CodecParams;
use crate::data::AugmentParams;
use crate::error::{Error, Result};
use crate::losses::GridLossParams;
use crate::metrics::{EvalParams, MatchStrategy, DEFAULT_SEG_THRESHOLD, DEFAULT_TOLERANCE};
use crate::network::{EncoderConfig, FusionMode, InputMode, NetworkConfig, Topology};
use crate::nn::Init;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "VAFF_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSection {
    pub topology: Topology,
    pub n_ch: usize,
    pub gate_channels: usize,
    pub head_channels: usize,
    pub first_layer_init: Option<[Init; 3]>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = NetworkConfig::default();
        Self {
            topology: d.encoder.topology,
            n_ch: d.encoder.n_ch,
            gate_channels: d.gate_channels,
            head_channels: d.head_channels,
            first_layer_init: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub seg_threshold: f32,
    pub tolerance: f64,
    pub matching: MatchStrategy,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seg_threshold: DEFAULT_SEG_THRESHOLD,
            tolerance: DEFAULT_TOLERANCE,
            matching: MatchStrategy::Optimal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub seed: u64,
    pub dataset_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub train_split: String,
    pub eval_split: String,
    pub fusion_mode: FusionMode,
    pub input_mode: InputMode,
    /// Checkpoint cadence in epochs; the final epoch is always saved.
    pub checkpoint_every: usize,
    /// Apply random flips, rotation and gamma to every training sample.
    pub augment: bool,
    pub augmentation: AugmentParams,
    pub dwa_temperature: f64,
    pub network: NetworkSection,
    pub codec: CodecParams,
    pub grid_loss: GridLossParams,
    pub eval: EvalSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 4,
            lr_initial: 5e-5,
            seed: 0,
            dataset_root: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            train_split: "train".into(),
            eval_split: "test".into(),
            fusion_mode: FusionMode::Vgm,
            input_mode: InputMode::MultiEnface,
            checkpoint_every: 50,
            augment: true,
            augmentation: AugmentParams::default(),
            dwa_temperature: 2.0,
            network: NetworkSection::default(),
            codec: CodecParams::default(),
            grid_loss: GridLossParams::default(),
            eval: EvalSection::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_initial.is_finite() && self.lr_initial >= 0.0) {
            return Err(Error::Config("lr_initial must be a finite non-negative number".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if self.dwa_temperature.is_nan() || self.dwa_temperature <= 0.0 {
            return Err(Error::Config("dwa_temperature must be positive".into()));
        }
        self.network_config().validate()
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            encoder: EncoderConfig {
                topology: self.network.topology,
                n_ch: self.network.n_ch,
                input_mode: self.input_mode,
                first_layer_init: self.network.first_layer_init,
            },
            fusion_mode: self.fusion_mode,
            gate_channels: self.network.gate_channels,
            head_channels: self.network.head_channels,
            cell_size: self.codec.cell_size,
        }
    }

    pub fn eval_params(&self) -> EvalParams {
        EvalParams {
            decode: self.codec.decode,
            seg_threshold: self.eval.seg_threshold,
            tolerance: self.eval.tolerance,
            strategy: self.eval.matching,
        }
    }
}

/// Cosine annealing from `lr_initial` at epoch 0 to zero at `epochs`.
pub fn cosine_lr(lr_initial: f64, epoch: usize, epochs: usize) -> f64 {
    let t = (epoch.min(epochs) as f64) / epochs as f64;
    lr_initial * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(5e-5, 0, 1000), 5e-5);
        assert!((cosine_lr(5e-5, 500, 1000) - 2.5e-5).abs() < 1e-12);
        assert!(cosine_lr(5e-5, 1000, 1000).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_non_increasing() {
        let lrs: Vec<f64> = (0..=300).map(|e| cosine_lr(1e-3, e, 300)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);

        let partial = r#"
            epochs = 20
            fusion_mode = "max"
            input_mode = "triplicate"
            [network]
            topology = "reduced"
            n_ch = 8
        "#;
        let cfg = TrainConfig::from_toml_str(partial).unwrap();
        assert_eq!(cfg.epochs, 20);
        assert_eq!(cfg.batch_size, 4);
        let net = cfg.network_config();
        assert_eq!(net.fusion_mode, FusionMode::Max);
        assert_eq!(net.encoder.input_mode, InputMode::Triplicate);
        assert_eq!(net.encoder.topology, Topology::Reduced);
        assert_eq!(net.encoder.n_ch, 8);
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(matches!(TrainConfig::from_toml_str("epochs = 0"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml_str("fusion_mode = \"mean\""), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml_str("[codec]\ncell_size = 6"), Err(Error::Config(_))));
    }
}
