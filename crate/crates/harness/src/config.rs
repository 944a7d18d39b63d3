//! Training configuration: a flat, versioned TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use clfseg_core::losses::{LossConfig, LossKind};
use clfseg_core::NetworkConfig;
use clfseg_data::SplitSpec;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};
use crate::optim::{DEFAULT_DECAY, DEFAULT_EPS};

pub const CONFIG_VERSION: u32 = 1;

/// Every key of the config file. Missing keys take the defaults below;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,

    // network
    pub base_filters: usize,
    pub depth: usize,
    pub fuzzy_sets: usize,
    pub resnet_paths: usize,
    pub classes: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub separable_n: usize,
    pub bottleneck_blocks: usize,
    pub fuzzy: bool,
    pub conv_glu: bool,
    pub fuzzy_channel_mean: bool,

    // loss
    pub loss: LossKind,
    pub dice_smooth: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,

    // optimisation
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: u64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub seed: u64,
    pub augment: bool,
    /// Before each validation, replace batch-norm running statistics by
    /// their average over one pass of the (unaugmented) training set.
    pub bn_refresh: bool,

    // data: a directory of PNG pairs, or the synthetic task when empty
    pub data_dir: Option<PathBuf>,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub split_seed: u64,
    pub synth_count: usize,
    /// Held-out synthetic samples (indices after the training ones) used
    /// for validation.
    pub synth_val_count: usize,
    pub synth_seed: u64,
    pub synth_difficulty: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        let loss = LossConfig::default();
        Self {
            version: CONFIG_VERSION,
            base_filters: net.base_filters,
            depth: net.depth,
            fuzzy_sets: net.fuzzy_sets,
            resnet_paths: net.resnet_paths,
            classes: net.classes,
            in_channels: net.in_channels,
            height: net.height,
            width: net.width,
            separable_n: net.separable_n,
            bottleneck_blocks: net.bottleneck_blocks,
            fuzzy: net.fuzzy,
            conv_glu: net.conv_glu,
            fuzzy_channel_mean: net.fuzzy_channel_mean,
            loss: loss.kind,
            dice_smooth: loss.smooth,
            focal_gamma: loss.focal_gamma,
            focal_alpha: loss.focal_alpha,
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 1000,
            max_steps: 0,
            rmsprop_decay: DEFAULT_DECAY,
            rmsprop_eps: DEFAULT_EPS,
            seed: 0,
            augment: true,
            bn_refresh: true,
            data_dir: None,
            split_train: 0.8,
            split_val: 0.1,
            split_test: 0.1,
            split_seed: 0,
            synth_count: 64,
            synth_val_count: 16,
            synth_seed: 0,
            synth_difficulty: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            base_filters: self.base_filters,
            depth: self.depth,
            fuzzy_sets: self.fuzzy_sets,
            resnet_paths: self.resnet_paths,
            classes: self.classes,
            in_channels: self.in_channels,
            height: self.height,
            width: self.width,
            separable_n: self.separable_n,
            bottleneck_blocks: self.bottleneck_blocks,
            fuzzy: self.fuzzy,
            conv_glu: self.conv_glu,
            fuzzy_channel_mean: self.fuzzy_channel_mean,
        }
    }

    /// Copies every network field from `net`.
    pub fn set_network(&mut self, net: &NetworkConfig) {
        self.base_filters = net.base_filters;
        self.depth = net.depth;
        self.fuzzy_sets = net.fuzzy_sets;
        self.resnet_paths = net.resnet_paths;
        self.classes = net.classes;
        self.in_channels = net.in_channels;
        self.height = net.height;
        self.width = net.width;
        self.separable_n = net.separable_n;
        self.bottleneck_blocks = net.bottleneck_blocks;
        self.fuzzy = net.fuzzy;
        self.conv_glu = net.conv_glu;
        self.fuzzy_channel_mean = net.fuzzy_channel_mean;
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss,
            smooth: self.dice_smooth,
            focal_gamma: self.focal_gamma,
            focal_alpha: self.focal_alpha,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split_train,
            val: self.split_val,
            test: self.split_test,
            seed: self.split_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(HarnessError::Invalid(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.network().validate()?;
        self.loss_config().validate()?;
        let bad = |m: String| Err(HarnessError::Invalid(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return bad(format!("rmsprop_decay must lie in [0, 1), got {}", self.rmsprop_decay));
        }
        if !(self.rmsprop_eps > 0.0) {
            return bad(format!("rmsprop_eps must be > 0, got {}", self.rmsprop_eps));
        }
        if !(0.0..=1.0).contains(&self.synth_difficulty) {
            return bad(format!("synth_difficulty must lie in [0, 1], got {}", self.synth_difficulty));
        }
        // TOML integers are signed 64-bit
        for (k, v) in [
            ("epochs", self.epochs),
            ("max_steps", self.max_steps),
            ("seed", self.seed),
            ("split_seed", self.split_seed),
            ("synth_seed", self.synth_seed),
        ] {
            if v > i64::MAX as u64 {
                return bad(format!("{k} must be at most {}, got {v}", i64::MAX));
            }
        }
        if self.data_dir.is_some() {
            self.split_spec().validate()?;
        } else if self.synth_count == 0 {
            return bad("synth_count must be >= 1".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg = Self::from_toml(&text).map_err(|message| HarnessError::Config {
            path: path.to_path_buf(),
            message,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(io_err(path))
    }
}

/// Field-by-field differences between two network configurations, as
/// `name: left != right` lines.
pub fn network_diff(left: &NetworkConfig, right: &NetworkConfig) -> Vec<String> {
    let a = toml::Table::try_from(left).expect("network config serializes");
    let b = toml::Table::try_from(right).expect("network config serializes");
    let mut out = Vec::new();
    for (k, va) in &a {
        match b.get(k) {
            Some(vb) if vb == va => {}
            Some(vb) => out.push(format!("{k}: {va} != {vb}")),
            None => out.push(format!("{k}: {va} != <missing>")),
        }
    }
    out
}
