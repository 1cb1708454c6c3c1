//! Run configuration: flat key/value files with explicit defaults.
//!
//! Config files are TOML restricted to a single flat table, e.g.:
//!
//! ```text
//! epochs = 50
//! optimizer = "adam"
//! learning_rate = 0.002
//! ```
//!
//! Unknown keys are rejected so typos fail loudly. `TrainConfig::default()`
//! is the single source of default values; `to_toml_string` dumps them all.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Cluster-aware schedule: the adaptive share grows from 0 to 1 over training.
    Adaptive,
    /// Pure uniform-random masking at the same total ratio.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingNorm {
    /// Routing weights normalized across regions for each cluster.
    Regions,
    /// Routing weights normalized across clusters for each region.
    Clusters,
}

/// All knobs for pre-training and the downstream harness.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,

    // model dimensions
    pub embed_dim: usize,
    pub code_dim: usize,
    pub temporal_edges: usize,
    pub cluster_edges: usize,
    pub highlevel_edges: usize,
    pub blocks: usize,
    pub routing_iters: usize,
    pub routing_norm: RoutingNorm,
    pub leaky_slope: f64,

    // masking
    pub mask_ratio: f64,
    pub mask_mode: MaskMode,
    pub adaptive_gamma: f64,

    // optimization
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub loss_balance: f64,
    pub batch_size: usize,
    pub grad_clip: f64,

    // windowing
    pub window_len: usize,
    pub window_stride: usize,

    // downstream forecasting
    pub horizon: usize,
    pub downstream_epochs: usize,
    pub downstream_lr: f64,
    pub mape_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            embed_dim: 64,
            code_dim: 16,
            temporal_edges: 8,
            cluster_edges: 10,
            highlevel_edges: 16,
            blocks: 2,
            routing_iters: 2,
            routing_norm: RoutingNorm::Regions,
            leaky_slope: 0.01,
            mask_ratio: 0.25,
            mask_mode: MaskMode::Adaptive,
            adaptive_gamma: 1.0,
            epochs: 50,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.002,
            loss_balance: 0.1,
            batch_size: 32,
            grad_clip: 5.0,
            window_len: 12,
            window_stride: 12,
            horizon: 12,
            downstream_epochs: 150,
            downstream_lr: 0.01,
            mape_epsilon: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    /// Flat key/value dump, also used as the defaults listing.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The config as `# key = value` comment lines for embedding in reports.
    pub fn echo_comment(&self) -> String {
        self.to_toml_string()
            .lines()
            .map(|l| format!("# {l}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio must lie strictly between 0 and 1, got {}",
                self.mask_ratio
            )));
        }
        if self.adaptive_gamma <= 0.0 {
            return Err(Error::Config(format!(
                "adaptive_gamma must be positive, got {}",
                self.adaptive_gamma
            )));
        }
        if self.loss_balance < 0.0 {
            return Err(Error::Config(format!(
                "loss_balance must be nonnegative, got {}",
                self.loss_balance
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("code_dim", self.code_dim),
            ("temporal_edges", self.temporal_edges),
            ("cluster_edges", self.cluster_edges),
            ("highlevel_edges", self.highlevel_edges),
            ("blocks", self.blocks),
            ("routing_iters", self.routing_iters),
            ("batch_size", self.batch_size),
            ("window_len", self.window_len),
            ("window_stride", self.window_stride),
            ("horizon", self.horizon),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config(format!(
                "grad_clip must be zero (off) or positive, got {}",
                self.grad_clip
            )));
        }
        if self.learning_rate < 0.0 || self.downstream_lr < 0.0 {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        if self.mape_epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "mape_epsilon must be positive, got {}",
                self.mape_epsilon
            )));
        }
        Ok(())
    }

    /// The miniature configuration used by the gradient-oracle subcommand:
    /// small enough that checking every coordinate takes seconds.
    pub fn tiny_gradcheck() -> Self {
        TrainConfig {
            embed_dim: 8,
            code_dim: 4,
            temporal_edges: 2,
            cluster_edges: 3,
            highlevel_edges: 2,
            blocks: 1,
            routing_iters: 2,
            window_len: 4,
            ..TrainConfig::default()
        }
    }
}
