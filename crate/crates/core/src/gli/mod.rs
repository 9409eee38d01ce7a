//! Location-driven neural scheduler.
//!
//! Access probabilities are spread onto two R x R density grids (one for
//! transmitters, one for receivers), passed through three stacked
//! single-filter convolution layers, and sampled back per link: the three
//! transmitter-grid maps at the link's receiver cell and the three
//! receiver-grid maps at its transmitter cell. Together with the link's
//! previous access probability and its normalized length these eight
//! features feed a shared two-hidden-layer network with a sigmoid output.
//! The output policy seeds the grids of the next feedback round.
//!
//! Training is unsupervised: the loss is the closed-form network mean peak
//! age of the final-round policy, differentiated exactly. Earlier feedback
//! rounds are evaluated with the current parameters but treated as
//! constants by the backward pass.

mod conv;
mod fc;
mod grid;
mod train;
mod weights;

pub use conv::{conv_backward, conv_forward, ConvMaps, StackMaps};
pub use fc::{fc_backward, fc_forward, gather_link_features, FcCache, LinkFeatures, FEATURES};
pub use grid::{build_density_grids, cell_index, DensityGrid, GridSpec};
pub use train::{
    feedback_prefix, final_round_loss, infer, infer_with, layout_loss, loss_and_gradients, train,
    EpochRecord, Inference, InferenceCost, LossAndGrad, Sample, TrainConfig, TrainingCurve,
    DEFAULT_P_FLOOR,
};
pub use weights::{decode_params, encode_params, load_params, save_params, MAGIC, VERSION};

use std::ops::Range;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Architecture record. Stored verbatim in weights files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Odd kernel widths of the three convolution layers.
    pub conv_sizes: [usize; 3],
    pub hidden_sizes: [usize; 2],
    pub feedback_rounds: usize,
    /// Grid resolution R the network was built for.
    pub grid_resolution: usize,
    /// Link lengths are divided by this before entering the network.
    pub distance_norm: f64,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            conv_sizes: [11, 11, 11],
            hidden_sizes: [30, 30],
            feedback_rounds: 3,
            grid_resolution: 150,
            distance_norm: 80.0,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.conv_sizes.iter().find(|&&c| c % 2 == 0) {
            return Err(invalid(format!("convolution sizes must be odd, got {c}")));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(invalid("hidden layers need at least one unit"));
        }
        if self.feedback_rounds < 1 {
            return Err(invalid("need at least one feedback round"));
        }
        if self.grid_resolution < 1 {
            return Err(invalid("grid resolution must be at least 1"));
        }
        if !(self.distance_norm > 0.0 && self.distance_norm.is_finite()) {
            return Err(invalid("distance_norm must be positive"));
        }
        Ok(())
    }

    /// Named tensor ranges inside the flat parameter vector, in storage order.
    pub fn tensor_ranges(&self) -> Vec<(&'static str, Range<usize>)> {
        let [c1, c2, c3] = self.conv_sizes;
        let [h1, h2] = self.hidden_sizes;
        let sizes = [
            ("conv1.kernel", c1 * c1),
            ("conv1.bias", 1),
            ("conv2.kernel", c2 * c2),
            ("conv2.bias", 1),
            ("conv3.kernel", c3 * c3),
            ("conv3.bias", 1),
            ("fc1.weight", h1 * FEATURES),
            ("fc1.bias", h1),
            ("fc2.weight", h2 * h1),
            ("fc2.bias", h2),
            ("out.weight", h2),
            ("out.bias", 1),
        ];
        let mut at = 0;
        sizes
            .into_iter()
            .map(|(name, len)| {
                let r = at..at + len;
                at += len;
                (name, r)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensor_ranges().last().map_or(0, |(_, r)| r.end)
    }

    /// Multiply-adds of one inference: per round, two grids through three
    /// zero-padded convolutions plus the per-link dense stack.
    pub fn inference_macs(&self, n_links: usize) -> (u64, u64) {
        let r2 = (self.grid_resolution * self.grid_resolution) as u64;
        let conv: u64 = self.conv_sizes.iter().map(|&c| (c * c) as u64).sum();
        let [h1, h2] = self.hidden_sizes;
        let fc = (FEATURES * h1 + h1 * h2 + h2) as u64;
        let f = self.feedback_rounds as u64;
        (f * 2 * r2 * conv, f * n_links as u64 * fc)
    }
}

/// Every trainable value, stored flat in [`NetConfig::tensor_ranges`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    cfg: NetConfig,
    data: Vec<f64>,
}

impl NetParams {
    pub fn zeros(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: *cfg,
            data: vec![0.0; cfg.param_count()],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(cfg: &NetConfig) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let [h1, h2] = cfg.hidden_sizes;
        for (name, range) in cfg.tensor_ranges() {
            let (fan_in, fan_out) = match name {
                "conv1.kernel" | "conv2.kernel" | "conv3.kernel" => (range.len(), range.len()),
                "fc1.weight" => (FEATURES, h1),
                "fc2.weight" => (h1, h2),
                "out.weight" => (h2, 1),
                _ => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p.data[range] {
                *v = rng.random_range(-limit..limit);
            }
        }
        Ok(p)
    }

    pub fn from_flat(cfg: &NetConfig, data: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if data.len() != cfg.param_count() {
            return Err(Error::Shape(format!(
                "{} values for a network with {} parameters",
                data.len(),
                cfg.param_count()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("parameters must be finite"));
        }
        Ok(Self { cfg: *cfg, data })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        let r = self.range(name);
        &self.data[r]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self.range(name);
        &mut self.data[r]
    }

    fn range(&self, name: &str) -> Range<usize> {
        self.cfg
            .tensor_ranges()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, r)| r)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))
    }

    pub(crate) fn conv_kernel(&self, layer: usize) -> (&[f64], f64) {
        let k = self.tensor(["conv1.kernel", "conv2.kernel", "conv3.kernel"][layer]);
        let b = self.tensor(["conv1.bias", "conv2.bias", "conv3.bias"][layer])[0];
        (k, b)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &NetParams, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// Checks that these parameters can run on `cfg` (same architecture).
    pub fn check_config(&self, cfg: &NetConfig) -> Result<()> {
        let same = self.cfg.conv_sizes == cfg.conv_sizes
            && self.cfg.hidden_sizes == cfg.hidden_sizes
            && self.cfg.grid_resolution == cfg.grid_resolution;
        if same {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "parameters built for {:?} do not fit {:?}",
                self.cfg, cfg
            )))
        }
    }
}
