//! Experiment orchestration: dataset generation, method evaluation sweeps,
//! timing, and the self-check report.
//!
//! Every CSV written here gets a `<name>.meta.json` sibling holding the full
//! [`ExperimentConfig`], the command and any derived seeds, which is enough
//! to regenerate the non-timing content bit for bit.

mod dataset;
mod experiments;
mod validate;

pub use dataset::{
    gen_dataset, gen_dataset_from_manifest, load_split, DatasetManifest, SplitRecord,
};
pub use experiments::{
    bench_timing, loglog_slope, paoi_cdf, paoi_vs_lambda, train_net, CdfRow, LambdaRow, TimingRow,
    TrainOutcome,
};
pub use validate::{validate, validate_with, Check, SuccessFn, ValidationReport};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::gli::{self, GridSpec, NetConfig, NetParams, TrainConfig};
use crate::model::{ChannelParams, Layout, LayoutGenSpec, Policy, TrafficParams};
use crate::sched::{self, OptimizerConfig};

/// Seed streams; combined with the base seed through
/// [`crate::model::derive_seed`].
pub mod streams {
    pub const TRAIN: u64 = 1;
    pub const TEST: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const CDF: u64 = 4;
    pub const TIMING: u64 = 5;
    pub const SIM: u64 = 6;
    pub const VALIDATE: u64 = 7;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Uniform,
    CoordinateDescent,
    ProjectedGradient,
    GliNet,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Uniform,
        Method::CoordinateDescent,
        Method::ProjectedGradient,
        Method::GliNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Uniform => "uniform",
            Method::CoordinateDescent => "coordinate_descent",
            Method::ProjectedGradient => "projected_gradient",
            Method::GliNet => "gli_net",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Method::Uniform),
            "cd" | "coordinate_descent" => Ok(Method::CoordinateDescent),
            "pg" | "projected_gradient" => Ok(Method::ProjectedGradient),
            "gli" | "gli_net" => Ok(Method::GliNet),
            other => Err(invalid(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    /// Base seed; every layout, simulation and training run derives from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Layout recipe. Its own `seed` is replaced per layout.
    pub layout: LayoutGenSpec,
    pub channel: ChannelParams,
    pub slot_duration: f64,
    /// Arrival rate for single-rate commands (cdf, train, simulate).
    pub lambda: f64,
    pub lambdas: Vec<f64>,
    pub methods: Vec<Method>,
    /// Trained network for the `gli_net` method.
    pub weights: Option<PathBuf>,
    /// Dataset from `gen`; evaluation reads `<dir>/test`, training `<dir>/train`.
    pub dataset_dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub eval_layouts: usize,
    pub cdf_layouts: usize,
    /// Slots per simulator confirmation run; 0 skips simulation.
    pub sim_slots: u64,
    pub timing_n: Vec<usize>,
    pub timing_reps: usize,
    pub optimizer: OptimizerConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            id: "default".into(),
            seed: 2024,
            out_dir: PathBuf::from("out"),
            layout: LayoutGenSpec::default(),
            channel: ChannelParams::default(),
            slot_duration: 1.0,
            lambda: 0.2,
            lambdas: (1..=9).map(|k| k as f64 / 10.0).collect(),
            methods: vec![Method::Uniform, Method::CoordinateDescent],
            weights: None,
            dataset_dir: None,
            n_train: 10_000,
            n_test: 5_000,
            eval_layouts: 100,
            cdf_layouts: 1000,
            sim_slots: 100_000,
            timing_n: vec![25, 50, 100, 200, 400],
            timing_reps: 5,
            optimizer: OptimizerConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: PathBuf::from("<config>"),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { reason, .. } => Error::Parse {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(invalid("at least one method is required"));
        }
        if let Some(l) = self
            .lambdas
            .iter()
            .chain([&self.lambda])
            .find(|&&l| !(l > 0.0 && l.is_finite()))
        {
            return Err(invalid(format!("arrival rates must be positive, got {l}")));
        }
        self.layout.validate()?;
        self.channel.validate()?;
        self.traffic(self.lambda)?;
        self.optimizer.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        if self.timing_reps < 1 {
            return Err(invalid("timing_reps must be at least 1"));
        }
        Ok(())
    }

    pub fn traffic(&self, lambda: f64) -> Result<TrafficParams> {
        TrafficParams::new(lambda, self.slot_duration)
    }
}

/// Turns a layout into a policy with one of the configured methods.
pub struct Solver {
    optimizer: OptimizerConfig,
    channel: ChannelParams,
    net: Option<NetParams>,
}

impl Solver {
    /// Loads the network weights when `gli_net` is among `methods`.
    pub fn new(cfg: &ExperimentConfig, methods: &[Method]) -> Result<Self> {
        let net = if methods.contains(&Method::GliNet) {
            let path = cfg
                .weights
                .as_ref()
                .ok_or_else(|| invalid("method gli_net needs a weights file"))?;
            if !path.exists() {
                return Err(invalid(format!(
                    "weights file {} not found",
                    path.display()
                )));
            }
            Some(gli::load_params(path)?)
        } else {
            None
        };
        Ok(Self {
            optimizer: cfg.optimizer,
            channel: cfg.channel,
            net,
        })
    }

    pub fn with_params(cfg: &ExperimentConfig, params: Option<NetParams>) -> Self {
        Self {
            optimizer: cfg.optimizer,
            channel: cfg.channel,
            net: params,
        }
    }

    pub fn solve(&self, method: Method, layout: &Layout, tr: &TrafficParams) -> Result<Policy> {
        match method {
            Method::Uniform => sched::uniform_policy(layout.n_links(), 0.5),
            Method::CoordinateDescent => {
                Ok(sched::coordinate_descent(layout, &self.channel, tr, &self.optimizer)?.policy)
            }
            Method::ProjectedGradient => {
                Ok(sched::projected_gradient(layout, &self.channel, tr, &self.optimizer)?.policy)
            }
            Method::GliNet => {
                let params = self
                    .net
                    .as_ref()
                    .ok_or_else(|| invalid("no network loaded"))?;
                let cfg = params.config();
                let gs = GridSpec::new(cfg.grid_resolution, layout.side_length())?;
                Ok(gli::infer_with(layout, params, cfg, &gs, self.optimizer.p_floor)?.policy)
            }
        }
    }
}

/// `foo.csv` -> `foo.meta.json`.
pub fn meta_json_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub crate_version: String,
    pub config: ExperimentConfig,
    pub environment: Environment,
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub threads: usize,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads: rayon::current_num_threads(),
        }
    }
}

pub fn write_meta(
    csv: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    extra: serde_json::Value,
) -> Result<()> {
    let meta = RunMeta {
        command: command.into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        environment: Environment::current(),
        extra,
    };
    fs::write(meta_json_path(csv), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Digest over every regular file below `dir`, visited in sorted path order.
/// Metadata siblings are skipped because they record the environment.
pub fn hash_tree(dir: &Path) -> Result<String> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, root, out)?;
            } else if !path.to_string_lossy().ends_with(".meta.json") {
                let rel = path
                    .strip_prefix(root)
                    .unwrap_or(&path)
                    .to_string_lossy()
                    .replace('\\', "/");
                out.push((rel, path));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(fs::read(path)?);
        h.update([0]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub(crate) fn policy_bytes(p: &Policy) -> Vec<u8> {
    p.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
}
