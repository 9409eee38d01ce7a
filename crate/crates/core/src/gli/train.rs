use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::{conv_backward, conv_forward, ConvMaps};
use super::fc::{fc_backward, fc_forward, gather_link_features, FcCache, LinkFeatures};
use super::grid::{build_from_slice, GridSpec};
use super::{NetConfig, NetParams};
use crate::analytics::{survival_prob, InterferenceModel, SUCCESS_FLOOR};
use crate::error::{invalid, Error, Result};
use crate::model::{distance_matrix, ChannelParams, Layout, Policy, TrafficParams};

pub const DEFAULT_P_FLOOR: f64 = 1e-4;

/// A layout with its interference model precomputed.
#[derive(Debug, Clone)]
pub struct Sample {
    pub layout: Layout,
    pub model: InterferenceModel,
}

impl Sample {
    pub fn new(layout: Layout, ch: &ChannelParams) -> Result<Self> {
        let model = InterferenceModel::new(&distance_matrix(&layout)?, ch);
        Ok(Self { layout, model })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InferenceCost {
    pub conv_macs: u64,
    pub fc_macs: u64,
}

impl InferenceCost {
    pub fn total(&self) -> u64 {
        self.conv_macs + self.fc_macs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Final policy clamped to `[p_floor, 1]`.
    pub policy: Policy,
    /// Raw sigmoid output of every round.
    pub rounds: Vec<Vec<f64>>,
    pub cost: InferenceCost,
}

struct Round {
    maps: ConvMaps,
    feat: LinkFeatures,
    fc: FcCache,
}

fn run_round(layout: &Layout, prev: &[f64], params: &NetParams, gs: &GridSpec) -> Round {
    let grid = build_from_slice(layout, prev, gs);
    let maps = conv_forward(&grid, params);
    let feat = gather_link_features(&maps, layout, prev, gs, params.config().distance_norm);
    let fc = fc_forward(&feat, params);
    Round { maps, feat, fc }
}

fn check(layout: &Layout, params: &NetParams, cfg: &NetConfig, gs: &GridSpec) -> Result<()> {
    cfg.validate()?;
    params.check_config(cfg)?;
    if gs.resolution != cfg.grid_resolution {
        return Err(Error::Shape(format!(
            "grid resolution {} but network expects {}",
            gs.resolution, cfg.grid_resolution
        )));
    }
    if layout.n_links() == 0 {
        return Err(invalid("layout has no links"));
    }
    Ok(())
}

/// Raw outputs of rounds `1..=rounds`, starting from a uniform 0.5 policy.
fn forward_rounds(
    layout: &Layout,
    params: &NetParams,
    gs: &GridSpec,
    rounds: usize,
) -> (Vec<Vec<f64>>, u64, u64) {
    let mut prev = vec![0.5; layout.n_links()];
    let mut out = Vec::with_capacity(rounds);
    let (mut conv, mut fc) = (0, 0);
    for _ in 0..rounds {
        let r = run_round(layout, &prev, params, gs);
        conv += r.maps.macs;
        fc += r.fc.macs;
        prev = r.fc.p;
        out.push(prev.clone());
    }
    (out, conv, fc)
}

pub fn infer(
    layout: &Layout,
    params: &NetParams,
    cfg: &NetConfig,
    gs: &GridSpec,
) -> Result<Policy> {
    Ok(infer_with(layout, params, cfg, gs, DEFAULT_P_FLOOR)?.policy)
}

pub fn infer_with(
    layout: &Layout,
    params: &NetParams,
    cfg: &NetConfig,
    gs: &GridSpec,
    p_floor: f64,
) -> Result<Inference> {
    check(layout, params, cfg, gs)?;
    if !(0.0..=1.0).contains(&p_floor) {
        return Err(invalid(format!("p_floor {p_floor} outside [0, 1]")));
    }
    let (rounds, conv_macs, fc_macs) = forward_rounds(layout, params, gs, cfg.feedback_rounds);
    let last = rounds.last().expect("at least one round");
    let policy = Policy::new(last.iter().map(|&p| p.clamp(p_floor, 1.0)).collect())?;
    Ok(Inference {
        policy,
        rounds,
        cost: InferenceCost { conv_macs, fc_macs },
    })
}

fn grid_for(sample: &Sample, cfg: &NetConfig) -> Result<GridSpec> {
    GridSpec::new(cfg.grid_resolution, sample.layout.side_length())
}

/// Mean over links of the per-link peak age of the final raw policy, with
/// success probabilities floored at [`SUCCESS_FLOOR`].
pub fn layout_loss(
    sample: &Sample,
    params: &NetParams,
    cfg: &NetConfig,
    tr: &TrafficParams,
) -> Result<f64> {
    let gs = grid_for(sample, cfg)?;
    check(&sample.layout, params, cfg, &gs)?;
    let (rounds, _, _) = forward_rounds(&sample.layout, params, &gs, cfg.feedback_rounds);
    let p = rounds.last().expect("at least one round");
    Ok(mean_clamped_paoi(&sample.model.success_probs(p), tr))
}

fn mean_clamped_paoi(phi: &[f64], tr: &TrafficParams) -> f64 {
    let scale = tr.arrival_rate * survival_prob(tr);
    phi.iter()
        .map(|&s| tr.slot_duration + 1.0 / (scale * s.max(SUCCESS_FLOOR)))
        .sum::<f64>()
        / phi.len() as f64
}

/// Raw policy entering the final feedback round.
pub fn feedback_prefix(sample: &Sample, params: &NetParams, cfg: &NetConfig) -> Result<Vec<f64>> {
    let gs = grid_for(sample, cfg)?;
    check(&sample.layout, params, cfg, &gs)?;
    let (rounds, _, _) = forward_rounds(&sample.layout, params, &gs, cfg.feedback_rounds - 1);
    Ok(rounds
        .last()
        .cloned()
        .unwrap_or_else(|| vec![0.5; sample.layout.n_links()]))
}

/// Loss of a single round run from a fixed previous policy.
pub fn final_round_loss(
    sample: &Sample,
    prev: &[f64],
    params: &NetParams,
    cfg: &NetConfig,
    tr: &TrafficParams,
) -> Result<f64> {
    let gs = grid_for(sample, cfg)?;
    let r = run_round(&sample.layout, prev, params, &gs);
    Ok(mean_clamped_paoi(&sample.model.success_probs(&r.fc.p), tr))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    /// Mean of the per-layout losses.
    pub loss: f64,
    /// Gradient of the summed per-layout losses.
    pub grads: NetParams,
    pub clamped: bool,
}

fn sample_grad(
    sample: &Sample,
    params: &NetParams,
    cfg: &NetConfig,
    tr: &TrafficParams,
) -> Result<(f64, NetParams, bool)> {
    let gs = grid_for(sample, cfg)?;
    check(&sample.layout, params, cfg, &gs)?;
    let layout = &sample.layout;
    let n = layout.n_links();
    let (prefix, _, _) = forward_rounds(layout, params, &gs, cfg.feedback_rounds - 1);
    let prev = prefix.last().cloned().unwrap_or_else(|| vec![0.5; n]);
    let last = run_round(layout, &prev, params, &gs);
    let p = &last.fc.p;

    let model = &sample.model;
    let rest: Vec<f64> = (0..n).map(|i| model.rest(i, p)).collect();
    let phi: Vec<f64> = (0..n).map(|i| p[i] * rest[i]).collect();
    let scale = tr.arrival_rate * survival_prob(tr);
    let clamped = phi.iter().any(|&s| s < SUCCESS_FLOOR);
    let loss = mean_clamped_paoi(&phi, tr);
    let sens: Vec<f64> = phi
        .iter()
        .map(|&s| {
            let s = s.max(SUCCESS_FLOOR);
            -1.0 / (scale * n as f64 * s * s)
        })
        .collect();
    let dp = model.backprop_success(p, &rest, &sens);

    let mut grads = NetParams::zeros(params.config())?;
    let dx = fc_backward(&last.feat, &last.fc, &dp, params, &mut grads);
    let r2 = gs.resolution * gs.resolution;
    let mut d_tx: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; r2]);
    let mut d_rx: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; r2]);
    for (g, &(tc, rc)) in dx.iter().zip(&last.feat.cells) {
        for l in 0..3 {
            d_tx[l][rc] += g[l];
            d_rx[l][tc] += g[3 + l];
        }
    }
    conv_backward(&last.maps, d_tx, d_rx, params, &mut grads);
    Ok((loss, grads, clamped))
}

/// Batch loss and exact parameter gradient through the final feedback
/// round. Layouts are processed in parallel and reduced in batch order.
pub fn loss_and_gradients(
    batch: &[Sample],
    params: &NetParams,
    cfg: &NetConfig,
    tr: &TrafficParams,
) -> Result<LossAndGrad> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    tr.validate()?;
    let parts: Vec<_> = batch
        .par_iter()
        .map(|s| sample_grad(s, params, cfg, tr))
        .collect::<Result<_>>()?;
    let mut grads = NetParams::zeros(params.config())?;
    let mut loss = 0.0;
    let mut clamped = false;
    for (l, g, c) in &parts {
        loss += l;
        grads.add_scaled(g, 1.0);
        clamped |= c;
    }
    Ok(LossAndGrad {
        loss: loss / batch.len() as f64,
        grads,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Consecutive epochs of rising training loss before the rate is halved.
    pub patience: usize,
    pub max_lr_halvings: usize,
    /// Rescale the batch gradient when its L2 norm exceeds this.
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 20,
            validation_fraction: 0.1,
            seed: 0,
            patience: 5,
            max_lr_halvings: 6,
            max_grad_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(invalid("validation_fraction must lie in [0, 1)"));
        }
        if self.patience == 0 {
            return Err(invalid("patience must be positive"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(invalid("max_grad_norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingCurve {
    /// Entry 0 evaluates the initial parameters.
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn mean_loss(
    samples: &[&Sample],
    params: &NetParams,
    cfg: &NetConfig,
    tr: &TrafficParams,
) -> Result<f64> {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| layout_loss(s, params, cfg, tr))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Minibatch heavy-ball training. Returns the parameters with the lowest
/// validation loss (training loss when nothing is held out).
pub fn train(
    samples: &[Sample],
    init: NetParams,
    cfg: &NetConfig,
    tcfg: &TrainConfig,
    tr: &TrafficParams,
) -> Result<(NetParams, TrainingCurve)> {
    tcfg.validate()?;
    cfg.validate()?;
    init.check_config(cfg)?;
    tr.validate()?;
    if samples.is_empty() {
        return Err(invalid("no training samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64) * tcfg.validation_fraction).floor() as usize;
    let n_val = n_val.min(samples.len() - 1);
    let val: Vec<&Sample> = order[..n_val].iter().map(|&k| &samples[k]).collect();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();

    let mut params = init;
    let mut velocity = NetParams::zeros(cfg)?;
    let mut lr = tcfg.learning_rate;
    let train_set: Vec<&Sample> = train_idx.iter().map(|&k| &samples[k]).collect();
    let first = mean_loss(&train_set, &params, cfg, tr)?;
    let first_val = if val.is_empty() {
        None
    } else {
        Some(mean_loss(&val, &params, cfg, tr)?)
    };
    let mut curve = TrainingCurve {
        records: vec![EpochRecord {
            epoch: 0,
            train_loss: first,
            val_loss: first_val,
            learning_rate: lr,
        }],
        best_epoch: 0,
    };
    let mut best = params.clone();
    let mut best_score = first_val.unwrap_or(first);
    let mut rising = 0;
    let mut halvings = 0;
    let mut last_loss = first;

    for epoch in 1..=tcfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in train_idx.chunks(tcfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&k| samples[k].clone()).collect();
            let lg = loss_and_gradients(&batch, &params, cfg, tr)?;
            total += lg.loss * batch.len() as f64;
            seen += batch.len();
            let mut g = lg.grads;
            let inv = 1.0 / batch.len() as f64;
            let norm = g.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt() * inv;
            let shrink = if norm > tcfg.max_grad_norm {
                tcfg.max_grad_norm / norm
            } else {
                1.0
            };
            for v in g.as_mut_slice() {
                *v *= inv * shrink;
            }
            for (v, gv) in velocity.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *v = tcfg.momentum * *v - lr * gv;
            }
            params.add_scaled(&velocity, 1.0);
        }
        let train_loss = total / seen as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_loss(&val, &params, cfg, tr)?)
        };
        curve.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
        });
        let score = val_loss.unwrap_or(train_loss);
        if score < best_score {
            best_score = score;
            best = params.clone();
            curve.best_epoch = epoch;
        }
        rising = if train_loss > last_loss {
            rising + 1
        } else {
            0
        };
        last_loss = train_loss;
        if rising >= tcfg.patience {
            if halvings == tcfg.max_lr_halvings {
                break;
            }
            lr *= 0.5;
            halvings += 1;
            rising = 0;
            velocity = NetParams::zeros(cfg)?;
        }
    }
    Ok((best, curve))
}
