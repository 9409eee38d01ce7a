//! Self-check suite behind the `validate` command.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    gen_dataset, hash_tree, paoi_cdf, paoi_vs_lambda, policy_bytes, sha256_hex, streams, train_net,
    ExperimentConfig, Method,
};
use crate::analytics::{
    cond_success_given_active_set, network_objective, paoi_from_success, preemption_prob,
    success_probability,
};
use crate::error::Result;
use crate::gli::{
    self, feedback_prefix, final_round_loss, loss_and_gradients, GridSpec, NetConfig, NetParams,
    Sample,
};
use crate::model::{
    derive_seed, distance_matrix, generate_layout, ChannelParams, DistanceMatrix, Layout,
    LayoutGenSpec, Point, Policy, TrafficParams,
};
use crate::sched;
use crate::sim::{self, Activation, SimConfig};

/// Success probability of link `i`; the function under test in the subset
/// and end-to-end checks.
pub type SuccessFn = dyn Fn(usize, &Policy, &DistanceMatrix, &ChannelParams) -> f64 + Sync;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured error in the check's own unit (relative error, or sigmas).
    pub error: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub checks: Vec<Check>,
    /// Stage name to sha256 of its first run.
    pub digests: BTreeMap<String, String>,
}

impl ValidationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }
}

fn check(name: &str, error: f64, tolerance: f64, detail: String) -> Check {
    Check {
        name: name.into(),
        passed: error <= tolerance,
        error,
        tolerance,
        detail,
    }
}

pub fn validate(cfg: &ExperimentConfig) -> Result<ValidationReport> {
    validate_with(cfg, &|i, p, dm, ch| success_probability(i, p, dm, ch))
}

pub fn validate_with(cfg: &ExperimentConfig, success: &SuccessFn) -> Result<ValidationReport> {
    let seed = derive_seed(cfg.seed, streams::VALIDATE, 0);
    let ch = cfg.channel;
    let mut checks = vec![
        subset_oracle(seed, &ch, success)?,
        objective_gradient(seed, &ch)?,
        gli_gradient(seed, &ch)?,
    ];
    checks.extend(forced_queue(seed)?);
    checks.push(full_sim(seed, &ch, success)?);
    let (det, digests) = determinism(cfg)?;
    checks.extend(det);
    Ok(ValidationReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
        digests,
    })
}

fn small_layout(seed: u64, n: usize) -> Result<Layout> {
    generate_layout(&LayoutGenSpec {
        n_links: n,
        side_length: 60.0,
        d_min: 2.0,
        d_max: 30.0,
        seed,
    })
}

/// Expectation over every activation pattern of the other links.
fn enumerate_success(
    i: usize,
    pol: &Policy,
    dm: &DistanceMatrix,
    ch: &ChannelParams,
) -> Result<f64> {
    let others: Vec<usize> = (0..pol.len()).filter(|&j| j != i).collect();
    let mut total = 0.0;
    let mut active = Vec::with_capacity(others.len());
    for mask in 0u32..(1 << others.len()) {
        active.clear();
        let mut w = 1.0;
        for (b, &j) in others.iter().enumerate() {
            if mask >> b & 1 == 1 {
                active.push(j);
                w *= pol[j];
            } else {
                w *= 1.0 - pol[j];
            }
        }
        total += w * cond_success_given_active_set(i, &active, dm, ch)?;
    }
    Ok(pol[i] * total)
}

fn subset_oracle(seed: u64, ch: &ChannelParams, success: &SuccessFn) -> Result<Check> {
    let errs: Vec<f64> = (0..30u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, k));
            let n = rng.random_range(2..=10);
            let dm = distance_matrix(&small_layout(rng.random(), n)?)?;
            let pol = Policy::new((0..n).map(|_| rng.random::<f64>()).collect())?;
            let mut worst = 0.0f64;
            for i in 0..n {
                let oracle = enumerate_success(i, &pol, &dm, ch)?;
                let got = success(i, &pol, &dm, ch);
                let err = (got - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE);
                worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    Ok(check(
        "subset_oracle",
        worst,
        1e-12,
        format!("{} layouts, N in 2..=10, max relative error", errs.len()),
    ))
}

fn objective_gradient(seed: u64, ch: &ChannelParams) -> Result<Check> {
    let errs: Vec<f64> = (0..30u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, k));
            let n = rng.random_range(2..=10);
            let dm = distance_matrix(&small_layout(rng.random(), n)?)?;
            let tr = TrafficParams::with_rate(rng.random_range(0.1..1.0))?;
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.95)).collect();
            let g = network_objective(&Policy::new(p.clone())?, &dm, ch, &tr, true)
                .grad
                .expect("gradient requested");
            let f = |q: &[f64]| -> Result<f64> {
                Ok(network_objective(&Policy::new(q.to_vec())?, &dm, ch, &tr, false).mean_paoi)
            };
            let h = 1e-6;
            let mut worst = 0.0f64;
            let mut scale = 0.0f64;
            for j in 0..n {
                let (mut a, mut b) = (p.clone(), p.clone());
                a[j] += h;
                b[j] -= h;
                let fd = (f(&a)? - f(&b)?) / (2.0 * h);
                worst = worst.max((fd - g[j]).abs());
                scale = scale.max(fd.abs());
            }
            Ok(worst / scale)
        })
        .collect::<Result<_>>()?;
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    Ok(check(
        "objective_gradient",
        worst,
        1e-6,
        format!(
            "{} instances, central differences h=1e-6, error relative to max |dL/dp|",
            errs.len()
        ),
    ))
}

fn gli_gradient(seed: u64, ch: &ChannelParams) -> Result<Check> {
    let cfg = NetConfig {
        conv_sizes: [3, 3, 3],
        hidden_sizes: [8, 8],
        feedback_rounds: 3,
        grid_resolution: 20,
        distance_norm: 40.0,
        seed,
    };
    let mut params = NetParams::init(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3, 0));
    for (name, r) in cfg.tensor_ranges() {
        if name.ends_with("bias") {
            for v in &mut params.as_mut_slice()[r] {
                *v = rng.random_range(0.05..0.3);
            }
        }
    }
    let layout = generate_layout(&LayoutGenSpec {
        n_links: 5,
        side_length: 100.0,
        d_min: 2.0,
        d_max: 30.0,
        seed: rng.random(),
    })?;
    let batch = [Sample::new(layout, ch)?];
    let tr = TrafficParams::with_rate(0.2)?;
    let lg = loss_and_gradients(&batch, &params, &cfg, &tr)?;
    let prev = feedback_prefix(&batch[0], &params, &cfg)?;

    let fd: Vec<f64> = (0..params.as_slice().len())
        .into_par_iter()
        .map(|k| {
            let h = 1e-6 * params.as_slice()[k].abs().max(1.0);
            let mut a = params.clone();
            a.as_mut_slice()[k] += h;
            let mut b = params.clone();
            b.as_mut_slice()[k] -= h;
            Ok((final_round_loss(&batch[0], &prev, &a, &cfg, &tr)?
                - final_round_loss(&batch[0], &prev, &b, &cfg, &tr)?)
                / (2.0 * h))
        })
        .collect::<Result<_>>()?;
    let worst = fd
        .iter()
        .zip(lg.grads.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(check(
        "gli_gradient",
        worst / scale,
        1e-5,
        format!(
            "R=20, c=3, h=8, N=5, f=3, {} parameters, error relative to max |dL/dw|",
            fd.len()
        ),
    ))
}

fn lone_link() -> Result<DistanceMatrix> {
    distance_matrix(&Layout::new(
        vec![Point::new(0.0, 0.0)],
        vec![Point::new(10.0, 0.0)],
        40.0,
    )?)
}

fn forced_queue(seed: u64) -> Result<[Check; 2]> {
    let (q, lambda) = (0.5, 0.5);
    let dm = lone_link()?;
    let pol = Policy::new(vec![1.0])?;
    let tr = TrafficParams::with_rate(lambda)?;
    let ch = ChannelParams::default();
    let stats = sim::run(&SimConfig {
        distances: &dm,
        policy: &pol,
        channel: &ch,
        traffic: &tr,
        n_slots: 1_000_000,
        seed: derive_seed(seed, 4, 0),
        forced_success_prob: Some(q),
        record_samples: false,
        activation: Activation::Persistent,
    })?;
    let link = &stats.links[0];
    let want = paoi_from_success(q, &tr);
    let got = link.mean_paoi().unwrap_or(f64::INFINITY);
    let gamma = preemption_prob(&tr);
    let resolved = (link.preempted + link.completed) as f64;
    let freq = link.preemption_frequency().unwrap_or(0.0);
    let sigmas = (freq - gamma).abs() / (gamma * (1.0 - gamma) / resolved).sqrt();
    Ok([
        check(
            "forced_queue_paoi",
            (got - want).abs() / want,
            0.01,
            format!("q={q}, lambda={lambda}, 1e6 slots: simulated {got}, closed form {want}"),
        ),
        check(
            "preemption_frequency",
            sigmas,
            3.0,
            format!("{freq} vs {gamma} over {resolved} packets, error in sigmas"),
        ),
    ])
}

fn full_sim(seed: u64, ch: &ChannelParams, success: &SuccessFn) -> Result<Check> {
    let layout = generate_layout(&LayoutGenSpec {
        n_links: 10,
        seed: derive_seed(seed, 5, 0),
        ..LayoutGenSpec::default()
    })?;
    let dm = distance_matrix(&layout)?;
    let pol = Policy::uniform(10, 0.5)?;
    let tr = TrafficParams::with_rate(0.5)?;
    let want = (0..10)
        .map(|i| paoi_from_success(success(i, &pol, &dm, ch), &tr))
        .sum::<f64>()
        / 10.0;
    let stats = sim::run(&SimConfig {
        distances: &dm,
        policy: &pol,
        channel: ch,
        traffic: &tr,
        n_slots: 500_000,
        seed: derive_seed(seed, 5, 1),
        forced_success_prob: None,
        record_samples: false,
        activation: Activation::Persistent,
    })?;
    let got = stats.network_mean_paoi().unwrap_or(f64::INFINITY);
    let err = (got - want).abs() / want;
    Ok(check(
        "full_simulation",
        if err.is_nan() { f64::INFINITY } else { err },
        0.03,
        format!("N=10, p=0.5, lambda=0.5, 5e5 slots: simulated {got}, closed form {want}"),
    ))
}

/// Reduced experiment used for the double runs.
fn determinism_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut train = cfg.train;
    train.epochs = 2;
    train.batch_size = 4;
    ExperimentConfig {
        id: format!("{}-validate", cfg.id),
        seed: cfg.seed,
        channel: cfg.channel,
        layout: LayoutGenSpec {
            n_links: 8,
            side_length: 100.0,
            d_min: 2.0,
            d_max: 30.0,
            seed: 0,
        },
        lambdas: vec![0.2, 0.6],
        methods: vec![Method::Uniform, Method::CoordinateDescent],
        n_train: 12,
        n_test: 3,
        eval_layouts: 3,
        cdf_layouts: 3,
        sim_slots: 5_000,
        optimizer: cfg.optimizer,
        net: NetConfig {
            conv_sizes: [3, 3, 3],
            hidden_sizes: [8, 8],
            feedback_rounds: 2,
            grid_resolution: 20,
            distance_norm: 40.0,
            seed: cfg.net.seed,
        },
        train,
        ..ExperimentConfig::default()
    }
}

fn twice(name: &str, mut stage: impl FnMut(&Path) -> Result<String>) -> Result<(Check, String)> {
    let scratch = tempfile::tempdir()?;
    let a = stage(&scratch.path().join("a"))?;
    let b = stage(&scratch.path().join("b"))?;
    let same = a == b;
    Ok((
        check(
            &format!("deterministic_{name}"),
            if same { 0.0 } else { 1.0 },
            0.0,
            format!("first {a}, second {b}"),
        ),
        a,
    ))
}

type Stage<'a> = Box<dyn FnMut(&Path) -> Result<String> + 'a>;

fn determinism(cfg: &ExperimentConfig) -> Result<(Vec<Check>, BTreeMap<String, String>)> {
    let small = determinism_config(cfg);
    let tr = small.traffic(small.lambda)?;
    let layout = generate_layout(&small.layout.with_seed(derive_seed(
        small.seed,
        streams::VALIDATE,
        1,
    )))?;
    let dm = distance_matrix(&layout)?;

    let mut stages: Vec<(&str, Stage)> = vec![
        (
            "gen",
            Box::new(|dir| {
                gen_dataset(&small, dir)?;
                hash_tree(dir)
            }),
        ),
        (
            "paoi_vs_lambda",
            Box::new(|dir| {
                paoi_vs_lambda(&small, Some(dir))?;
                hash_tree(dir)
            }),
        ),
        (
            "paoi_cdf",
            Box::new(|dir| {
                paoi_cdf(&small, Some(dir))?;
                hash_tree(dir)
            }),
        ),
        (
            "train",
            Box::new(|dir| {
                train_net(&small, Some(dir))?;
                hash_tree(dir)
            }),
        ),
        (
            "infer",
            Box::new(|_| {
                let params = NetParams::init(&small.net)?;
                let gs = GridSpec::new(small.net.grid_resolution, layout.side_length())?;
                let inf = gli::infer(&layout, &params, &small.net, &gs)?;
                Ok(sha256_hex(&policy_bytes(&inf)))
            }),
        ),
        (
            "simulate",
            Box::new(|dir| {
                std::fs::create_dir_all(dir)?;
                let pol = Policy::uniform(layout.n_links(), 0.5)?;
                let stats = sim::run(&SimConfig {
                    distances: &dm,
                    policy: &pol,
                    channel: &small.channel,
                    traffic: &tr,
                    n_slots: 20_000,
                    seed: derive_seed(small.seed, streams::VALIDATE, 2),
                    forced_success_prob: None,
                    record_samples: true,
                    activation: Activation::Persistent,
                })?;
                sim::write_summary_csv(&dir.join("summary.csv"), &stats)?;
                sim::write_samples_csv(&dir.join("samples.csv"), &stats)?;
                hash_tree(dir)
            }),
        ),
        (
            "coordinate_descent",
            Box::new(|_| {
                let trace =
                    sched::coordinate_descent(&layout, &small.channel, &tr, &small.optimizer)?;
                let mut bytes = policy_bytes(&trace.policy);
                bytes.extend(trace.objective.iter().flat_map(|v| v.to_le_bytes()));
                Ok(sha256_hex(&bytes))
            }),
        ),
    ];

    let mut checks = Vec::new();
    let mut digests = BTreeMap::new();
    for (name, stage) in stages.iter_mut() {
        let (c, digest) = twice(name, stage)?;
        checks.push(c);
        digests.insert(name.to_string(), digest);
    }
    Ok((checks, digests))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_agrees_with_closed_form_on_two_links() {
        let dm = distance_matrix(
            &Layout::new(
                vec![Point::new(0.0, 0.0), Point::new(15.0, 0.0)],
                vec![Point::new(5.0, 0.0), Point::new(15.0, 8.0)],
                40.0,
            )
            .unwrap(),
        )
        .unwrap();
        let ch = ChannelParams::default();
        let pol = Policy::new(vec![0.3, 0.8]).unwrap();
        for i in 0..2 {
            let a = enumerate_success(i, &pol, &dm, &ch).unwrap();
            let b = success_probability(i, &pol, &dm, &ch);
            assert!((a - b).abs() <= 1e-14 * b);
        }
    }

    #[test]
    fn report_serializes() {
        let r = ValidationReport {
            passed: false,
            checks: vec![check("x", 2.0, 1.0, "d".into())],
            digests: BTreeMap::from([("gen".into(), "ab".into())]),
        };
        let back: ValidationReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(!back.checks[0].passed);
    }
}
