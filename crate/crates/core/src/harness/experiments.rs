use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{load_split, streams, write_meta, ExperimentConfig, Method, Solver};
use crate::analytics::network_objective;
use crate::error::{invalid, Result};
use crate::gli::{self, GridSpec, NetParams, Sample, TrainingCurve};
use crate::model::{derive_seed, distance_matrix, generate_layout, Layout, LayoutGenSpec};
use crate::sched;
use crate::sim::{self, Activation, SimConfig};

/// Evaluation layouts: the dataset's test split when configured, otherwise
/// generated from `stream`.
fn layouts(cfg: &ExperimentConfig, count: usize, stream: u64) -> Result<Vec<Layout>> {
    if let Some(dir) = &cfg.dataset_dir {
        let mut v = load_split(&dir.join("test"))?;
        v.truncate(count);
        if v.is_empty() {
            return Err(invalid(format!("no test layouts under {}", dir.display())));
        }
        return Ok(v);
    }
    (0..count as u64)
        .into_par_iter()
        .map(|k| generate_layout(&cfg.layout.with_seed(derive_seed(cfg.seed, stream, k))))
        .collect()
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub method: Method,
    pub mean_paoi: f64,
    /// Simulated network mean over the same layouts; `None` when simulation
    /// is off or some link never delivered.
    pub sim_paoi: Option<f64>,
    pub ci95: Option<f64>,
}

struct Point {
    analytic: f64,
    sim: Option<(f64, f64)>,
}

/// Mean analytic peak age per arrival rate and method, with an optional
/// simulator column. Writes `paoi_vs_lambda.csv` when `out` is given.
pub fn paoi_vs_lambda(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<LambdaRow>> {
    cfg.validate()?;
    let solver = Solver::new(cfg, &cfg.methods)?;
    let layouts = layouts(cfg, cfg.eval_layouts, streams::EVAL)?;
    let (nl, nm, nk) = (cfg.lambdas.len(), cfg.methods.len(), layouts.len());
    let jobs: Vec<(usize, usize, usize)> = (0..nl * nm * nk)
        .map(|j| (j / (nm * nk), (j / nk) % nm, j % nk))
        .collect();
    let points: Vec<Point> = jobs
        .par_iter()
        .map(|&(li, mi, k)| {
            let tr = cfg.traffic(cfg.lambdas[li])?;
            let layout = &layouts[k];
            let pol = solver.solve(cfg.methods[mi], layout, &tr)?;
            let dm = distance_matrix(layout)?;
            let analytic = network_objective(&pol, &dm, &cfg.channel, &tr, false).mean_paoi;
            let sim = if cfg.sim_slots > 0 {
                let seed = derive_seed(
                    derive_seed(cfg.seed, streams::SIM, li as u64),
                    mi as u64,
                    k as u64,
                );
                let stats = sim::run(&SimConfig {
                    distances: &dm,
                    policy: &pol,
                    channel: &cfg.channel,
                    traffic: &tr,
                    n_slots: cfg.sim_slots,
                    seed,
                    forced_success_prob: None,
                    record_samples: false,
                    activation: Activation::Persistent,
                })?;
                let n = stats.links.len() as f64;
                stats.network_mean_paoi().map(|m| {
                    let var = stats
                        .links
                        .iter()
                        .map(|l| {
                            if l.paoi.count > 1 {
                                l.paoi.std_error().powi(2)
                            } else {
                                0.0
                            }
                        })
                        .sum::<f64>()
                        / (n * n);
                    (m, var)
                })
            } else {
                None
            };
            Ok(Point { analytic, sim })
        })
        .collect::<Result<_>>()?;

    let k = layouts.len();
    let mut rows = Vec::new();
    for (li, &lambda) in cfg.lambdas.iter().enumerate() {
        for (mi, &method) in cfg.methods.iter().enumerate() {
            let base = (li * cfg.methods.len() + mi) * k;
            let pts = &points[base..base + k];
            let mean_paoi = pts.iter().map(|p| p.analytic).sum::<f64>() / k as f64;
            let sims: Option<Vec<(f64, f64)>> = pts.iter().map(|p| p.sim).collect();
            let (sim_paoi, ci95) = match sims {
                Some(s) => {
                    let m = s.iter().map(|x| x.0).sum::<f64>() / k as f64;
                    let v = s.iter().map(|x| x.1).sum::<f64>() / (k * k) as f64;
                    (Some(m), Some(1.96 * v.sqrt()))
                }
                None => (None, None),
            };
            rows.push(LambdaRow {
                lambda,
                method,
                mean_paoi,
                sim_paoi,
                ci95,
            });
        }
    }

    if let Some(dir) = out {
        let path = dir.join("paoi_vs_lambda.csv");
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.lambda.to_string(),
                    r.method.to_string(),
                    r.mean_paoi.to_string(),
                    opt(r.sim_paoi),
                    opt(r.ci95),
                ]
            })
            .collect();
        write_rows(
            &path,
            &["lambda", "method", "mean_paoi", "sim_paoi", "ci95"],
            &body,
        )?;
        write_meta(
            &path,
            "paoi-vs-lambda",
            cfg,
            json!({
                "layouts": k,
                "eval_stream": streams::EVAL,
                "sim_stream": streams::SIM,
                "note": "uniform is the p = 0.5 baseline standing in for the external benchmark",
            }),
        )?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub method: Method,
    pub layout: usize,
    pub mean_paoi: f64,
    pub cdf: f64,
}

/// Per-layout network mean peak age at `cfg.lambda`, sorted ascending per
/// method with the empirical CDF.
pub fn paoi_cdf(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<CdfRow>> {
    cfg.validate()?;
    if cfg.cdf_layouts < 2 {
        return Err(invalid("the CDF needs at least two layouts"));
    }
    let solver = Solver::new(cfg, &cfg.methods)?;
    let layouts = layouts(cfg, cfg.cdf_layouts, streams::CDF)?;
    let tr = cfg.traffic(cfg.lambda)?;
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let vals: Vec<f64> = layouts
            .par_iter()
            .map(|l| {
                let pol = solver.solve(method, l, &tr)?;
                Ok(
                    network_objective(&pol, &distance_matrix(l)?, &cfg.channel, &tr, false)
                        .mean_paoi,
                )
            })
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
        let k = vals.len() as f64;
        rows.extend(order.iter().enumerate().map(|(rank, &i)| CdfRow {
            method,
            layout: i,
            mean_paoi: vals[i],
            cdf: (rank + 1) as f64 / k,
        }));
    }
    if let Some(dir) = out {
        let path = dir.join("paoi_cdf.csv");
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.method.to_string(),
                    r.layout.to_string(),
                    r.mean_paoi.to_string(),
                    r.cdf.to_string(),
                ]
            })
            .collect();
        write_rows(&path, &["method", "layout", "mean_paoi", "cdf"], &body)?;
        write_meta(
            &path,
            "paoi-cdf",
            cfg,
            json!({ "layouts": layouts.len(), "lambda": cfg.lambda, "cdf_stream": streams::CDF }),
        )?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub n: usize,
    pub method: Method,
    pub median_ms: f64,
    pub reps: usize,
    /// Exact work counter of one run: multiply-adds for the network,
    /// interferer terms for coordinate descent.
    pub ops: Option<u64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Wall-clock per single-layout optimization over `cfg.timing_n`: one
/// warm-up run, then the median of `cfg.timing_reps` timed runs. Without a
/// weights file the network runs with freshly initialized parameters,
/// which costs the same.
pub fn bench_timing(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<TimingRow>> {
    cfg.validate()?;
    let untrained = cfg.weights.is_none();
    let net = match &cfg.weights {
        Some(p) => gli::load_params(p)?,
        None => NetParams::init(&cfg.net)?,
    };
    let solver = Solver::with_params(cfg, Some(net.clone()));
    let tr = cfg.traffic(cfg.lambda)?;
    let mut rows = Vec::new();
    for &n in &cfg.timing_n {
        let spec = LayoutGenSpec {
            n_links: n,
            seed: derive_seed(cfg.seed, streams::TIMING, n as u64),
            ..cfg.layout
        };
        let layout = generate_layout(&spec)?;
        for &method in &cfg.methods {
            let ops = match method {
                Method::GliNet => {
                    let gs = GridSpec::new(net.config().grid_resolution, layout.side_length())?;
                    Some(
                        gli::infer_with(&layout, &net, net.config(), &gs, cfg.optimizer.p_floor)?
                            .cost
                            .total(),
                    )
                }
                Method::CoordinateDescent => Some(
                    sched::coordinate_descent(&layout, &cfg.channel, &tr, &cfg.optimizer)?
                        .sweep_terms
                        .iter()
                        .sum(),
                ),
                Method::Uniform => Some(0),
                Method::ProjectedGradient => None,
            };
            solver.solve(method, &layout, &tr)?;
            let times: Vec<f64> = (0..cfg.timing_reps)
                .map(|_| {
                    let t = Instant::now();
                    solver.solve(method, &layout, &tr)?;
                    Ok(t.elapsed().as_secs_f64() * 1e3)
                })
                .collect::<Result<_>>()?;
            rows.push(TimingRow {
                n,
                method,
                median_ms: median(times),
                reps: cfg.timing_reps,
                ops,
            });
        }
    }
    if let Some(dir) = out {
        let path = dir.join("bench_timing.csv");
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.n.to_string(),
                    r.method.to_string(),
                    r.median_ms.to_string(),
                    r.reps.to_string(),
                ]
            })
            .collect();
        write_rows(&path, &["N", "method", "median_ms", "reps"], &body)?;
        write_meta(
            &path,
            "bench-timing",
            cfg,
            json!({ "untrained_network": untrained }),
        )?;
        let ops_path = dir.join("bench_ops.csv");
        let ops: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.n.to_string(),
                    r.method.to_string(),
                    r.ops.map(|o| o.to_string()).unwrap_or_default(),
                ]
            })
            .collect();
        write_rows(&ops_path, &["N", "method", "ops"], &ops)?;
        write_meta(
            &ops_path,
            "bench-timing",
            cfg,
            json!({ "untrained_network": untrained }),
        )?;
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub struct TrainOutcome {
    pub params: NetParams,
    pub curve: TrainingCurve,
    pub weights_path: Option<PathBuf>,
}

/// Trains the configured network at `cfg.lambda` on the dataset's train
/// split, or on `cfg.n_train` generated layouts.
pub fn train_net(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let layouts = match &cfg.dataset_dir {
        Some(dir) => {
            let mut v = load_split(&dir.join("train"))?;
            v.truncate(cfg.n_train);
            v
        }
        None => (0..cfg.n_train as u64)
            .into_par_iter()
            .map(|k| {
                generate_layout(
                    &cfg.layout
                        .with_seed(derive_seed(cfg.seed, streams::TRAIN, k)),
                )
            })
            .collect::<Result<_>>()?,
    };
    let samples: Vec<Sample> = layouts
        .into_par_iter()
        .map(|l| Sample::new(l, &cfg.channel))
        .collect::<Result<_>>()?;
    let tr = cfg.traffic(cfg.lambda)?;
    let (params, curve) = gli::train(
        &samples,
        NetParams::init(&cfg.net)?,
        &cfg.net,
        &cfg.train,
        &tr,
    )?;

    let mut weights_path = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let w = dir.join("gli_net.bin");
        gli::save_params(&w, &params)?;
        let path = dir.join("training_curve.csv");
        let body: Vec<Vec<String>> = curve
            .records
            .iter()
            .map(|r| {
                vec![
                    r.epoch.to_string(),
                    r.train_loss.to_string(),
                    opt(r.val_loss),
                    r.learning_rate.to_string(),
                ]
            })
            .collect();
        write_rows(
            &path,
            &["epoch", "train_loss", "val_loss", "learning_rate"],
            &body,
        )?;
        write_meta(
            &path,
            "train",
            cfg,
            json!({ "best_epoch": curve.best_epoch, "samples": samples.len(), "weights": w }),
        )?;
        weights_path = Some(w);
    }
    Ok(TrainOutcome {
        params,
        curve,
        weights_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::hash_tree;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            layout: LayoutGenSpec {
                n_links: 8,
                ..LayoutGenSpec::default()
            },
            lambdas: vec![0.2, 0.6],
            eval_layouts: 3,
            cdf_layouts: 4,
            sim_slots: 20_000,
            timing_n: vec![4, 8],
            timing_reps: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn lambda_sweep_shape_and_reproducibility() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let rows = paoi_vs_lambda(&tiny(), Some(&a)).unwrap();
        paoi_vs_lambda(&tiny(), Some(&b)).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(hash_tree(&a).unwrap(), hash_tree(&b).unwrap());
        assert!(a.join("paoi_vs_lambda.meta.json").exists());
        for pair in rows.chunks(2) {
            assert!(pair[1].mean_paoi <= pair[0].mean_paoi + 1e-9);
            let sim = pair[0].sim_paoi.unwrap();
            assert!((sim / pair[0].mean_paoi - 1.0).abs() < 0.1);
        }
        let text = fs::read_to_string(a.join("paoi_vs_lambda.csv")).unwrap();
        assert!(text.starts_with("lambda,method,mean_paoi,sim_paoi,ci95\n"));
    }

    #[test]
    fn cdf_is_sorted_and_ends_at_one() {
        let rows = paoi_cdf(&tiny(), None).unwrap();
        assert_eq!(rows.len(), 8);
        for m in rows.chunks(4) {
            assert!(m
                .windows(2)
                .all(|w| w[0].mean_paoi <= w[1].mean_paoi && w[0].cdf < w[1].cdf));
            assert_eq!(m[3].cdf, 1.0);
        }
        let mut one = tiny();
        one.cdf_layouts = 1;
        assert!(paoi_cdf(&one, None).is_err());
    }

    #[test]
    fn timing_rows_and_counters() {
        let mut cfg = tiny();
        cfg.methods = vec![Method::GliNet, Method::CoordinateDescent];
        cfg.net.grid_resolution = 20;
        let rows = bench_timing(&cfg, None).unwrap();
        assert_eq!(rows.len(), 4);
        let (conv, fc) = cfg.net.inference_macs(8);
        assert_eq!(rows[2].ops, Some(conv + fc));
        assert!(rows.iter().all(|r| r.median_ms >= 0.0 && r.reps == 2));
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn training_from_config_writes_weights() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.n_train = 12;
        cfg.net.grid_resolution = 20;
        cfg.net.conv_sizes = [3, 3, 3];
        cfg.net.hidden_sizes = [6, 6];
        cfg.train.epochs = 2;
        cfg.train.batch_size = 4;
        let out = train_net(&cfg, Some(dir.path())).unwrap();
        let w = out.weights_path.unwrap();
        assert_eq!(gli::load_params(&w).unwrap(), out.params);
        assert_eq!(out.curve.records.len(), 3);

        cfg.weights = Some(w);
        cfg.methods = vec![Method::Uniform, Method::GliNet];
        cfg.sim_slots = 0;
        let rows = paoi_vs_lambda(&cfg, None).unwrap();
        assert!(rows
            .iter()
            .all(|r| r.mean_paoi.is_finite() && r.sim_paoi.is_none()));
    }
}
