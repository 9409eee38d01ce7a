use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use d2d_paoi::analytics::{network_objective, paoi_breakdown};
use d2d_paoi::gli::{self, GridSpec};
use d2d_paoi::harness::{self, write_meta, ExperimentConfig, Method, Solver};
use d2d_paoi::io::{read_layout, read_policy, write_policy};
use d2d_paoi::model::{derive_seed, distance_matrix, generate_layout, Layout, Policy};
use d2d_paoi::sched;
use d2d_paoi::sim::{self, Activation, SimConfig};

/// Peak age-of-information analysis, simulation and scheduling for D2D
/// networks.
#[derive(Parser)]
#[command(name = "d2d-paoi", version)]
struct Cli {
    /// TOML experiment config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write train/test layout files and a manifest.
    Gen {
        /// Rebuild from an existing manifest instead of the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Closed-form per-link success probability and peak age.
    Analyze(PolicyArgs),
    /// Slot-level Monte Carlo run.
    Simulate {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, default_value_t = 1_000_000)]
        slots: u64,
        /// Replace SINR capture by a Bernoulli(q) coin.
        #[arg(long)]
        forced: Option<f64>,
        /// Only links holding a packet contend.
        #[arg(long)]
        buffered: bool,
        /// Also write every peak-age sample.
        #[arg(long)]
        samples: bool,
    },
    /// Compute an access policy with one method.
    Optimize {
        #[command(flatten)]
        layout: LayoutArgs,
        #[arg(long, default_value = "cd")]
        method: Method,
    },
    /// Train the network and write its weights.
    Train {
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Run a trained network on one layout.
    Infer {
        #[command(flatten)]
        layout: LayoutArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Mean peak age per arrival rate and method.
    PaoiVsLambda,
    /// Per-layout mean peak age and its empirical CDF.
    PaoiCdf,
    /// Single-layout solve time against N.
    BenchTiming,
    /// Run the self-check suite; exit status 1 if any check fails.
    Validate,
}

#[derive(Args)]
struct LayoutArgs {
    /// Layout CSV; omitted means one layout drawn from the config recipe.
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct PolicyArgs {
    #[command(flatten)]
    layout: LayoutArgs,
    /// Policy CSV.
    #[arg(long, conflicts_with = "p")]
    policy: Option<PathBuf>,
    /// Uniform access probability when no policy file is given.
    #[arg(long, default_value_t = 0.5)]
    p: f64,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn layout(&self, args: &LayoutArgs) -> Result<Layout> {
        Ok(match &args.layout {
            Some(path) => read_layout(path)?.layout,
            None => generate_layout(&self.cfg.layout.with_seed(derive_seed(self.cfg.seed, 0, 0)))?,
        })
    }

    fn lambda(&self, args: &LayoutArgs) -> f64 {
        args.lambda.unwrap_or(self.cfg.lambda)
    }

    fn policy(&self, args: &PolicyArgs, n: usize) -> Result<Policy> {
        let pol = match &args.policy {
            Some(path) => read_policy(path)?,
            None => Policy::uniform(n, args.p)?,
        };
        if pol.len() != n {
            bail!("policy has {} entries for {n} links", pol.len());
        }
        Ok(pol)
    }

    fn file(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out_dir {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_analysis(
    path: &Path,
    layout: &Layout,
    pol: &Policy,
    ctx: &Ctx,
    lambda: f64,
) -> Result<f64> {
    let tr = ctx.cfg.traffic(lambda)?;
    let dm = distance_matrix(layout)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["link", "p", "succ_prob", "e_y", "e_paoi"])?;
    for i in 0..layout.n_links() {
        let b = paoi_breakdown(i, pol, &dm, &ctx.cfg.channel, &tr);
        w.write_record([
            i.to_string(),
            pol[i].to_string(),
            b.succ_prob.to_string(),
            b.e_y.to_string(),
            b.e_paoi.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(network_objective(pol, &dm, &ctx.cfg.channel, &tr, false).mean_paoi)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli)?;
    let ctx = Ctx {
        out: cfg.out_dir.clone(),
        cfg,
    };
    let cfg = &ctx.cfg;
    match &cli.cmd {
        Cmd::Gen { manifest } => {
            let m = match manifest {
                Some(path) => harness::gen_dataset_from_manifest(path, &ctx.out)?,
                None => harness::gen_dataset(cfg, &ctx.out)?,
            };
            for s in &m.splits {
                println!("{}: {} layouts", s.name, s.count);
            }
        }
        Cmd::Analyze(args) => {
            let layout = ctx.layout(&args.layout)?;
            let pol = ctx.policy(args, layout.n_links())?;
            let lambda = ctx.lambda(&args.layout);
            let path = ctx.file("analysis.csv")?;
            let mean = write_analysis(&path, &layout, &pol, &ctx, lambda)?;
            write_meta(
                &path,
                "analyze",
                cfg,
                serde_json::json!({ "lambda": lambda, "layout": args.layout.layout }),
            )?;
            println!("mean PAoI {mean}");
        }
        Cmd::Simulate {
            policy,
            slots,
            forced,
            buffered,
            samples,
        } => {
            let layout = ctx.layout(&policy.layout)?;
            let pol = ctx.policy(policy, layout.n_links())?;
            let lambda = ctx.lambda(&policy.layout);
            let dm = distance_matrix(&layout)?;
            let tr = cfg.traffic(lambda)?;
            let seed = derive_seed(cfg.seed, harness::streams::SIM, 0);
            let stats = sim::run(&SimConfig {
                distances: &dm,
                policy: &pol,
                channel: &cfg.channel,
                traffic: &tr,
                n_slots: *slots,
                seed,
                forced_success_prob: *forced,
                record_samples: *samples,
                activation: if *buffered {
                    Activation::Buffered
                } else {
                    Activation::Persistent
                },
            })?;
            let extra = serde_json::json!({
                "lambda": lambda,
                "slots": slots,
                "sim_seed": seed,
                "forced": forced,
                "buffered": buffered,
                "layout": policy.layout.layout,
                "policy": policy.policy,
            });
            let path = ctx.file("sim_summary.csv")?;
            sim::write_summary_csv(&path, &stats)?;
            write_meta(&path, "simulate", cfg, extra.clone())?;
            if *samples {
                let path = ctx.file("sim_samples.csv")?;
                sim::write_samples_csv(&path, &stats)?;
                write_meta(&path, "simulate", cfg, extra)?;
            }
            match stats.network_mean_paoi() {
                Some(m) => println!("simulated mean PAoI {m}"),
                None => println!("some link delivered fewer than two packets"),
            }
        }
        Cmd::Optimize { layout, method } => {
            let l = ctx.layout(layout)?;
            let lambda = ctx.lambda(layout);
            let tr = cfg.traffic(lambda)?;
            let extra =
                serde_json::json!({ "lambda": lambda, "method": method, "layout": layout.layout });
            let pol = match method {
                Method::CoordinateDescent | Method::ProjectedGradient => {
                    let trace = if *method == Method::CoordinateDescent {
                        sched::coordinate_descent(&l, &cfg.channel, &tr, &cfg.optimizer)?
                    } else {
                        sched::projected_gradient(&l, &cfg.channel, &tr, &cfg.optimizer)?
                    };
                    let path = ctx.file("trace.csv")?;
                    sched::write_trace_csv(&path, &trace)?;
                    write_meta(&path, "optimize", cfg, extra.clone())?;
                    trace.policy
                }
                m => Solver::new(cfg, &[*m])?.solve(*m, &l, &tr)?,
            };
            let path = ctx.file("policy.csv")?;
            write_policy(&path, &pol)?;
            write_meta(&path, "optimize", cfg, extra)?;
            let dm = distance_matrix(&l)?;
            println!(
                "{method}: mean PAoI {}",
                network_objective(&pol, &dm, &cfg.channel, &tr, false).mean_paoi
            );
        }
        Cmd::Train { lambda } => {
            let mut c = cfg.clone();
            if let Some(l) = lambda {
                c.lambda = *l;
            }
            c.validate()?;
            let outcome = harness::train_net(&c, Some(&ctx.out))?;
            let best = &outcome.curve.records[outcome.curve.best_epoch];
            println!(
                "best epoch {} (train {}, validation {})",
                best.epoch,
                best.train_loss,
                best.val_loss.map_or("n/a".into(), |v| v.to_string())
            );
            if let Some(w) = outcome.weights_path {
                println!("weights written to {}", w.display());
            }
        }
        Cmd::Infer { layout, weights } => {
            let l = ctx.layout(layout)?;
            let path = weights
                .clone()
                .or_else(|| cfg.weights.clone())
                .context("infer needs --weights or a weights entry in the config")?;
            let params = gli::load_params(&path)?;
            let net = params.config();
            let gs = GridSpec::new(net.grid_resolution, l.side_length())?;
            let inf = gli::infer_with(&l, &params, net, &gs, cfg.optimizer.p_floor)?;
            let out = ctx.file("policy.csv")?;
            write_policy(&out, &inf.policy)?;
            write_meta(
                &out,
                "infer",
                cfg,
                serde_json::json!({
                    "weights": path,
                    "layout": layout.layout,
                    "conv_macs": inf.cost.conv_macs,
                    "fc_macs": inf.cost.fc_macs,
                }),
            )?;
            let tr = cfg.traffic(ctx.lambda(layout))?;
            let dm = distance_matrix(&l)?;
            println!(
                "mean PAoI {} ({} multiply-adds)",
                network_objective(&inf.policy, &dm, &cfg.channel, &tr, false).mean_paoi,
                inf.cost.total()
            );
        }
        Cmd::PaoiVsLambda => {
            let rows = harness::paoi_vs_lambda(cfg, Some(&ctx.out))?;
            println!(
                "{} rows written to {}",
                rows.len(),
                ctx.out.join("paoi_vs_lambda.csv").display()
            );
        }
        Cmd::PaoiCdf => {
            let rows = harness::paoi_cdf(cfg, Some(&ctx.out))?;
            println!(
                "{} rows written to {}",
                rows.len(),
                ctx.out.join("paoi_cdf.csv").display()
            );
        }
        Cmd::BenchTiming => {
            let rows = harness::bench_timing(cfg, Some(&ctx.out))?;
            for r in &rows {
                println!(
                    "N={:<4} {:<20} {:>12.3} ms",
                    r.n,
                    r.method.name(),
                    r.median_ms
                );
            }
        }
        Cmd::Validate => {
            let report = harness::validate(cfg)?;
            let path = ctx.file("validate.json")?;
            fs::write(&path, report.to_json())?;
            for c in &report.checks {
                println!(
                    "{} {:<32} error {:.3e} (tolerance {:.1e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.error,
                    c.tolerance
                );
            }
            return Ok(report.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
