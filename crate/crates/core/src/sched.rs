//! Non-learned policy optimizers over the closed-form network objective.
//!
//! [`coordinate_descent`] is the iterative baseline: it sweeps the links
//! and solves one bounded scalar problem per link with every other access
//! probability fixed. The scalar problem only needs the link's own
//! interference product and the products of the links it disturbs, so one
//! evaluation costs O(N) and a sweep costs Theta(N^2) term evaluations,
//! which [`OptimizerTrace::sweep_terms`] records.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::analytics::{survival_prob, InterferenceModel};
use crate::error::{invalid, Result};
use crate::model::{distance_matrix, ChannelParams, Layout, Policy, TrafficParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Sweeps (coordinate descent) or steps (projected gradient).
    pub max_iters: usize,
    /// Stop once an iteration improves the objective by less than this.
    pub tol: f64,
    pub p_floor: f64,
    /// Objective evaluations per golden-section search.
    pub scalar_evals: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Starting access probability for every link.
    pub init_p: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-9,
            p_floor: 1e-4,
            scalar_evals: 60,
            learning_rate: 0.05,
            momentum: 0.9,
            init_p: 0.5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_floor > 0.0 && self.p_floor < 1.0) {
            return Err(invalid(format!(
                "p_floor must lie in (0, 1), got {}",
                self.p_floor
            )));
        }
        if !(self.tol > 0.0) {
            return Err(invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if self.scalar_evals < 3 {
            return Err(invalid("scalar_evals must be at least 3"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("need learning_rate > 0 and momentum in [0, 1)"));
        }
        if !(self.init_p > 0.0 && self.init_p <= 1.0) {
            return Err(invalid(format!(
                "init_p must lie in (0, 1], got {}",
                self.init_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerTrace {
    /// Objective before the first iteration, then after each iteration.
    pub objective: Vec<f64>,
    /// Elapsed milliseconds matching each entry of `objective`.
    pub wall_ms: Vec<f64>,
    pub policy: Policy,
    pub iterations: usize,
    pub wall_time: Duration,
    pub converged: bool,
    /// Interferer/link term evaluations per iteration.
    pub sweep_terms: Vec<u64>,
}

impl OptimizerTrace {
    pub fn final_objective(&self) -> f64 {
        *self
            .objective
            .last()
            .expect("trace always holds the initial objective")
    }
}

pub fn uniform_policy(n: usize, p: f64) -> Result<Policy> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid(format!(
            "uniform access probability must lie in (0, 1], got {p}"
        )));
    }
    Policy::uniform(n, p)
}

/// Everything one coordinate update needs, with term accounting.
struct Coordinates<'a> {
    model: &'a InterferenceModel,
    /// `1 / (N lambda (1 - gamma))`.
    scale: f64,
    mu: f64,
    p: Vec<f64>,
    phi: Vec<f64>,
    terms: u64,
}

impl<'a> Coordinates<'a> {
    fn refresh(&mut self) -> f64 {
        let n = self.p.len();
        for i in 0..n {
            self.phi[i] = self.p[i] * self.model.rest(i, &self.p);
        }
        self.terms += (n * n) as u64;
        self.objective()
    }

    fn objective(&self) -> f64 {
        self.mu + self.scale * self.phi.iter().map(|s| 1.0 / s).sum::<f64>()
    }

    /// Objective as a function of `p_i` alone, given the link's own product
    /// `rest_i` and the others' products `others[k]` without link i.
    fn restricted(&mut self, i: usize, x: f64, rest_i: f64, others: &[f64]) -> f64 {
        let mut acc = 1.0 / (x * rest_i);
        for (k, &r) in others.iter().enumerate() {
            if k != i {
                acc += 1.0 / (r * (1.0 - x * self.model.coupling(i, k)));
            }
        }
        self.terms += self.p.len() as u64;
        self.mu + self.scale * acc
    }

    fn update(&mut self, i: usize, lo: f64, evals: usize, others: &mut Vec<f64>) {
        let n = self.p.len();
        let rest_i = self.model.rest(i, &self.p);
        others.clear();
        others.extend((0..n).map(|k| {
            if k == i {
                0.0
            } else {
                self.phi[k] / (1.0 - self.p[i] * self.model.coupling(i, k))
            }
        }));
        self.terms += 2 * (n as u64 - 1);

        let current = self.p[i];
        let current_val = self.restricted(i, current, rest_i, others);
        if !current_val.is_finite() && rest_i == 0.0 {
            return;
        }

        // Golden-section search on [lo, 1]; ties keep the smaller p.
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (lo, 1.0);
        let mut x1 = b - inv_phi * (b - a);
        let mut x2 = a + inv_phi * (b - a);
        let mut f1 = self.restricted(i, x1, rest_i, others);
        let mut f2 = self.restricted(i, x2, rest_i, others);
        for _ in 2..evals {
            if f1 <= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - inv_phi * (b - a);
                f1 = self.restricted(i, x1, rest_i, others);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + inv_phi * (b - a);
                f2 = self.restricted(i, x2, rest_i, others);
            }
        }
        let (xg, fg) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
        let f_lo = self.restricted(i, lo, rest_i, others);
        let f_hi = self.restricted(i, 1.0, rest_i, others);

        let mut cands = [(lo, f_lo), (xg, fg), (current, current_val), (1.0, f_hi)];
        cands.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (mut best_x, mut best_f) = cands[0];
        for &(x, f) in &cands[1..] {
            if f < best_f {
                best_x = x;
                best_f = f;
            }
        }
        // Strict improvement beyond rounding keeps the recomputed sweep
        // objective monotone.
        if !(best_f < current_val - 1e-12 * current_val.abs()) || best_x == current {
            return;
        }

        self.p[i] = best_x;
        for k in 0..n {
            self.phi[k] = if k == i {
                best_x * rest_i
            } else {
                others[k] * (1.0 - best_x * self.model.coupling(i, k))
            };
        }
        self.terms += n as u64;
    }
}

fn start_policy(model: &InterferenceModel, tr: &TrafficParams, cfg: &OptimizerConfig) -> Vec<f64> {
    let n = model.n_links();
    let p = vec![cfg.init_p.max(cfg.p_floor); n];
    if model.objective(&p, tr, false).mean_paoi.is_finite() {
        p
    } else {
        vec![0.5f64.max(cfg.p_floor); n]
    }
}

/// Cyclic coordinate descent with a golden-section search per link.
pub fn coordinate_descent(
    layout: &Layout,
    ch: &ChannelParams,
    tr: &TrafficParams,
    cfg: &OptimizerConfig,
) -> Result<OptimizerTrace> {
    cfg.validate()?;
    let started = Instant::now();
    let dm = distance_matrix(layout)?;
    let model = InterferenceModel::new(&dm, ch);
    let n = layout.n_links();
    if n == 0 {
        return Err(invalid("layout has no links"));
    }

    let p = start_policy(&model, tr, cfg);
    let mut state = Coordinates {
        model: &model,
        scale: 1.0 / (n as f64 * tr.arrival_rate * survival_prob(tr)),
        mu: tr.slot_duration,
        phi: vec![0.0; n],
        p,
        terms: 0,
    };
    let mut objective = vec![state.refresh()];
    let mut wall_ms = vec![started.elapsed().as_secs_f64() * 1e3];
    let mut sweep_terms = Vec::new();
    let mut converged = false;
    let mut scratch = Vec::with_capacity(n);

    for _ in 0..cfg.max_iters {
        state.terms = 0;
        for i in 0..n {
            state.update(i, cfg.p_floor, cfg.scalar_evals, &mut scratch);
        }
        let value = state.refresh();
        let prev = *objective.last().unwrap();
        objective.push(value);
        wall_ms.push(started.elapsed().as_secs_f64() * 1e3);
        sweep_terms.push(state.terms);
        if prev - value < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(OptimizerTrace {
        iterations: sweep_terms.len(),
        policy: Policy::new(state.p)?,
        objective,
        wall_ms,
        wall_time: started.elapsed(),
        converged,
        sweep_terms,
    })
}

const MAX_STEP_HALVINGS: usize = 40;

/// Heavy-ball projected gradient descent on the exact objective gradient.
/// A step that does not decrease the objective halves the learning rate
/// and resets the momentum. Returns the best iterate.
pub fn projected_gradient(
    layout: &Layout,
    ch: &ChannelParams,
    tr: &TrafficParams,
    cfg: &OptimizerConfig,
) -> Result<OptimizerTrace> {
    cfg.validate()?;
    let started = Instant::now();
    let dm = distance_matrix(layout)?;
    let model = InterferenceModel::new(&dm, ch);
    let n = layout.n_links();
    if n == 0 {
        return Err(invalid("layout has no links"));
    }
    let clip = |v: f64| v.clamp(cfg.p_floor, 1.0);
    let terms_per_eval = (2 * n * n) as u64;

    let mut p = start_policy(&model, tr, cfg);
    let mut report = model.objective(&p, tr, true);
    let mut objective = vec![report.mean_paoi];
    let mut wall_ms = vec![started.elapsed().as_secs_f64() * 1e3];
    let mut sweep_terms = Vec::new();
    let mut velocity = vec![0.0; n];
    let mut eta = cfg.learning_rate;
    let mut converged = false;

    for _ in 0..cfg.max_iters {
        let grad = report.grad.as_ref().expect("gradient requested");
        let mut accepted = None;
        let mut evals = 0u64;
        for _ in 0..MAX_STEP_HALVINGS {
            let v: Vec<f64> = velocity
                .iter()
                .zip(grad)
                .map(|(v, g)| cfg.momentum * v - eta * n as f64 * g)
                .collect();
            let cand: Vec<f64> = p.iter().zip(&v).map(|(x, d)| clip(x + d)).collect();
            let r = model.objective(&cand, tr, true);
            evals += 1;
            if r.mean_paoi.is_finite() && r.mean_paoi <= report.mean_paoi {
                accepted = Some((cand, v, r));
                break;
            }
            eta *= 0.5;
            velocity.iter_mut().for_each(|v| *v = 0.0);
        }
        sweep_terms.push(evals * terms_per_eval);
        let Some((cand, v, r)) = accepted else {
            converged = true;
            break;
        };
        let gain = report.mean_paoi - r.mean_paoi;
        p = cand;
        velocity = v;
        report = r;
        objective.push(report.mean_paoi);
        wall_ms.push(started.elapsed().as_secs_f64() * 1e3);
        if gain < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(OptimizerTrace {
        iterations: sweep_terms.len(),
        policy: Policy::new(p)?,
        objective,
        wall_ms,
        wall_time: started.elapsed(),
        converged,
        sweep_terms,
    })
}

/// `iter,objective,wall_ms`.
pub fn write_trace_csv(path: &std::path::Path, trace: &OptimizerTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "objective", "wall_ms"])?;
    for (k, (f, ms)) in trace.objective.iter().zip(&trace.wall_ms).enumerate() {
        w.write_record([k.to_string(), f.to_string(), format!("{ms:.3}")])?;
    }
    w.flush()?;
    Ok(())
}
