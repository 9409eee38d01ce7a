//! Closed-form success probability and peak-age analysis.
//!
//! Per-slot capture over Rayleigh fades, averaged over independent
//! Bernoulli(p_j) activations of every other link, gives the mean success
//! probability `phi_i`. With a preemptive unit buffer, Poisson(lambda)
//! arrivals and deterministic service `mu`, the mean peak age of link `i` is
//!
//! ```text
//! E[A_P] = 1 / (lambda (1 - gamma) phi_i) + mu,    gamma = 1 - exp(-mu lambda)
//! ```
//!
//! The recursion behind it can be written with `(1 - beta)` in the waiting
//! term's denominator; that is a misprint for `(1 - gamma)` (the capture
//! ratio plays no role in the queueing recursion), and `(1 - gamma)` is what
//! is implemented here.
//!
//! Two quantities share a Greek letter in the usual notation: the path-loss
//! exponent and the per-slot failure probability. They are
//! [`ChannelParams::pathloss_exp`] and [`PaoiBreakdown::fail_prob`].

use crate::error::{Error, Result};
use crate::model::{ChannelParams, DistanceMatrix, Policy, TrafficParams};

/// Smallest success probability used when a gradient is still needed;
/// equivalently the failure probability is clamped at `1 - 1e-9`.
pub const SUCCESS_FLOOR: f64 = 1e-9;

/// `exp(-beta sigma^2 / (P_t d_ii^-alpha))`: success probability of an
/// active, interference-free link.
pub fn noise_factor(i: usize, dm: &DistanceMatrix, ch: &ChannelParams) -> f64 {
    let d = dm.direct(i);
    (-ch.capture_ratio * ch.noise_power * d.powf(ch.pathloss_exp) / ch.tx_power).exp()
}

/// Probability that an active interferer `j` breaks link `i`'s capture
/// (over the fades): `1 / (1 + d_ii^-alpha / (beta d_ji^-alpha))`.
#[inline]
fn coupling(d_ii: f64, d_ji: f64, ch: &ChannelParams) -> f64 {
    1.0 / (1.0 + (d_ji / d_ii).powf(ch.pathloss_exp) / ch.capture_ratio)
}

/// Success probability of link `i` given that exactly the links in `active`
/// interfere, averaged over the Rayleigh fades only.
pub fn cond_success_given_active_set(
    i: usize,
    active: &[usize],
    dm: &DistanceMatrix,
    ch: &ChannelParams,
) -> Result<f64> {
    if active.contains(&i) {
        return Err(Error::InvalidParam(format!(
            "link {i} cannot interfere with itself"
        )));
    }
    let d_ii = dm.direct(i);
    let sir = active.iter().fold(1.0, |acc, &j| {
        let ratio = (dm.get(j, i) / d_ii).powf(-ch.pathloss_exp);
        acc / (1.0 + ch.capture_ratio * ratio)
    });
    Ok(noise_factor(i, dm, ch) * sir)
}

/// Mean per-slot success probability of link `i` under `pol`.
pub fn success_probability(i: usize, pol: &Policy, dm: &DistanceMatrix, ch: &ChannelParams) -> f64 {
    let d_ii = dm.direct(i);
    let mut phi = pol[i] * noise_factor(i, dm, ch);
    for j in (0..pol.len()).filter(|&j| j != i) {
        phi *= 1.0 - pol[j] * coupling(d_ii, dm.get(j, i), ch);
    }
    phi
}

/// Probability that a new arrival lands inside a service time:
/// `1 - exp(-mu lambda)`.
pub fn preemption_prob(tr: &TrafficParams) -> f64 {
    -(-tr.slot_duration * tr.arrival_rate).exp_m1()
}

/// `exp(-mu lambda)`, computed without cancellation.
pub fn survival_prob(tr: &TrafficParams) -> f64 {
    (-tr.slot_duration * tr.arrival_rate).exp()
}

/// Mean interarrival time given that it is shorter than the service time:
/// `1/lambda + mu (1 - 1/gamma)`.
pub fn effective_generation_interval(tr: &TrafficParams) -> Result<f64> {
    let (lambda, mu) = (tr.arrival_rate, tr.slot_duration);
    if preemption_prob(tr) == 0.0 {
        return Err(Error::Degenerate(format!(
            "no preemption is possible with lambda={lambda}, mu={mu}"
        )));
    }
    if mu.is_infinite() {
        return Ok(1.0 / lambda);
    }
    let x = lambda * mu;
    if x < 1e-3 {
        // mu (1/x - 1/(e^x - 1)) = mu (1/2 - x/12 + x^3/720 - ...)
        return Ok(mu * (0.5 - x / 12.0 + x.powi(3) / 720.0));
    }
    // Same as 1/lambda + mu (1 - 1/gamma), rearranged to avoid cancellation.
    Ok(1.0 / lambda - mu / x.exp_m1())
}

/// Per-link analytic quantities, all times in slots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaoiBreakdown {
    pub succ_prob: f64,
    pub fail_prob: f64,
    pub preempt_prob: f64,
    pub e_t: f64,
    pub e_w: f64,
    pub e_s: f64,
    pub e_y: f64,
    pub e_paoi: f64,
}

/// Breakdown for a link whose per-slot success probability is `succ`.
/// `succ = 0` yields `+inf` times rather than an error.
pub fn breakdown_from_success(succ: f64, tr: &TrafficParams) -> PaoiBreakdown {
    let lambda = tr.arrival_rate;
    let mu = tr.slot_duration;
    let gamma = preemption_prob(tr);
    let q = 1.0 - succ;
    let denom = lambda * survival_prob(tr) * succ;
    let (e_t, e_y) = if denom > 0.0 {
        ((gamma + q - gamma * q) / denom, 1.0 / denom)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    PaoiBreakdown {
        succ_prob: succ,
        fail_prob: q,
        preempt_prob: gamma,
        e_t,
        e_w: 1.0 / lambda,
        e_s: mu,
        e_y,
        e_paoi: e_y + mu,
    }
}

pub fn paoi_breakdown(
    i: usize,
    pol: &Policy,
    dm: &DistanceMatrix,
    ch: &ChannelParams,
    tr: &TrafficParams,
) -> PaoiBreakdown {
    breakdown_from_success(success_probability(i, pol, dm, ch), tr)
}

/// Mean peak age as a function of success probability.
#[inline]
pub fn paoi_from_success(succ: f64, tr: &TrafficParams) -> f64 {
    1.0 / (tr.arrival_rate * survival_prob(tr) * succ) + tr.slot_duration
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub per_link_paoi: Vec<f64>,
    pub mean_paoi: f64,
    /// d(mean_paoi)/dp_i.
    pub grad: Option<Vec<f64>>,
    /// Some link had success probability below [`SUCCESS_FLOOR`]; its
    /// gradient contribution was evaluated at the floor.
    pub clamped: bool,
}

/// Network mean of the per-link mean peak age, optionally with its exact
/// gradient in the policy.
pub fn network_objective(
    pol: &Policy,
    dm: &DistanceMatrix,
    ch: &ChannelParams,
    tr: &TrafficParams,
    want_grad: bool,
) -> ObjectiveReport {
    InterferenceModel::new(dm, ch).objective(pol.as_slice(), tr, want_grad)
}

/// Precomputed noise factors and pairwise couplings for one layout. Every
/// quantity above is a cheap product over these once they exist.
#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceModel {
    n: usize,
    noise: Vec<f64>,
    /// `coupling[j * n + i]`: chance an active `j` defeats `i`'s capture.
    /// Zero on the diagonal.
    coupling: Vec<f64>,
}

impl InterferenceModel {
    pub fn new(dm: &DistanceMatrix, ch: &ChannelParams) -> Self {
        let n = dm.n_links();
        let noise = (0..n).map(|i| noise_factor(i, dm, ch)).collect();
        let mut c = vec![0.0; n * n];
        for j in 0..n {
            for i in (0..n).filter(|&i| i != j) {
                c[j * n + i] = coupling(dm.direct(i), dm.get(j, i), ch);
            }
        }
        Self {
            n,
            noise,
            coupling: c,
        }
    }

    pub fn n_links(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn coupling(&self, j: usize, i: usize) -> f64 {
        self.coupling[j * self.n + i]
    }

    #[inline]
    pub fn noise(&self, i: usize) -> f64 {
        self.noise[i]
    }

    /// Success probability of `i` with its own access probability factored
    /// out: `phi_i = p_i * rest_i`.
    pub fn rest(&self, i: usize, p: &[f64]) -> f64 {
        let mut r = self.noise[i];
        for (j, &pj) in p.iter().enumerate() {
            if j != i {
                r *= 1.0 - pj * self.coupling(j, i);
            }
        }
        r
    }

    pub fn success_probs(&self, p: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| p[i] * self.rest(i, p)).collect()
    }

    pub fn objective(&self, p: &[f64], tr: &TrafficParams, want_grad: bool) -> ObjectiveReport {
        let n = self.n;
        let rest: Vec<f64> = (0..n).map(|i| self.rest(i, p)).collect();
        let phi: Vec<f64> = (0..n).map(|i| p[i] * rest[i]).collect();
        let per_link_paoi: Vec<f64> = phi
            .iter()
            .map(|&s| breakdown_from_success(s, tr).e_paoi)
            .collect();
        let mean_paoi = per_link_paoi.iter().sum::<f64>() / n as f64;
        let clamped = phi.iter().any(|&s| s < SUCCESS_FLOOR);

        let grad = want_grad.then(|| {
            // dA_i/dphi_i = -1 / (lambda (1-gamma) phi_i^2), scaled by 1/N.
            let scale = tr.arrival_rate * survival_prob(tr) * n as f64;
            let sens: Vec<f64> = phi
                .iter()
                .map(|&s| {
                    let s = s.max(SUCCESS_FLOOR);
                    -1.0 / (scale * s * s)
                })
                .collect();
            self.backprop_success(p, &rest, &sens)
        });

        ObjectiveReport {
            per_link_paoi,
            mean_paoi,
            grad,
            clamped,
        }
    }

    /// Chain rule through the success products: given `sens[i] =
    /// dL/dphi_i`, returns `dL/dp_j` for every link.
    pub fn backprop_success(&self, p: &[f64], rest: &[f64], sens: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|j| {
                // Own term: dphi_j/dp_j = rest_j.
                let mut g = sens[j] * rest[j];
                // Cross terms: dphi_i/dp_j = -c_ji phi_i / (1 - p_j c_ji).
                for i in (0..n).filter(|&i| i != j) {
                    let c = self.coupling(j, i);
                    if c != 0.0 {
                        g -= sens[i] * c * p[i] * rest[i] / (1.0 - p[j] * c);
                    }
                }
                g
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{distance_matrix, generate_layout, Layout, LayoutGenSpec, Point};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noiseless() -> ChannelParams {
        ChannelParams {
            noise_power: 0.0,
            ..ChannelParams::default()
        }
    }

    fn two_links() -> DistanceMatrix {
        // d_11 = 10, d_21 = 20.
        let layout = Layout::new(
            vec![Point::new(0.0, 0.0), Point::new(30.0, 0.0)],
            vec![Point::new(10.0, 0.0), Point::new(60.0, 0.0)],
            100.0,
        )
        .unwrap();
        distance_matrix(&layout).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn no_noise_no_interference_always_captures() {
        let dm = two_links();
        assert_eq!(
            cond_success_given_active_set(0, &[], &dm, &noiseless()).unwrap(),
            1.0
        );
    }

    #[test]
    fn single_interferer_at_double_distance() {
        let dm = two_links();
        let ch = ChannelParams {
            capture_ratio: 1.0,
            ..noiseless()
        };
        let v = cond_success_given_active_set(0, &[1], &dm, &ch).unwrap();
        assert!((v - 8.0 / 9.0).abs() < 1e-15);
        assert!(cond_success_given_active_set(0, &[0], &dm, &ch).is_err());
    }

    #[test]
    fn noise_exponent() {
        let layout = Layout::new(
            vec![Point::new(0.0, 0.0)],
            vec![Point::new(50.0, 0.0)],
            100.0,
        )
        .unwrap();
        let dm = distance_matrix(&layout).unwrap();
        let v = cond_success_given_active_set(0, &[], &dm, &ChannelParams::default()).unwrap();
        assert!(rel(v, (-1.25e-6f64).exp()) < 1e-14);
        assert!((v - 0.99999875).abs() < 1e-12);
    }

    /// Rayleigh-fade Monte Carlo for the conditional capture probability.
    #[test]
    fn conditional_success_matches_fade_monte_carlo() {
        use rand_distr::{Distribution, Exp1};
        let dm = two_links();
        let ch = ChannelParams {
            noise_power: 1e-6,
            ..ChannelParams::default()
        };
        let exact = cond_success_given_active_set(0, &[1], &dm, &ch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 2_000_000;
        let a = ch.pathloss_exp;
        let hits = (0..n)
            .filter(|_| {
                let h0: f64 = Exp1.sample(&mut rng);
                let h1: f64 = Exp1.sample(&mut rng);
                let s = ch.tx_power * h0 * dm.direct(0).powf(-a);
                let i = ch.noise_power + ch.tx_power * h1 * dm.get(1, 0).powf(-a);
                s / i > ch.capture_ratio
            })
            .count();
        let est = hits as f64 / n as f64;
        let sigma = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((est - exact).abs() < 4.0 * sigma, "{est} vs {exact}");
    }

    #[test]
    fn success_probability_edge_cases() {
        let layout =
            Layout::new(vec![Point::new(0.0, 0.0)], vec![Point::new(5.0, 0.0)], 10.0).unwrap();
        let dm = distance_matrix(&layout).unwrap();
        let pol = Policy::new(vec![0.7]).unwrap();
        assert_eq!(success_probability(0, &pol, &dm, &noiseless()), 0.7);

        let dm = two_links();
        let pol = Policy::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(success_probability(0, &pol, &dm, &noiseless()), 0.0);
    }

    /// Expected value of the conditional formula over every activation subset.
    fn subset_oracle(i: usize, p: &[f64], dm: &DistanceMatrix, ch: &ChannelParams) -> f64 {
        let others: Vec<usize> = (0..p.len()).filter(|&j| j != i).collect();
        let mut total = 0.0;
        for mask in 0u32..(1 << others.len()) {
            let mut w = p[i];
            let mut active = Vec::new();
            for (b, &j) in others.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    w *= p[j];
                    active.push(j);
                } else {
                    w *= 1.0 - p[j];
                }
            }
            total += w * cond_success_given_active_set(i, &active, dm, ch).unwrap();
        }
        total
    }

    #[test]
    fn six_links_match_subset_enumeration() {
        let spec = LayoutGenSpec {
            n_links: 6,
            side_length: 80.0,
            d_min: 2.0,
            d_max: 30.0,
            seed: 4,
        };
        let dm = distance_matrix(&generate_layout(&spec).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..1.0)).collect();
        let pol = Policy::new(p.clone()).unwrap();
        let ch = ChannelParams::default();
        for i in 0..6 {
            let a = success_probability(i, &pol, &dm, &ch);
            let b = subset_oracle(i, &p, &dm, &ch);
            assert!(rel(a, b) < 1e-12, "link {i}: {a} vs {b}");
        }
    }

    #[test]
    fn precomputed_model_agrees_with_direct_formula() {
        let spec = LayoutGenSpec {
            n_links: 15,
            side_length: 100.0,
            d_min: 2.0,
            d_max: 40.0,
            seed: 2,
        };
        let dm = distance_matrix(&generate_layout(&spec).unwrap()).unwrap();
        let ch = ChannelParams::default();
        let p: Vec<f64> = (0..15).map(|k| 0.1 + 0.06 * k as f64).collect();
        let pol = Policy::new(p.clone()).unwrap();
        let model = InterferenceModel::new(&dm, &ch);
        for (i, s) in model.success_probs(&p).into_iter().enumerate() {
            assert!(rel(s, success_probability(i, &pol, &dm, &ch)) < 1e-13);
        }
    }

    #[test]
    fn preemption_probability() {
        let tr = TrafficParams::with_rate(0.5).unwrap();
        assert!((preemption_prob(&tr) - (1.0 - (-0.5f64).exp())).abs() < 1e-16);
        assert!((preemption_prob(&tr) - 0.393469).abs() < 1e-6);
        let tiny = TrafficParams::with_rate(1e-300).unwrap();
        assert!(preemption_prob(&tiny) < 1e-299);
        let zero_service = TrafficParams {
            arrival_rate: 0.5,
            slot_duration: 0.0,
        };
        assert_eq!(preemption_prob(&zero_service), 0.0);
    }

    /// Composite Simpson rule for the truncated-exponential mean.
    fn truncated_mean_quadrature(lambda: f64, mu: f64) -> f64 {
        let m = 20_000;
        let h = mu / m as f64;
        let f = |s: f64| s * lambda * (-s * lambda).exp();
        let mut acc = f(0.0) + f(mu);
        for k in 1..m {
            acc += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0 / (-(-mu * lambda).exp_m1())
    }

    #[test]
    fn effective_generation_interval_matches_quadrature() {
        let tr = TrafficParams::with_rate(0.5).unwrap();
        let v = effective_generation_interval(&tr).unwrap();
        assert!(rel(v, truncated_mean_quadrature(0.5, 1.0)) < 1e-10);
        assert!((v - 0.4585059).abs() < 1e-6);
        // Textbook form away from the small-x regime.
        let g = preemption_prob(&tr);
        assert!(rel(v, 2.0 + (1.0 - 1.0 / g)) < 1e-13);
    }

    #[test]
    fn effective_generation_interval_limits() {
        let long = TrafficParams::new(0.5, 1e6).unwrap();
        assert!(rel(effective_generation_interval(&long).unwrap(), 2.0) < 1e-12);
        let inf = TrafficParams::new(0.5, f64::INFINITY).unwrap();
        assert_eq!(effective_generation_interval(&inf).unwrap(), 2.0);

        let small = TrafficParams::new(1e-6, 1.0).unwrap();
        let v = effective_generation_interval(&small).unwrap();
        assert!(rel(v, truncated_mean_quadrature(1e-6, 1.0)) < 1e-9);
        assert!((v - 0.5).abs() < 1e-6);

        let none = TrafficParams {
            arrival_rate: 0.5,
            slot_duration: 0.0,
        };
        assert!(matches!(
            effective_generation_interval(&none),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn breakdown_reference_values() {
        let b = breakdown_from_success(1.0, &TrafficParams::with_rate(1.0).unwrap());
        assert!(rel(b.e_paoi, std::f64::consts::E + 1.0) < 1e-14);
        assert!(rel(b.preempt_prob, 1.0 - (-1.0f64).exp()) < 1e-15);
        // q = 0: E[T] = gamma / (lambda (1 - gamma)).
        assert!(rel(b.e_t, b.preempt_prob / (1.0 - b.preempt_prob)) < 1e-13);

        let tr = TrafficParams::with_rate(0.5).unwrap();
        let b = breakdown_from_success(0.8, &tr);
        assert!((b.e_paoi - 5.12180).abs() < 1e-5);
        assert!(rel(b.e_paoi, 1.0 / (0.5 * (-0.5f64).exp() * 0.8) + 1.0) < 1e-14);
        assert_eq!(b.e_w, 2.0);
        assert_eq!(b.e_s, 1.0);
    }

    #[test]
    fn recursion_fixed_point_reproduces_closed_form() {
        // E[T] = (1-g)(1-q) mu + (1-g) q (mu + 1/l + E[T]) + g (E[X|X<mu] + E[T]).
        for &(lambda, q) in &[(0.2, 0.0), (0.5, 0.2), (1.0, 0.5), (3.0, 0.9)] {
            let tr = TrafficParams::with_rate(lambda).unwrap();
            let g = preemption_prob(&tr);
            let ex = effective_generation_interval(&tr).unwrap();
            let mu = 1.0;
            let constant =
                (1.0 - g) * (1.0 - q) * mu + (1.0 - g) * q * (mu + 1.0 / lambda) + g * ex;
            let e_t = constant / (1.0 - (1.0 - g) * q - g);
            let b = breakdown_from_success(1.0 - q, &tr);
            assert!(rel(b.e_t, e_t) < 1e-12, "lambda={lambda} q={q}");
        }
    }

    #[test]
    fn zero_success_is_infinite_not_a_crash() {
        let b = breakdown_from_success(0.0, &TrafficParams::with_rate(0.5).unwrap());
        assert!(b.e_paoi.is_infinite() && b.e_t.is_infinite());
    }

    #[test]
    fn noise_free_single_link_full_access() {
        let layout =
            Layout::new(vec![Point::new(0.0, 0.0)], vec![Point::new(5.0, 0.0)], 10.0).unwrap();
        let dm = distance_matrix(&layout).unwrap();
        for &lambda in &[0.1, 0.5, 2.0] {
            let tr = TrafficParams::with_rate(lambda).unwrap();
            let b = paoi_breakdown(0, &Policy::new(vec![1.0]).unwrap(), &dm, &noiseless(), &tr);
            assert_eq!(b.e_paoi, 1.0 / (lambda * (-lambda).exp()) + 1.0);
        }
    }

    #[test]
    fn single_link_objective_decreasing_in_p() {
        let layout =
            Layout::new(vec![Point::new(0.0, 0.0)], vec![Point::new(5.0, 0.0)], 10.0).unwrap();
        let dm = distance_matrix(&layout).unwrap();
        let tr = TrafficParams::with_rate(0.5).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..=100 {
            let pol = Policy::new(vec![k as f64 / 100.0]).unwrap();
            let rep = network_objective(&pol, &dm, &noiseless(), &tr, true);
            assert!(rep.mean_paoi < prev);
            assert!(rep.grad.unwrap()[0] < 0.0);
            prev = rep.mean_paoi;
        }
    }

    #[test]
    fn mirror_layout_has_equal_gradients() {
        let layout = Layout::new(
            vec![Point::new(10.0, 10.0), Point::new(30.0, 10.0)],
            vec![Point::new(10.0, 20.0), Point::new(30.0, 20.0)],
            40.0,
        )
        .unwrap();
        let dm = distance_matrix(&layout).unwrap();
        let pol = Policy::new(vec![0.6, 0.6]).unwrap();
        let tr = TrafficParams::with_rate(0.3).unwrap();
        let g = network_objective(&pol, &dm, &ChannelParams::default(), &tr, true)
            .grad
            .unwrap();
        assert!(rel(g[0], g[1]) < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let spec = LayoutGenSpec {
            n_links: 5,
            side_length: 60.0,
            d_min: 2.0,
            d_max: 30.0,
            seed: 17,
        };
        let dm = distance_matrix(&generate_layout(&spec).unwrap()).unwrap();
        let ch = ChannelParams::default();
        let tr = TrafficParams::with_rate(0.4).unwrap();
        let p = vec![0.3, 0.9, 0.5, 0.7, 0.2];
        let rep = network_objective(&Policy::new(p.clone()).unwrap(), &dm, &ch, &tr, true);
        let g = rep.grad.unwrap();
        let h = 1e-6;
        let f = |q: &[f64]| {
            network_objective(&Policy::new(q.to_vec()).unwrap(), &dm, &ch, &tr, false).mean_paoi
        };
        let fd: Vec<f64> = (0..5)
            .map(|k| {
                let (mut a, mut b) = (p.clone(), p.clone());
                a[k] += h;
                b[k] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect();
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..5 {
            assert!(
                (g[k] - fd[k]).abs() < 1e-6 * scale,
                "{k}: {} vs {}",
                g[k],
                fd[k]
            );
        }
    }

    #[test]
    fn zero_access_clamps_gradient() {
        let dm = two_links();
        let pol = Policy::new(vec![0.0, 0.5]).unwrap();
        let rep = network_objective(
            &pol,
            &dm,
            &ChannelParams::default(),
            &TrafficParams::with_rate(0.5).unwrap(),
            true,
        );
        assert!(rep.mean_paoi.is_infinite());
        assert!(rep.clamped);
        let g = rep.grad.unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(g[0] < 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (u64, Vec<f64>)> {
            (2usize..9).prop_flat_map(|n| (any::<u64>(), prop::collection::vec(0.01f64..1.0, n)))
        }

        fn dm_for(seed: u64, n: usize) -> DistanceMatrix {
            let spec = LayoutGenSpec {
                n_links: n,
                side_length: 80.0,
                d_min: 2.0,
                d_max: 30.0,
                seed,
            };
            distance_matrix(&generate_layout(&spec).unwrap()).unwrap()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn access_monotonicity((seed, p) in instance(), bump in 0.0f64..0.5) {
                let n = p.len();
                let dm = dm_for(seed, n);
                let ch = ChannelParams::default();
                let base = Policy::new(p.clone()).unwrap();
                for j in 0..n {
                    let mut q = p.clone();
                    q[j] = (q[j] + bump).min(1.0);
                    let raised = Policy::new(q).unwrap();
                    for i in 0..n {
                        let before = success_probability(i, &base, &dm, &ch);
                        let after = success_probability(i, &raised, &dm, &ch);
                        if i == j {
                            prop_assert!(after >= before);
                        } else {
                            prop_assert!(after <= before);
                        }
                    }
                }
            }

            #[test]
            fn breakdown_identities(succ in 1e-6f64..=1.0, lambda in 0.01f64..5.0) {
                let tr = TrafficParams::with_rate(lambda).unwrap();
                let b = breakdown_from_success(succ, &tr);
                prop_assert!(rel(b.e_y, b.e_t + b.e_w) < 1e-12);
                prop_assert!(rel(b.e_paoi, b.e_y + b.e_s) < 1e-12);
                let identity = b.e_y * lambda * survival_prob(&tr) * b.succ_prob;
                prop_assert!((identity - 1.0).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&b.fail_prob));
                prop_assert!((0.0..=1.0).contains(&b.preempt_prob));
            }
        }
    }
}
