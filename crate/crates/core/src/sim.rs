//! Slot-level Monte Carlo simulator.
//!
//! Each link owns a continuous-time Poisson arrival stream and a one-packet
//! buffer. A packet starts service at its generation instant and occupies
//! the channel for one service time `mu`; an arrival during that window
//! replaces it (preemption). A packet that survives its window is delivered
//! at `generation + mu` if its transmission succeeds and is discarded
//! otherwise. The buffer is then empty until the next arrival.
//!
//! Transmission outcomes come from a unit-slot physical layer: in every slot
//! each link is active with probability `p_i` (with [`Activation::Buffered`]
//! only links whose buffer is occupied at some point during the slot may
//! be), every active pair draws a fresh
//! exponential(1) power gain, and a receiver captures its own transmitter
//! when the SINR exceeds the capture ratio. A service window ending in slot
//! `t` uses the link's capture outcome of slot `t`. With
//! [`SimConfig::forced_success_prob`] set, the physical layer is bypassed
//! and every completed service succeeds with that probability instead.
//!
//! Peak-age samples use `A_P = Y + mu`, where `Y` is the interdeparture
//! time; since every delivery happens exactly `mu` after its generation
//! this is also `delivery - previous delivered generation`.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1};

use crate::error::{invalid, Result};
use crate::model::{ChannelParams, DistanceMatrix, Policy, TrafficParams};

#[derive(Debug, Clone)]
pub struct SimConfig<'a> {
    pub distances: &'a DistanceMatrix,
    pub policy: &'a Policy,
    pub channel: &'a ChannelParams,
    pub traffic: &'a TrafficParams,
    pub n_slots: u64,
    pub seed: u64,
    /// Replaces the SINR test with a Bernoulli coin per completed service.
    pub forced_success_prob: Option<f64>,
    /// Keep every `(delivery_slot, paoi)` sample, not just moments.
    pub record_samples: bool,
    pub activation: Activation,
}

/// Which links contend for the channel in a slot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Every link transmits with probability `p_i` in every slot, carrying
    /// its buffered packet if it has one. The closed form assumes this.
    #[default]
    Persistent,
    /// Only links with an occupied buffer during the slot may transmit.
    Buffered,
}

impl SimConfig<'_> {
    fn validate(&self) -> Result<()> {
        if self.n_slots < 1 {
            return Err(invalid("n_slots must be at least 1"));
        }
        let n = self.distances.n_links();
        if self.policy.len() != n {
            return Err(invalid(format!(
                "policy has {} entries for {n} links",
                self.policy.len()
            )));
        }
        if let Some(q) = self.forced_success_prob {
            if !(0.0..=1.0).contains(&q) {
                return Err(invalid(format!(
                    "forced_success_prob {q} is not a probability"
                )));
            }
        }
        self.channel.validate()?;
        self.traffic.validate()?;
        if !self.traffic.slot_duration.is_finite() {
            return Err(invalid("simulation needs a finite service time"));
        }
        Ok(())
    }
}

/// Buffer and delivery bookkeeping of one link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkState {
    /// Generation instant of the packet in service.
    pub buffered_gen_time: Option<f64>,
    pub next_arrival_time: f64,
    pub last_delivery_gen_time: Option<f64>,
    pub last_delivery_time: Option<f64>,
}

/// Streaming mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            f64::NAN
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean under independent samples.
    pub fn std_error(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkStats {
    /// Packets generated (each one enters service immediately).
    pub generated: u64,
    /// Packets replaced by a newer arrival during service.
    pub preempted: u64,
    /// Packets that survived their service window.
    pub completed: u64,
    pub delivered: u64,
    /// Slots in which the link transmitted.
    pub attempted: u64,
    /// Slots in which the buffer was occupied at some instant.
    pub eligible_slots: u64,
    /// Eligible slots in which the link was active and captured.
    pub slot_successes: u64,
    pub paoi: Moments,
    pub interdeparture: Moments,
    pub samples: Vec<(u64, f64)>,
}

impl LinkStats {
    pub fn mean_paoi(&self) -> Option<f64> {
        (self.paoi.count > 0).then_some(self.paoi.mean)
    }

    /// Fraction of resolved packets (preempted or completed) that were
    /// preempted.
    pub fn preemption_frequency(&self) -> Option<f64> {
        let resolved = self.preempted + self.completed;
        (resolved > 0).then(|| self.preempted as f64 / resolved as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimStats {
    pub links: Vec<LinkStats>,
    pub slots: u64,
    pub wall_time: Duration,
}

impl SimStats {
    /// Mean over links of each link's mean PAoI; `None` if a link never
    /// delivered twice.
    pub fn network_mean_paoi(&self) -> Option<f64> {
        let mut acc = 0.0;
        for l in &self.links {
            acc += l.mean_paoi()?;
        }
        Some(acc / self.links.len() as f64)
    }

    /// Everything except wall time, for reproducibility comparisons.
    pub fn same_outcome(&self, other: &SimStats) -> bool {
        self.links == other.links && self.slots == other.slots
    }
}

/// Per-slot success frequency of link `i`: its expectation is the mean
/// success probability. `None` when the link never held a packet.
pub fn empirical_success_probability(stats: &SimStats, i: usize) -> Option<f64> {
    let l = &stats.links[i];
    (l.eligible_slots > 0).then(|| l.slot_successes as f64 / l.eligible_slots as f64)
}

pub fn run(cfg: &SimConfig) -> Result<SimStats> {
    cfg.validate()?;
    let started = Instant::now();
    let n = cfg.distances.n_links();
    let mu = cfg.traffic.slot_duration;
    let ch = cfg.channel;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let interarrival = Exp::new(cfg.traffic.arrival_rate).map_err(|e| invalid(e.to_string()))?;

    // Received power scale of transmitter j at receiver i, P_t d_ji^-alpha.
    let gain: Vec<f64> = (0..n * n)
        .map(|k| ch.tx_power * cfg.distances.get(k / n, k % n).powf(-ch.pathloss_exp))
        .collect();

    let mut state: Vec<LinkState> = (0..n)
        .map(|_| LinkState {
            buffered_gen_time: None,
            next_arrival_time: interarrival.sample(&mut rng),
            last_delivery_gen_time: None,
            last_delivery_time: None,
        })
        .collect();
    let mut stats = vec![LinkStats::default(); n];
    let mut eligible = vec![false; n];
    let mut active = vec![false; n];
    let mut captured = vec![false; n];
    let mut completions: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut active_ids = Vec::with_capacity(n);

    for slot in 1..=cfg.n_slots {
        let end = slot as f64;

        // Queue dynamics inside (slot - 1, slot]; independent of outcomes.
        for (i, st) in state.iter_mut().enumerate() {
            let ls = &mut stats[i];
            completions[i].clear();
            eligible[i] = st.buffered_gen_time.is_some();
            loop {
                let done_at = st.buffered_gen_time.map(|g| g + mu);
                let next = st.next_arrival_time;
                match done_at {
                    Some(c) if c <= next && c <= end => {
                        st.buffered_gen_time = None;
                        ls.completed += 1;
                        completions[i].push(c);
                    }
                    _ if next <= end => {
                        if st.buffered_gen_time.is_some() {
                            ls.preempted += 1;
                        }
                        st.buffered_gen_time = Some(next);
                        ls.generated += 1;
                        eligible[i] = true;
                        st.next_arrival_time = next + interarrival.sample(&mut rng);
                    }
                    _ => break,
                }
            }
        }

        if cfg.forced_success_prob.is_none() {
            active_ids.clear();
            for i in 0..n {
                let contends = eligible[i] || cfg.activation == Activation::Persistent;
                active[i] = contends && rng.random::<f64>() < cfg.policy[i];
                if active[i] {
                    active_ids.push(i);
                }
                captured[i] = false;
            }
            for &i in &active_ids {
                let h: f64 = Exp1.sample(&mut rng);
                let signal = gain[i * n + i] * h;
                let mut interference = ch.noise_power;
                for &j in active_ids.iter().filter(|&&j| j != i) {
                    let h: f64 = Exp1.sample(&mut rng);
                    interference += gain[j * n + i] * h;
                }
                captured[i] = signal > ch.capture_ratio * interference;
            }
            for i in 0..n {
                if eligible[i] {
                    stats[i].eligible_slots += 1;
                    stats[i].attempted += active[i] as u64;
                    stats[i].slot_successes += captured[i] as u64;
                }
            }
        }

        for i in 0..n {
            for &done_at in &completions[i] {
                let ok = match cfg.forced_success_prob {
                    Some(q) => {
                        stats[i].attempted += 1;
                        rng.random::<f64>() < q
                    }
                    None => captured[i],
                };
                if ok {
                    deliver(
                        &mut state[i],
                        &mut stats[i],
                        done_at,
                        mu,
                        slot,
                        cfg.record_samples,
                    );
                }
            }
        }
    }

    Ok(SimStats {
        links: stats,
        slots: cfg.n_slots,
        wall_time: started.elapsed(),
    })
}

fn deliver(st: &mut LinkState, ls: &mut LinkStats, at: f64, mu: f64, slot: u64, record: bool) {
    ls.delivered += 1;
    if let Some(prev) = st.last_delivery_time {
        let y = at - prev;
        let paoi = y + mu;
        ls.interdeparture.push(y);
        ls.paoi.push(paoi);
        if record {
            ls.samples.push((slot, paoi));
        }
    }
    st.last_delivery_time = Some(at);
    st.last_delivery_gen_time = Some(at - mu);
}

/// Per-link summary rows: `link,delivered,attempted,preempted,completed,
/// eligible_slots,slot_successes,success_freq,mean_paoi,mean_y,paoi_se`.
pub fn write_summary_csv(path: &std::path::Path, stats: &SimStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "link",
        "delivered",
        "attempted",
        "preempted",
        "completed",
        "eligible_slots",
        "slot_successes",
        "success_freq",
        "mean_paoi",
        "mean_y",
        "paoi_se",
    ])?;
    for (i, l) in stats.links.iter().enumerate() {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            i.to_string(),
            l.delivered.to_string(),
            l.attempted.to_string(),
            l.preempted.to_string(),
            l.completed.to_string(),
            l.eligible_slots.to_string(),
            l.slot_successes.to_string(),
            opt(empirical_success_probability(stats, i)),
            opt(l.mean_paoi()),
            opt((l.interdeparture.count > 0).then_some(l.interdeparture.mean)),
            opt((l.paoi.count > 1).then(|| l.paoi.std_error())),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Raw samples: `link,delivery_slot,paoi`.
pub fn write_samples_csv(path: &std::path::Path, stats: &SimStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["link", "delivery_slot", "paoi"])?;
    for (i, l) in stats.links.iter().enumerate() {
        for (slot, a) in &l.samples {
            w.write_record([i.to_string(), slot.to_string(), a.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{breakdown_from_success, preemption_prob};
    use crate::model::{distance_matrix, Layout, Point};

    fn single() -> DistanceMatrix {
        let layout = Layout::new(
            vec![Point::new(0.0, 0.0)],
            vec![Point::new(10.0, 0.0)],
            20.0,
        )
        .unwrap();
        distance_matrix(&layout).unwrap()
    }

    fn noiseless() -> ChannelParams {
        ChannelParams {
            noise_power: 0.0,
            ..ChannelParams::default()
        }
    }

    #[test]
    fn single_link_full_access_matches_closed_form() {
        let dm = single();
        let pol = Policy::new(vec![1.0]).unwrap();
        let tr = TrafficParams::with_rate(0.5).unwrap();
        let ch = noiseless();
        let cfg = SimConfig {
            distances: &dm,
            policy: &pol,
            channel: &ch,
            traffic: &tr,
            n_slots: 1_000_000,
            seed: 1,
            forced_success_prob: None,
            record_samples: false,
            activation: Activation::Persistent,
        };
        let stats = run(&cfg).unwrap();
        let expect = breakdown_from_success(1.0, &tr).e_paoi;
        assert!((expect - 4.29744).abs() < 1e-5);
        let got = stats.network_mean_paoi().unwrap();
        assert!((got - expect).abs() / expect < 0.01, "{got} vs {expect}");
    }

    #[test]
    fn forced_coin_matches_closed_form() {
        let dm = single();
        let pol = Policy::new(vec![1.0]).unwrap();
        let tr = TrafficParams::with_rate(0.5).unwrap();
        let ch = noiseless();
        let cfg = SimConfig {
            distances: &dm,
            policy: &pol,
            channel: &ch,
            traffic: &tr,
            n_slots: 1_000_000,
            seed: 2,
            forced_success_prob: Some(0.8),
            record_samples: false,
            activation: Activation::Persistent,
        };
        let stats = run(&cfg).unwrap();
        let got = stats.network_mean_paoi().unwrap();
        assert!((got - 5.12180).abs() / 5.12180 < 0.01, "{got}");
        let freq = stats.links[0].preemption_frequency().unwrap();
        let gamma = preemption_prob(&tr);
        let resolved = (stats.links[0].preempted + stats.links[0].completed) as f64;
        assert!((freq - gamma).abs() < 3.0 * (gamma * (1.0 - gamma) / resolved).sqrt());
    }

    #[test]
    fn zero_access_never_transmits() {
        let layout = Layout::new(
            vec![Point::new(0.0, 0.0), Point::new(50.0, 50.0)],
            vec![Point::new(10.0, 0.0), Point::new(50.0, 60.0)],
            100.0,
        )
        .unwrap();
        let dm = distance_matrix(&layout).unwrap();
        let pol = Policy::new(vec![0.0, 0.0]).unwrap();
        let tr = TrafficParams::with_rate(0.5).unwrap();
        let ch = ChannelParams::default();
        let stats = run(&SimConfig {
            distances: &dm,
            policy: &pol,
            channel: &ch,
            traffic: &tr,
            n_slots: 10_000,
            seed: 3,
            forced_success_prob: None,
            record_samples: false,
            activation: Activation::Persistent,
        })
        .unwrap();
        for l in &stats.links {
            assert_eq!(l.delivered, 0);
            assert_eq!(l.attempted, 0);
            assert!(l.eligible_slots > 0);
        }
    }

    #[test]
    fn saturated_single_link_success_frequency_is_p() {
        let dm = single();
        let pol = Policy::new(vec![0.7]).unwrap();
        let tr = TrafficParams::with_rate(30.0).unwrap();
        let ch = noiseless();
        let stats = run(&SimConfig {
            distances: &dm,
            policy: &pol,
            channel: &ch,
            traffic: &tr,
            n_slots: 200_000,
            seed: 4,
            forced_success_prob: None,
            record_samples: false,
            activation: Activation::Persistent,
        })
        .unwrap();
        let n = stats.links[0].eligible_slots as f64;
        assert_eq!(n, 200_000.0);
        let est = empirical_success_probability(&stats, 0).unwrap();
        assert!((est - 0.7).abs() < 3.0 * (0.21 / n).sqrt(), "{est}");
    }

    #[test]
    fn samples_obey_peak_age_identity_and_determinism() {
        let dm = single();
        let pol = Policy::new(vec![0.6]).unwrap();
        let tr = TrafficParams::with_rate(0.7).unwrap();
        let ch = noiseless();
        let cfg = SimConfig {
            distances: &dm,
            policy: &pol,
            channel: &ch,
            traffic: &tr,
            n_slots: 20_000,
            seed: 5,
            forced_success_prob: None,
            record_samples: true,
            activation: Activation::Persistent,
        };
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert!(a.same_outcome(&b));
        let c = run(&SimConfig {
            seed: 6,
            ..cfg.clone()
        })
        .unwrap();
        assert!(!a.same_outcome(&c));

        let l = &a.links[0];
        assert_eq!(l.paoi.count, l.interdeparture.count);
        assert_eq!(l.samples.len() as u64, l.paoi.count);
        assert!((l.paoi.mean - (l.interdeparture.mean + 1.0)).abs() < 1e-9);
        // Deliveries land in increasing slots.
        assert!(l.samples.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn moments_match_two_pass() {
        let xs = [1.0, 4.0, 2.5, 8.0, 3.0];
        let mut m = Moments::default();
        xs.iter().for_each(|&x| m.push(x));
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((m.mean - mean).abs() < 1e-15);
        assert!((m.variance() - var).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_config() {
        let dm = single();
        let pol = Policy::new(vec![0.5, 0.5]).unwrap();
        let tr = TrafficParams::with_rate(0.5).unwrap();
        let ch = noiseless();
        let cfg = SimConfig {
            distances: &dm,
            policy: &pol,
            channel: &ch,
            traffic: &tr,
            n_slots: 10,
            seed: 0,
            forced_success_prob: None,
            record_samples: false,
            activation: Activation::Persistent,
        };
        assert!(run(&cfg).is_err());
        let pol = Policy::new(vec![0.5]).unwrap();
        assert!(run(&SimConfig {
            policy: &pol,
            n_slots: 0,
            ..cfg.clone()
        })
        .is_err());
        assert!(run(&SimConfig {
            policy: &pol,
            forced_success_prob: Some(1.5),
            ..cfg
        })
        .is_err());
    }

    #[test]
    fn buffered_activation_lowers_interference() {
        let layout = Layout::new(
            vec![Point::new(0.0, 0.0), Point::new(12.0, 0.0)],
            vec![Point::new(10.0, 0.0), Point::new(22.0, 0.0)],
            40.0,
        )
        .unwrap();
        let dm = distance_matrix(&layout).unwrap();
        let pol = Policy::uniform(2, 1.0).unwrap();
        let ch = noiseless();
        let tr = TrafficParams::with_rate(0.2).unwrap();
        let cfg = |activation| SimConfig {
            distances: &dm,
            policy: &pol,
            channel: &ch,
            traffic: &tr,
            n_slots: 200_000,
            seed: 4,
            forced_success_prob: None,
            record_samples: false,
            activation,
        };
        let persistent = run(&cfg(Activation::Persistent)).unwrap();
        let buffered = run(&cfg(Activation::Buffered)).unwrap();
        let a = persistent.network_mean_paoi().unwrap();
        let b = buffered.network_mean_paoi().unwrap();
        assert!(b < 0.9 * a, "buffered {b} persistent {a}");
    }
}
