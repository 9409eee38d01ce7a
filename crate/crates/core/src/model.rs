//! Deployment geometry, physical-layer and traffic constants, and access
//! policies.
//!
//! Everything here is immutable after construction. Random layouts are a
//! pure function of their [`LayoutGenSpec`] (seed included).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Physical-layer constants shared by every link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelParams {
    /// Transmit power in watts.
    pub tx_power: f64,
    /// Path-loss exponent.
    pub pathloss_exp: f64,
    /// Linear SINR capture threshold.
    pub capture_ratio: f64,
    /// Receiver noise power in watts.
    pub noise_power: f64,
}

impl Default for ChannelParams {
    /// 100 mW, exponent 3, 0 dB capture threshold, -90 dBm noise.
    fn default() -> Self {
        Self {
            tx_power: 0.1,
            pathloss_exp: 3.0,
            capture_ratio: 1.0,
            noise_power: 1e-12,
        }
    }
}

impl ChannelParams {
    pub fn new(
        tx_power: f64,
        pathloss_exp: f64,
        capture_ratio: f64,
        noise_power: f64,
    ) -> Result<Self> {
        let ch = Self {
            tx_power,
            pathloss_exp,
            capture_ratio,
            noise_power,
        };
        ch.validate()?;
        Ok(ch)
    }

    /// Builds parameters from the units link budgets are usually quoted in.
    pub fn from_db(
        tx_power_mw: f64,
        pathloss_exp: f64,
        capture_db: f64,
        noise_dbm: f64,
    ) -> Result<Self> {
        Self::new(
            tx_power_mw * 1e-3,
            pathloss_exp,
            10f64.powf(capture_db / 10.0),
            10f64.powf(noise_dbm / 10.0) * 1e-3,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tx_power > 0.0 && self.tx_power.is_finite()) {
            return Err(invalid(format!(
                "tx_power must be positive, got {}",
                self.tx_power
            )));
        }
        if !(self.pathloss_exp > 2.0 && self.pathloss_exp.is_finite()) {
            return Err(invalid(format!(
                "pathloss_exp must exceed 2, got {}",
                self.pathloss_exp
            )));
        }
        if !(self.capture_ratio > 0.0 && self.capture_ratio.is_finite()) {
            return Err(invalid(format!(
                "capture_ratio must be positive, got {}",
                self.capture_ratio
            )));
        }
        if !(self.noise_power >= 0.0 && self.noise_power.is_finite()) {
            return Err(invalid(format!(
                "noise_power must be non-negative, got {}",
                self.noise_power
            )));
        }
        Ok(())
    }
}

/// Update arrival rate and deterministic service time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficParams {
    /// Poisson arrival rate, packets per slot.
    pub arrival_rate: f64,
    /// Service time in slots; one slot is the canonical value.
    pub slot_duration: f64,
}

impl TrafficParams {
    pub fn new(arrival_rate: f64, slot_duration: f64) -> Result<Self> {
        let tr = Self {
            arrival_rate,
            slot_duration,
        };
        tr.validate()?;
        Ok(tr)
    }

    /// Unit service time.
    pub fn with_rate(arrival_rate: f64) -> Result<Self> {
        Self::new(arrival_rate, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_rate > 0.0 && self.arrival_rate.is_finite()) {
            return Err(invalid(format!(
                "arrival_rate must be positive, got {}",
                self.arrival_rate
            )));
        }
        if !(self.slot_duration > 0.0) || self.slot_duration.is_nan() {
            return Err(invalid(format!(
                "slot_duration must be positive, got {}",
                self.slot_duration
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Positions of N transmitter/receiver pairs inside an L x L square.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    tx: Vec<Point>,
    rx: Vec<Point>,
    side_length: f64,
}

impl Layout {
    pub fn new(tx: Vec<Point>, rx: Vec<Point>, side_length: f64) -> Result<Self> {
        if tx.len() != rx.len() {
            return Err(invalid(format!(
                "{} transmitters but {} receivers",
                tx.len(),
                rx.len()
            )));
        }
        if !(side_length > 0.0 && side_length.is_finite()) {
            return Err(invalid(format!(
                "side_length must be positive, got {side_length}"
            )));
        }
        let inside =
            |p: &Point| (0.0..=side_length).contains(&p.x) && (0.0..=side_length).contains(&p.y);
        if let Some(i) = tx.iter().chain(rx.iter()).position(|p| !inside(p)) {
            return Err(invalid(format!(
                "coordinate #{i} lies outside [0, {side_length}]^2"
            )));
        }
        Ok(Self {
            tx,
            rx,
            side_length,
        })
    }

    pub fn n_links(&self) -> usize {
        self.tx.len()
    }

    pub fn tx(&self) -> &[Point] {
        &self.tx
    }

    pub fn rx(&self) -> &[Point] {
        &self.rx
    }

    pub fn side_length(&self) -> f64 {
        self.side_length
    }

    /// Distance between the endpoints of link `i`.
    pub fn direct_distance(&self, i: usize) -> f64 {
        self.tx[i].dist(&self.rx[i])
    }

    /// Relabels links so that new link `k` is old link `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_links() {
            return Err(Error::Shape(format!(
                "permutation of length {} for {} links",
                perm.len(),
                self.n_links()
            )));
        }
        let tx = perm.iter().map(|&k| self.tx[k]).collect();
        let rx = perm.iter().map(|&k| self.rx[k]).collect();
        Layout::new(tx, rx, self.side_length)
    }
}

/// Cross-distance matrix; `get(j, i)` is the distance from transmitter `j`
/// to receiver `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn n_links(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, tx: usize, rx: usize) -> f64 {
        self.d[tx * self.n + rx]
    }

    #[inline]
    pub fn direct(&self, i: usize) -> f64 {
        self.get(i, i)
    }

    /// Row `tx`: distances from that transmitter to every receiver.
    pub fn row(&self, tx: usize) -> &[f64] {
        &self.d[tx * self.n..(tx + 1) * self.n]
    }
}

/// Euclidean transmitter-to-receiver distances for every ordered pair.
pub fn distance_matrix(layout: &Layout) -> Result<DistanceMatrix> {
    let n = layout.n_links();
    let mut d = Vec::with_capacity(n * n);
    for (j, t) in layout.tx().iter().enumerate() {
        for (i, r) in layout.rx().iter().enumerate() {
            let dist = t.dist(r);
            if dist <= 0.0 {
                return Err(Error::ZeroDistance { tx: j, rx: i });
            }
            d.push(dist);
        }
    }
    Ok(DistanceMatrix { n, d })
}

/// Per-link slot-access probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy(Vec<f64>);

impl Policy {
    /// Accepts any vector of probabilities in [0, 1]. Optimizers and the
    /// learned scheduler only ever emit strictly positive entries.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if let Some(i) = p.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid(format!("p[{i}] = {} is not a probability", p[i])));
        }
        Ok(Self(p))
    }

    pub fn uniform(n: usize, p: f64) -> Result<Self> {
        Self::new(vec![p; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }
}

impl std::ops::Index<usize> for Policy {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Recipe for a random layout: uniform transmitters, receivers uniform over
/// the annulus `[d_min, d_max]` around their transmitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutGenSpec {
    pub n_links: usize,
    pub side_length: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub seed: u64,
}

impl Default for LayoutGenSpec {
    fn default() -> Self {
        Self {
            n_links: 100,
            side_length: 600.0,
            d_min: 2.0,
            d_max: 80.0,
            seed: 0,
        }
    }
}

impl LayoutGenSpec {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        // d_min == d_max is allowed: a circle of fixed link length.
        if !(self.d_min > 0.0 && self.d_min <= self.d_max && self.d_max < self.side_length) {
            return Err(invalid(format!(
                "need 0 < d_min <= d_max < L, got d_min={} d_max={} L={}",
                self.d_min, self.d_max, self.side_length
            )));
        }
        if !self.side_length.is_finite() {
            return Err(invalid("side_length must be finite"));
        }
        Ok(())
    }
}

const RX_ATTEMPTS_PER_TX: usize = 256;
const TX_ATTEMPTS_PER_LINK: usize = 64;

/// Draws a layout. Identical specs give bit-identical layouts.
pub fn generate_layout(spec: &LayoutGenSpec) -> Result<Layout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let l = spec.side_length;
    let r2_lo = spec.d_min * spec.d_min;
    let r2_span = spec.d_max * spec.d_max - r2_lo;
    let mut tx = Vec::with_capacity(spec.n_links);
    let mut rx = Vec::with_capacity(spec.n_links);

    for _ in 0..spec.n_links {
        let mut placed = None;
        'tx: for _ in 0..TX_ATTEMPTS_PER_LINK {
            let t = Point::new(rng.random::<f64>() * l, rng.random::<f64>() * l);
            for _ in 0..RX_ATTEMPTS_PER_TX {
                // Area-uniform radius on the annulus.
                let radius = (r2_lo + rng.random::<f64>() * r2_span).sqrt();
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                let r = Point::new(t.x + radius * theta.cos(), t.y + radius * theta.sin());
                if (0.0..=l).contains(&r.x) && (0.0..=l).contains(&r.y) {
                    placed = Some((t, r));
                    break 'tx;
                }
            }
        }
        let (t, r) = placed.ok_or_else(|| Error::LayoutGeneration {
            attempts: TX_ATTEMPTS_PER_LINK * RX_ATTEMPTS_PER_TX,
            reason: format!(
                "no receiver fits inside the {l} m square at distance [{}, {}]",
                spec.d_min, spec.d_max
            ),
        })?;
        tx.push(t);
        rx.push(r);
    }
    Layout::new(tx, rx, l)
}

/// SplitMix64 finalizer; used to derive independent per-item seeds from a
/// base seed so that item `k` does not depend on how many items precede it.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
