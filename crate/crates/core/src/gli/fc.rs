use super::conv::ConvMaps;
use super::grid::GridSpec;
use super::NetParams;
use crate::model::Layout;

/// Per-link input width: three tx-grid maps, three rx-grid maps, previous
/// access probability, normalized link length.
pub const FEATURES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct LinkFeatures {
    pub x: Vec<[f64; FEATURES]>,
    /// Flat cell of each link's transmitter and receiver.
    pub cells: Vec<(usize, usize)>,
}

pub fn gather_link_features(
    maps: &ConvMaps,
    layout: &Layout,
    prev_p: &[f64],
    gs: &GridSpec,
    distance_norm: f64,
) -> LinkFeatures {
    let n = layout.n_links();
    let mut x = Vec::with_capacity(n);
    let mut cells = Vec::with_capacity(n);
    for i in 0..n {
        let (t, r) = (layout.tx()[i], layout.rx()[i]);
        let tc = gs.flat(t.x, t.y);
        let rc = gs.flat(r.x, r.y);
        let mut f = [0.0; FEATURES];
        for l in 0..3 {
            f[l] = maps.tx.out[l][rc];
            f[3 + l] = maps.rx.out[l][tc];
        }
        f[6] = prev_p[i];
        f[7] = layout.direct_distance(i) / distance_norm;
        x.push(f);
        cells.push((tc, rc));
    }
    LinkFeatures { x, cells }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcCache {
    pub z1: Vec<Vec<f64>>,
    pub z2: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    pub macs: u64,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| {
            bo + w[o * cols..(o + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, c)| a * c)
                .sum::<f64>()
        })
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Shared dense stack applied to every link: ReLU, ReLU, sigmoid.
pub fn fc_forward(feat: &LinkFeatures, params: &NetParams) -> FcCache {
    let (w1, b1) = (params.tensor("fc1.weight"), params.tensor("fc1.bias"));
    let (w2, b2) = (params.tensor("fc2.weight"), params.tensor("fc2.bias"));
    let (w3, b3) = (params.tensor("out.weight"), params.tensor("out.bias")[0]);
    let n = feat.x.len();
    let mut cache = FcCache {
        z1: Vec::with_capacity(n),
        z2: Vec::with_capacity(n),
        p: Vec::with_capacity(n),
        macs: (n * (w1.len() + w2.len() + w3.len())) as u64,
    };
    for x in &feat.x {
        let z1 = affine(w1, b1, x);
        let z2 = affine(w2, b2, &relu(&z1));
        let z3 = b3 + w3.iter().zip(&z2).map(|(w, z)| w * z.max(0.0)).sum::<f64>();
        cache.p.push(sigmoid(z3));
        cache.z1.push(z1);
        cache.z2.push(z2);
    }
    cache
}

/// Accumulates dense-stack gradients from `dp[i] = dL/dp_i` and returns
/// `dL/dx` per link.
pub fn fc_backward(
    feat: &LinkFeatures,
    cache: &FcCache,
    dp: &[f64],
    params: &NetParams,
    grads: &mut NetParams,
) -> Vec<[f64; FEATURES]> {
    let w1 = params.tensor("fc1.weight").to_vec();
    let w2 = params.tensor("fc2.weight").to_vec();
    let w3 = params.tensor("out.weight").to_vec();
    let (h1, h2) = (w2.len() / w3.len(), w3.len());
    let mut dw1 = vec![0.0; w1.len()];
    let mut db1 = vec![0.0; h1];
    let mut dw2 = vec![0.0; w2.len()];
    let mut db2 = vec![0.0; h2];
    let mut dw3 = vec![0.0; h2];
    let mut db3 = 0.0;
    let mut dx = Vec::with_capacity(feat.x.len());

    for (i, x) in feat.x.iter().enumerate() {
        let p = cache.p[i];
        let dz3 = dp[i] * p * (1.0 - p);
        let (z1, z2) = (&cache.z1[i], &cache.z2[i]);
        db3 += dz3;
        let mut dz2 = vec![0.0; h2];
        for o in 0..h2 {
            let a2 = z2[o].max(0.0);
            dw3[o] += dz3 * a2;
            if z2[o] > 0.0 {
                dz2[o] = dz3 * w3[o];
            }
        }
        let mut da1 = vec![0.0; h1];
        for o in 0..h2 {
            if dz2[o] == 0.0 {
                continue;
            }
            db2[o] += dz2[o];
            for k in 0..h1 {
                dw2[o * h1 + k] += dz2[o] * z1[k].max(0.0);
                da1[k] += dz2[o] * w2[o * h1 + k];
            }
        }
        let mut g = [0.0; FEATURES];
        for k in 0..h1 {
            if z1[k] <= 0.0 || da1[k] == 0.0 {
                continue;
            }
            db1[k] += da1[k];
            for (f, gf) in g.iter_mut().enumerate() {
                dw1[k * FEATURES + f] += da1[k] * x[f];
                *gf += da1[k] * w1[k * FEATURES + f];
            }
        }
        dx.push(g);
    }

    for (name, d) in [
        ("fc1.weight", &dw1),
        ("fc1.bias", &db1),
        ("fc2.weight", &dw2),
        ("fc2.bias", &db2),
        ("out.weight", &dw3),
    ] {
        for (a, b) in grads.tensor_mut(name).iter_mut().zip(d.iter()) {
            *a += b;
        }
    }
    grads.tensor_mut("out.bias")[0] += db3;
    dx
}
