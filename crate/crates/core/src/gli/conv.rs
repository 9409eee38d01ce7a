use super::grid::DensityGrid;
use super::NetParams;

/// Pre-activation and post-ReLU maps of the three layers for one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StackMaps {
    pub pre: [Vec<f64>; 3],
    pub out: [Vec<f64>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvMaps {
    pub resolution: usize,
    pub tx: StackMaps,
    pub rx: StackMaps,
    /// Input grids, kept for the backward pass.
    pub grid: DensityGrid,
    pub macs: u64,
}

fn pad(input: &[f64], r: usize, h: usize) -> Vec<f64> {
    let w = r + 2 * h;
    let mut buf = vec![0.0; w * w];
    for y in 0..r {
        buf[(y + h) * w + h..(y + h) * w + h + r].copy_from_slice(&input[y * r..(y + 1) * r]);
    }
    buf
}

/// Same-size cross-correlation with zero padding: `out[y][x] = b +
/// sum_{u,v} k[u][v] * in[y+u-h][x+v-h]`.
pub(crate) fn correlate(input: &[f64], r: usize, kernel: &[f64], c: usize, bias: f64) -> Vec<f64> {
    let h = c / 2;
    let w = r + 2 * h;
    let buf = pad(input, r, h);
    let mut out = vec![bias; r * r];
    for u in 0..c {
        let krow = &kernel[u * c..(u + 1) * c];
        for y in 0..r {
            let base = (y + u) * w;
            let orow = &mut out[y * r..(y + 1) * r];
            for (x, o) in orow.iter_mut().enumerate() {
                let src = &buf[base + x..base + x + c];
                *o += krow.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    out
}

fn stack_forward(grid: &[f64], r: usize, params: &NetParams, macs: &mut u64) -> StackMaps {
    let sizes = params.config().conv_sizes;
    let mut pre: [Vec<f64>; 3] = Default::default();
    let mut out: [Vec<f64>; 3] = Default::default();
    for l in 0..3 {
        let (k, b) = params.conv_kernel(l);
        let input = if l == 0 { grid } else { &out[l - 1] };
        let z = correlate(input, r, k, sizes[l], b);
        *macs += (r * r * sizes[l] * sizes[l]) as u64;
        out[l] = z.iter().map(|v| v.max(0.0)).collect();
        pre[l] = z;
    }
    StackMaps { pre, out }
}

/// Runs both grids through the shared three-layer stack, ReLU after every
/// layer.
pub fn conv_forward(grid: &DensityGrid, params: &NetParams) -> ConvMaps {
    let r = grid.resolution;
    let mut macs = 0;
    let tx = stack_forward(&grid.tx, r, params, &mut macs);
    let rx = stack_forward(&grid.rx, r, params, &mut macs);
    ConvMaps {
        resolution: r,
        tx,
        rx,
        grid: grid.clone(),
        macs,
    }
}

fn stack_backward(
    input: &[f64],
    maps: &StackMaps,
    d_out: [Vec<f64>; 3],
    r: usize,
    params: &NetParams,
    grads: &mut NetParams,
) {
    let sizes = params.config().conv_sizes;
    let names = [
        ("conv1.kernel", "conv1.bias"),
        ("conv2.kernel", "conv2.bias"),
        ("conv3.kernel", "conv3.bias"),
    ];
    let [d0, d1, d2] = d_out;
    let mut upstream = [d0, d1, d2];
    for l in (0..3).rev() {
        let c = sizes[l];
        let h = c / 2;
        let w = r + 2 * h;
        let dz: Vec<f64> = upstream[l]
            .iter()
            .zip(&maps.pre[l])
            .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
            .collect();
        if dz.iter().all(|&v| v == 0.0) {
            continue;
        }
        let layer_in = if l == 0 { input } else { &maps.out[l - 1] };
        let buf = pad(layer_in, r, h);
        let (kernel, _) = params.conv_kernel(l);
        let mut dk = vec![0.0; c * c];
        let mut d_in_pad = vec![0.0; w * w];
        for y in 0..r {
            for x in 0..r {
                let g = dz[y * r + x];
                if g == 0.0 {
                    continue;
                }
                for u in 0..c {
                    let base = (y + u) * w + x;
                    for v in 0..c {
                        dk[u * c + v] += g * buf[base + v];
                        d_in_pad[base + v] += g * kernel[u * c + v];
                    }
                }
            }
        }
        for (a, b) in grads.tensor_mut(names[l].0).iter_mut().zip(&dk) {
            *a += b;
        }
        grads.tensor_mut(names[l].1)[0] += dz.iter().sum::<f64>();
        if l > 0 {
            let prev = &mut upstream[l - 1];
            for y in 0..r {
                for x in 0..r {
                    prev[y * r + x] += d_in_pad[(y + h) * w + x + h];
                }
            }
        }
    }
}

/// Accumulates parameter gradients given `dL/d out[l]` for every layer of
/// both stacks. Gradients flowing into the density grids are dropped.
pub fn conv_backward(
    maps: &ConvMaps,
    d_tx: [Vec<f64>; 3],
    d_rx: [Vec<f64>; 3],
    params: &NetParams,
    grads: &mut NetParams,
) {
    let r = maps.resolution;
    stack_backward(&maps.grid.tx, &maps.tx, d_tx, r, params, grads);
    stack_backward(&maps.grid.rx, &maps.rx, d_rx, r, params, grads);
}
