use crate::error::{invalid, Result};
use crate::model::{Layout, Policy};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub resolution: usize,
    pub side_length: f64,
}

impl GridSpec {
    pub fn new(resolution: usize, side_length: f64) -> Result<Self> {
        if resolution < 1 || !(side_length > 0.0 && side_length.is_finite()) {
            return Err(invalid(format!(
                "grid needs R >= 1 and L > 0, got R={resolution} L={side_length}"
            )));
        }
        Ok(Self {
            resolution,
            side_length,
        })
    }

    /// Zero-based cell of a point.
    pub fn cell(&self, x: f64, y: f64) -> (usize, usize) {
        (
            cell_index(x, self.resolution, self.side_length) - 1,
            cell_index(y, self.resolution, self.side_length) - 1,
        )
    }

    /// Row-major flat index of the cell holding `(x, y)`.
    pub fn flat(&self, x: f64, y: f64) -> usize {
        let (cx, cy) = self.cell(x, y);
        cy * self.resolution + cx
    }
}

/// One-based cell index `clamp(ceil(v R / L), 1, R)`.
pub fn cell_index(v: f64, resolution: usize, side_length: f64) -> usize {
    let c = (v * resolution as f64 / side_length).ceil();
    (c.max(1.0) as usize).min(resolution)
}

/// Transmitter and receiver density grids, row-major `R x R`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub resolution: usize,
    pub tx: Vec<f64>,
    pub rx: Vec<f64>,
}

impl DensityGrid {
    pub fn at(&self, grid: &[f64], cx: usize, cy: usize) -> f64 {
        grid[cy * self.resolution + cx]
    }
}

/// Every link adds its access probability to the cell of its transmitter
/// (tx grid) and of its receiver (rx grid).
pub fn build_density_grids(layout: &Layout, pol: &Policy, gs: &GridSpec) -> DensityGrid {
    build_from_slice(layout, pol.as_slice(), gs)
}

pub(crate) fn build_from_slice(layout: &Layout, p: &[f64], gs: &GridSpec) -> DensityGrid {
    let r = gs.resolution;
    let mut tx = vec![0.0; r * r];
    let mut rx = vec![0.0; r * r];
    for ((t, q), &pi) in layout.tx().iter().zip(layout.rx()).zip(p) {
        tx[gs.flat(t.x, t.y)] += pi;
        rx[gs.flat(q.x, q.y)] += pi;
    }
    DensityGrid {
        resolution: r,
        tx,
        rx,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_layout, LayoutGenSpec, Point};
    use proptest::prelude::*;

    fn one(tx: Point, rx: Point, l: f64) -> Layout {
        Layout::new(vec![tx], vec![rx], l).unwrap()
    }

    #[test]
    fn corner_link_lands_in_first_cell() {
        let gs = GridSpec::new(150, 600.0).unwrap();
        let layout = one(Point::new(2.0, 2.0), Point::new(3.0, 3.0), 600.0);
        let g = build_density_grids(&layout, &Policy::new(vec![1.0]).unwrap(), &gs);
        assert_eq!(g.at(&g.tx, 0, 0), 1.0);
        assert_eq!(g.at(&g.rx, 0, 0), 1.0);
    }

    #[test]
    fn index_clamps_at_edges() {
        assert_eq!(cell_index(0.0, 150, 600.0), 1);
        assert_eq!(cell_index(600.0, 150, 600.0), 150);
        assert_eq!(cell_index(4.0, 150, 600.0), 1);
        assert_eq!(cell_index(4.0001, 150, 600.0), 2);
    }

    #[test]
    fn sums_and_collisions() {
        let gs = GridSpec::new(10, 100.0).unwrap();
        let layout = one(Point::new(15.0, 15.0), Point::new(55.0, 55.0), 100.0);
        let g = build_density_grids(&layout, &Policy::new(vec![0.3]).unwrap(), &gs);
        assert!((g.tx.iter().sum::<f64>() - 0.3).abs() < 1e-15);

        let layout = Layout::new(
            vec![Point::new(11.0, 11.0), Point::new(19.0, 12.0)],
            vec![Point::new(50.0, 50.0), Point::new(80.0, 80.0)],
            100.0,
        )
        .unwrap();
        let g = build_density_grids(&layout, &Policy::new(vec![0.4, 0.5]).unwrap(), &gs);
        assert!((g.at(&g.tx, 1, 1) - 0.9).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn grids_are_linear_in_disjoint_link_sets(seed in any::<u64>(), split in 1usize..19) {
            let layout = generate_layout(&LayoutGenSpec {
                n_links: 20,
                side_length: 200.0,
                d_min: 2.0,
                d_max: 40.0,
                seed,
            }).unwrap();
            let gs = GridSpec::new(25, 200.0).unwrap();
            let p: Vec<f64> = (0..20).map(|k| (k as f64 + 1.0) / 21.0).collect();
            let lo: Vec<f64> = p.iter().enumerate().map(|(k, &v)| if k < split { v } else { 0.0 }).collect();
            let hi: Vec<f64> = p.iter().enumerate().map(|(k, &v)| if k >= split { v } else { 0.0 }).collect();
            let all = build_from_slice(&layout, &p, &gs);
            let a = build_from_slice(&layout, &lo, &gs);
            let b = build_from_slice(&layout, &hi, &gs);
            for k in 0..all.tx.len() {
                prop_assert!((all.tx[k] - a.tx[k] - b.tx[k]).abs() < 1e-12);
                prop_assert!((all.rx[k] - a.rx[k] - b.rx[k]).abs() < 1e-12);
            }
            prop_assert!((all.tx.iter().sum::<f64>() - p.iter().sum::<f64>()).abs() < 1e-9);
            prop_assert!(all.tx.iter().chain(&all.rx).all(|&v| v >= 0.0));
        }
    }
}
