//! Discretized space-time white noise.
//!
//! Each time row is an independent ChaCha8 stream selected by the row index,
//! so any row can be regenerated on its own and two samplers reading the same
//! `(seed, row)` see identical values. Cell increments are N(0, w·dx) where w
//! is the row width.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::GridSpec;

/// Default bound on the number of cells a lattice may describe.
pub const DEFAULT_CELL_CAP: usize = 1 << 32;

/// Growth ratio of the graded rows appended after `t_max`.
pub const EXTENSION_RATIO: f64 = 1.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLattice {
    grid: GridSpec,
    seed: u64,
    /// Widths of graded rows appended after t_max.
    extension: Vec<f64>,
    cap: usize,
}

impl NoiseLattice {
    pub fn new(grid: GridSpec, seed: u64) -> Result<Self> {
        Self::with_cap(grid, seed, DEFAULT_CELL_CAP)
    }

    pub fn with_cap(grid: GridSpec, seed: u64, cap: usize) -> Result<Self> {
        let cells = grid.cells();
        if cells > cap {
            return Err(Error::MemoryCap { cells, cap });
        }
        Ok(Self {
            grid,
            seed,
            extension: Vec::new(),
            cap,
        })
    }

    /// Append graded rows from `t_max` to `t_ext`; the first has width dt and
    /// each following one is larger by [`EXTENSION_RATIO`].
    pub fn extend_to(mut self, t_ext: f64) -> Result<Self> {
        let t_max = self.grid.t_max;
        if !(t_ext >= t_max) || !t_ext.is_finite() {
            return Err(invalid(format!("extension end {t_ext} must be at least t_max = {t_max}")));
        }
        self.extension.clear();
        let mut w = self.grid.dt();
        let mut end = t_max;
        while end < t_ext * (1.0 - 1e-12) {
            let width = if t_ext - end < w * (1.0 + 1.0 / EXTENSION_RATIO) {
                t_ext - end
            } else {
                w
            };
            self.extension.push(width);
            end += width;
            w *= EXTENSION_RATIO;
        }
        let cells = self.n_rows().saturating_mul(self.grid.n_space);
        if cells > self.cap {
            return Err(Error::MemoryCap { cells, cap: self.cap });
        }
        Ok(self)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_rows(&self) -> usize {
        self.grid.n_time + self.extension.len()
    }

    /// End time of the last row.
    pub fn horizon(&self) -> f64 {
        self.grid.t_max + self.extension.iter().sum::<f64>()
    }

    pub fn row_width(&self, i: usize) -> f64 {
        if i < self.grid.n_time {
            self.grid.dt()
        } else {
            self.extension[i - self.grid.n_time]
        }
    }

    pub fn row_start(&self, i: usize) -> f64 {
        if i <= self.grid.n_time {
            i as f64 * self.grid.dt()
        } else {
            self.grid.t_max + self.extension[..i - self.grid.n_time].iter().sum::<f64>()
        }
    }

    /// Fill `out` with the increments of row `i`.
    pub fn fill_row(&self, i: usize, out: &mut [f64]) {
        assert!(i < self.n_rows(), "row {i} outside lattice");
        assert_eq!(out.len(), self.grid.n_space);
        let scale = (self.row_width(i) * self.grid.dx()).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = scale * z;
        }
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.n_space];
        self.fill_row(i, &mut out);
        out
    }

    /// All rows, row-major.
    pub fn materialize(&self) -> Result<Vec<f64>> {
        let n = self.grid.n_space;
        let mut out = vec![0.0; self.n_rows() * n];
        for (i, chunk) in out.chunks_mut(n).enumerate() {
            self.fill_row(i, chunk);
        }
        Ok(out)
    }
}

/// Lattice for the grid with the given seed.
pub fn make_noise(grid: GridSpec, seed: u64) -> Result<NoiseLattice> {
    NoiseLattice::new(grid, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(8.0, 256, 1.0, 64).unwrap()
    }

    #[test]
    fn reproducible_and_row_addressable() {
        let a = make_noise(grid(), 11).unwrap().materialize().unwrap();
        let b = make_noise(grid(), 11).unwrap().materialize().unwrap();
        assert_eq!(a, b);
        let lat = make_noise(grid(), 11).unwrap();
        assert_eq!(lat.row(17), a[17 * 256..18 * 256].to_vec());
    }

    #[test]
    fn moments_within_five_standard_errors() {
        let g = grid();
        let v = make_noise(g, 3).unwrap().materialize().unwrap();
        let n = v.len() as f64;
        let target = g.dt() * g.dx();
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| x * x).sum::<f64>() / n;
        assert!(mean.abs() < 5.0 * (target / n).sqrt());
        // Var of x² is 2 target²
        assert!((var - target).abs() < 5.0 * (2.0 * target * target / n).sqrt());
    }

    #[test]
    fn neighbouring_seeds_uncorrelated() {
        let a = make_noise(grid(), 5).unwrap().materialize().unwrap();
        let b = make_noise(grid(), 6).unwrap().materialize().unwrap();
        let n = a.len() as f64;
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum();
        let nb: f64 = b.iter().map(|x| x * x).sum();
        let rho = dot / (na * nb).sqrt();
        assert!(rho.abs() < 5.0 / n.sqrt());
    }

    #[test]
    fn memory_cap_enforced() {
        assert!(matches!(
            NoiseLattice::with_cap(grid(), 1, 1000),
            Err(Error::MemoryCap { .. })
        ));
    }

    #[test]
    fn graded_extension_covers_horizon() {
        let lat = make_noise(grid(), 1).unwrap().extend_to(64.0).unwrap();
        assert!((lat.horizon() - 64.0).abs() < 1e-9);
        assert_eq!(lat.row_width(64), grid().dt());
        for i in lat.grid().n_time..lat.n_rows() - 1 {
            assert!((lat.row_start(i + 1) - lat.row_start(i) - lat.row_width(i)).abs() < 1e-9);
        }
        // extension rows have variance width·dx
        let row = lat.row(lat.n_rows() - 2);
        let w = lat.row_width(lat.n_rows() - 2);
        let var = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
        let target = w * lat.grid().dx();
        assert!((var / target - 1.0).abs() < 5.0 * (2.0 / 256f64).sqrt());
        assert!(make_noise(grid(), 1).unwrap().extend_to(0.5).is_err());
    }
}
