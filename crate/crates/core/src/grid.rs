//! Space-time lattice on the torus [-L, L) × [0, t_max].

use serde::{Deserialize, Serialize};

use crate::constants::AlphaParams;
use crate::error::{invalid, Error, Result};

/// Uniform periodic space grid and uniform time grid.
///
/// Grid points are `x_k = -L + k·dx`, `k = 0..n_space`, so the origin sits at
/// index `n_space / 2`. Time rows are `[i·dt, (i+1)·dt)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub half_length: f64,
    pub n_space: usize,
    pub t_max: f64,
    pub n_time: usize,
}

impl GridSpec {
    pub fn new(half_length: f64, n_space: usize, t_max: f64, n_time: usize) -> Result<Self> {
        if !(half_length > 0.0) || !half_length.is_finite() {
            return Err(invalid(format!("half length must be positive, got {half_length}")));
        }
        if n_space < 8 || !n_space.is_power_of_two() {
            return Err(invalid(format!("n_space must be a power of two >= 8, got {n_space}")));
        }
        if !(t_max > 0.0) || !t_max.is_finite() {
            return Err(invalid(format!("t_max must be positive, got {t_max}")));
        }
        if n_time == 0 {
            return Err(invalid("n_time must be at least 1"));
        }
        Ok(Self {
            half_length,
            n_space,
            t_max,
            n_time,
        })
    }

    /// Grid with the given spacing `dx` and time step `dt`.
    pub fn from_steps(dx: f64, n_space: usize, dt: f64, n_time: usize) -> Result<Self> {
        Self::new(0.5 * dx * n_space as f64, n_space, dt * n_time as f64, n_time)
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        2.0 * self.half_length / self.n_space as f64
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.t_max / self.n_time as f64
    }

    #[inline]
    pub fn x(&self, k: usize) -> f64 {
        -self.half_length + k as f64 * self.dx()
    }

    #[inline]
    pub fn origin_index(&self) -> usize {
        self.n_space / 2
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.n_space).map(|k| self.x(k)).collect()
    }

    pub fn cells(&self) -> usize {
        self.n_space.saturating_mul(self.n_time)
    }

    /// Index `n` with `t = n·dt`, accepting relative rounding of 1e-9.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        let r = t / self.dt();
        let n = r.round();
        if !t.is_finite() || (r - n).abs() > 1e-9 * r.max(1.0) || n < 0.0 || n > self.n_time as f64 {
            return Err(Error::OffLattice(t));
        }
        Ok(n as usize)
    }

    /// Index offset for a spatial lag, which must be a whole number of cells.
    pub fn lag_cells(&self, eps: f64) -> Result<usize> {
        let r = eps / self.dx();
        let n = r.round();
        if !(eps > 0.0) || (r - n).abs() > 1e-9 * r.max(1.0) || n >= self.n_space as f64 {
            return Err(invalid(format!("lag {eps} is not a positive multiple of dx = {}", self.dx())));
        }
        Ok(n as usize)
    }

    /// dt ≤ dx^α, required when σ is not constant.
    pub fn check_resolution(&self, p: AlphaParams) -> Result<()> {
        let limit = self.dx().powf(p.alpha());
        if self.dt() > limit * (1.0 + 1e-12) {
            return Err(invalid(format!(
                "resolution guard violated: dt = {:e} > dx^alpha = {limit:e}",
                self.dt()
            )));
        }
        Ok(())
    }

    /// Same space grid, different time grid.
    pub fn with_time(&self, t_max: f64, n_time: usize) -> Result<Self> {
        Self::new(self.half_length, self.n_space, t_max, n_time)
    }

    pub fn same_space(&self, other: &GridSpec) -> bool {
        self.n_space == other.n_space && self.half_length == other.half_length
    }

    /// Stable 64-bit fingerprint of the grid.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for word in [
            self.half_length.to_bits(),
            self.n_space as u64,
            self.t_max.to_bits(),
            self.n_time as u64,
        ] {
            for b in word.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry() {
        let g = GridSpec::new(4.0, 64, 1.0, 10).unwrap();
        assert_eq!(g.dx(), 0.125);
        assert!((g.dt() - 0.1).abs() < 1e-15);
        assert_eq!(g.x(g.origin_index()), 0.0);
        assert_eq!(g.x(0), -4.0);
        assert_eq!(g.positions().len(), 64);
        assert_eq!(g.cells(), 640);
    }

    #[test]
    fn validation() {
        assert!(GridSpec::new(4.0, 63, 1.0, 10).is_err());
        assert!(GridSpec::new(-1.0, 64, 1.0, 10).is_err());
        assert!(GridSpec::new(4.0, 64, 0.0, 10).is_err());
        assert!(GridSpec::new(4.0, 64, 1.0, 0).is_err());
    }

    #[test]
    fn lattice_times_and_lags() {
        let g = GridSpec::new(4.0, 64, 1.0, 10).unwrap();
        assert_eq!(g.time_index(0.3).unwrap(), 3);
        assert_eq!(g.time_index(1.0).unwrap(), 10);
        assert!(matches!(g.time_index(0.35), Err(Error::OffLattice(_))));
        assert!(g.time_index(1.1).is_err());
        assert_eq!(g.lag_cells(0.5).unwrap(), 4);
        assert!(g.lag_cells(0.3).is_err());
    }

    #[test]
    fn resolution_guard() {
        let p = AlphaParams::new(2.0).unwrap();
        let g = GridSpec::from_steps(0.1, 64, 0.01, 10).unwrap();
        assert!(g.check_resolution(p).is_ok());
        let g = GridSpec::from_steps(0.1, 64, 0.011, 10).unwrap();
        assert!(g.check_resolution(p).is_err());
    }

    #[test]
    fn fingerprint_distinguishes() {
        let a = GridSpec::new(4.0, 64, 1.0, 10).unwrap();
        let b = GridSpec::new(4.0, 64, 1.0, 11).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.fingerprint());
    }
}
