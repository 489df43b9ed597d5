//! Gaussian field samplers driven by a [`NoiseLattice`].
//!
//! `Z` is the linear solution at time t (noise rows before t, kernel time
//! t - s), `S` the smooth residual (rows after t, kernel time s), and
//! `F = (Z - S - Z(0)) / 𝔄` the fractional Brownian motion coupled to the
//! same noise.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constants::{frak_a, AlphaParams};
use crate::error::{invalid, Error, Result};
use crate::grid::GridSpec;
use crate::noise::NoiseLattice;
use crate::oracle::{fbm_covariance, s_increment_variance, stationary_increment_variance};
use crate::spectral::{FftPair, Propagator, C64};

/// Smallest admissible ratio t_ext / t for the smooth residual.
pub const MIN_EXTENSION_FACTOR: f64 = 64.0;

/// Largest discarded tail variance, relative to 𝔄² ε^{α-1}.
pub const MAX_TAIL_FRACTION: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldKind {
    Z,
    S,
    F,
    U,
    X,
    H,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub grid: GridSpec,
    pub time_label: f64,
    pub values: Vec<f64>,
    pub kind: FieldKind,
}

impl FieldSample {
    pub fn new(grid: GridSpec, time_label: f64, values: Vec<f64>, kind: FieldKind) -> Result<Self> {
        if values.len() != grid.n_space {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {}",
                values.len(),
                grid.n_space
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite field value at index {i}")));
        }
        Ok(Self {
            grid,
            time_label,
            values,
            kind,
        })
    }

    /// u(x_k) - u(x_k - lag·dx), periodic.
    #[inline]
    pub fn increment(&self, k: usize, lag: usize) -> f64 {
        let n = self.values.len();
        self.values[k] - self.values[(k + n - lag % n) % n]
    }

    pub fn at_origin(&self) -> f64 {
        self.values[self.grid.origin_index()]
    }
}

fn check_noise(grid: &GridSpec, noise: &NoiseLattice) -> Result<()> {
    let ng = noise.grid();
    if !grid.same_space(ng) || (grid.dt() - ng.dt()).abs() > 1e-12 * grid.dt() {
        return Err(Error::GridMismatch(format!(
            "sampler grid {grid:?} does not match noise grid {ng:?}"
        )));
    }
    Ok(())
}

/// Precomputed propagator and FFT plans for one (α, grid).
#[derive(Clone)]
pub struct LinearSampler {
    params: AlphaParams,
    grid: GridSpec,
    prop: Propagator,
    fft: FftPair,
}

/// Row weights of the smooth residual for one (t, t_ext).
#[derive(Clone, Debug)]
pub struct SPlan {
    pub t: f64,
    pub t_ext: f64,
    first_row: usize,
    weights: Vec<Vec<f64>>,
    /// Oracle variance of the discarded (t_ext, ∞) part of S(x) - S(x - ε).
    pub tail_variance: f64,
    /// 𝔄² ε^{α-1} at the checked ε.
    pub tail_reference: f64,
}

impl LinearSampler {
    pub fn new(p: AlphaParams, grid: GridSpec) -> Result<Self> {
        Ok(Self {
            params: p,
            grid,
            prop: Propagator::new(p, &grid)?,
            fft: FftPair::new(grid.n_space),
        })
    }

    pub fn params(&self) -> AlphaParams {
        self.params
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn propagator(&self) -> &Propagator {
        &self.prop
    }

    pub fn fft(&self) -> &FftPair {
        &self.fft
    }

    /// Grid coefficients of Z after `n_final` steps.
    fn z_coefficients(&self, noise: &NoiseLattice, n_final: usize) -> Vec<C64> {
        let modes = self.prop.modes();
        let mut y = vec![C64::new(0.0, 0.0); modes];
        let mut c = vec![C64::new(0.0, 0.0); modes];
        let mut eta = vec![C64::new(0.0, 0.0); modes];
        let mut row = vec![0.0; self.grid.n_space];
        for n in 0..n_final {
            noise.fill_row(n, &mut row);
            self.fft.analyse(&mut row, &mut eta);
            self.prop.step(n, &mut y, &mut c, &eta);
        }
        c
    }

    pub fn sample_z(&self, noise: &NoiseLattice, t: f64) -> Result<FieldSample> {
        check_noise(&self.grid, noise)?;
        let n_final = noise.grid().time_index(t)?;
        if n_final == 0 {
            return Err(invalid("Z is sampled at t > 0"));
        }
        let mut c = self.z_coefficients(noise, n_final);
        let mut values = vec![0.0; self.grid.n_space];
        self.fft.synthesise(&mut c, &mut values);
        FieldSample::new(self.grid, t, values, FieldKind::Z)
    }

    /// Plan the smooth residual at time t using the lattice rows in (t, t_ext].
    /// `eps` is the finest lag at which the truncated tail is checked.
    pub fn s_plan(&self, noise: &NoiseLattice, t: f64, t_ext: f64, eps: f64) -> Result<SPlan> {
        check_noise(&self.grid, noise)?;
        let first_row = noise.grid().time_index(t)?;
        if t <= 0.0 {
            return Err(invalid("S is defined for t > 0"));
        }
        if t_ext < MIN_EXTENSION_FACTOR * t * (1.0 - 1e-12) {
            return Err(invalid(format!(
                "t_ext = {t_ext} is below {MIN_EXTENSION_FACTOR}·t = {}",
                MIN_EXTENSION_FACTOR * t
            )));
        }
        if (noise.horizon() - t_ext).abs() > 1e-9 * t_ext {
            return Err(invalid(format!(
                "noise horizon {} does not equal t_ext = {t_ext}; extend the lattice first",
                noise.horizon()
            )));
        }
        let tail_variance = s_increment_variance(self.params, t_ext, eps)?.value;
        let tail_reference = stationary_increment_variance(self.params, eps);
        if tail_variance > MAX_TAIL_FRACTION * tail_reference {
            return Err(Error::TruncationTail {
                tail: tail_variance,
                limit: MAX_TAIL_FRACTION * tail_reference,
            });
        }
        let dx = self.grid.dx();
        let spec = &self.prop.spectrum;
        let weights = (first_row..noise.n_rows())
            .map(|i| {
                let s = noise.row_start(i);
                let w = noise.row_width(i);
                (0..spec.modes())
                    .map(|m| {
                        if m == 0 {
                            // constant mode cancels in S(0) - S(x)
                            0.0
                        } else {
                            (spec.window_variance(m, s, w) / w).sqrt() / dx
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(SPlan {
            t,
            t_ext,
            first_row,
            weights,
            tail_variance,
            tail_reference,
        })
    }

    pub fn sample_s(&self, plan: &SPlan, noise: &NoiseLattice) -> Result<FieldSample> {
        check_noise(&self.grid, noise)?;
        if plan.first_row + plan.weights.len() != noise.n_rows() {
            return Err(Error::GridMismatch("plan was built for a different lattice".into()));
        }
        let modes = self.prop.modes();
        let mut phi = vec![C64::new(0.0, 0.0); modes];
        let mut eta = vec![C64::new(0.0, 0.0); modes];
        let mut row = vec![0.0; self.grid.n_space];
        for (offset, w) in plan.weights.iter().enumerate() {
            noise.fill_row(plan.first_row + offset, &mut row);
            self.fft.analyse(&mut row, &mut eta);
            for m in 0..modes {
                phi[m] += eta[m] * w[m];
            }
        }
        let mut values = vec![0.0; self.grid.n_space];
        self.fft.synthesise(&mut phi, &mut values);
        let at_origin = values[self.grid.origin_index()];
        for v in values.iter_mut() {
            *v = at_origin - *v;
        }
        FieldSample::new(self.grid, plan.t, values, FieldKind::S)
    }
}

/// Z_t on the grid from the lattice rows before t.
pub fn sample_z(noise: &NoiseLattice, p: AlphaParams, t: f64) -> Result<FieldSample> {
    LinearSampler::new(p, *noise.grid())?.sample_z(noise, t)
}

/// S at time t from the rows in (t, t_ext] of an extended lattice.
pub fn sample_s(
    noise_ext: &NoiseLattice,
    p: AlphaParams,
    t: f64,
    t_ext: f64,
    eps: f64,
) -> Result<FieldSample> {
    let sampler = LinearSampler::new(p, *noise_ext.grid())?;
    let plan = sampler.s_plan(noise_ext, t, t_ext, eps)?;
    sampler.sample_s(&plan, noise_ext)
}

/// F = (Z - S - (Z - S)(0)) / 𝔄, pinned at the origin.
pub fn coupled_f(z: &FieldSample, s: &FieldSample, p: AlphaParams) -> Result<FieldSample> {
    if z.kind != FieldKind::Z || s.kind != FieldKind::S {
        return Err(invalid("coupled_f expects a Z sample and an S sample"));
    }
    if z.grid != s.grid || z.time_label != s.time_label {
        return Err(Error::GridMismatch("Z and S live on different grids or times".into()));
    }
    let a = frak_a(p);
    let o = z.grid.origin_index();
    let pin = z.values[o] - s.values[o];
    let values = z
        .values
        .iter()
        .zip(&s.values)
        .map(|(zv, sv)| (zv - sv - pin) / a)
        .collect();
    FieldSample::new(z.grid, z.time_label, values, FieldKind::F)
}

/// Exact fBm(h) sample at the points `xs` (which must contain 0) by dense
/// Cholesky factorisation. Values are returned in the order of `xs`.
pub fn sample_fbm_direct(h: f64, xs: &[f64], seed: u64) -> Result<Vec<f64>> {
    let mut sampler = FbmSampler::new(h, xs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample(&mut rng))
}

/// Reusable Cholesky factor for repeated fBm draws on fixed points.
pub struct FbmSampler {
    xs: Vec<f64>,
    zero: usize,
    factor: DMatrix<f64>,
    buf: DVector<f64>,
}

impl FbmSampler {
    pub const MAX_POINTS: usize = 4096;

    pub fn new(h: f64, xs: &[f64]) -> Result<Self> {
        if !(h > 0.0 && h <= 0.5) {
            return Err(invalid(format!("Hurst index must lie in (0, 1/2], got {h}")));
        }
        if xs.len() > Self::MAX_POINTS {
            return Err(invalid(format!("at most {} points", Self::MAX_POINTS)));
        }
        let zero = xs
            .iter()
            .position(|&x| x == 0.0)
            .ok_or_else(|| invalid("points must include 0"))?;
        if xs.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("points must be strictly increasing"));
        }
        let others: Vec<f64> = xs.iter().copied().filter(|&x| x != 0.0).collect();
        let n = others.len();
        let cov = DMatrix::from_fn(n, n, |i, j| fbm_covariance(h, others[i], others[j]));
        let factor = match cov.clone().cholesky() {
            Some(c) => c.l(),
            None => {
                let jitter = 1e-12 * (0..n).map(|i| cov[(i, i)]).fold(0.0, f64::max);
                let reg = cov + DMatrix::identity(n, n) * jitter;
                reg.cholesky()
                    .ok_or_else(|| Error::NotPositiveDefinite(format!("{n} points, Hurst {h}")))?
                    .l()
            }
        };
        Ok(Self {
            xs: xs.to_vec(),
            zero,
            factor,
            buf: DVector::zeros(n),
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.xs
    }

    pub fn sample<R: rand::Rng>(&mut self, rng: &mut R) -> Vec<f64> {
        for v in self.buf.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let y = &self.factor * &self.buf;
        let mut out = Vec::with_capacity(self.xs.len());
        out.extend(y.iter().take(self.zero).copied());
        out.push(0.0);
        out.extend(y.iter().skip(self.zero).copied());
        out
    }
}
