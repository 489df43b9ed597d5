//! Alias-folded spectral representation of the linear stochastic heat flow.
//!
//! A field on the grid is stored by its real-FFT coefficients `c_m`,
//! `u_k = Σ_m c_m e^{2πimk/N}`. On the torus of length 2L the mode with
//! wavenumber χ = πm/L decays at rate λ = |χ|^α. Grid values only see the
//! folded sum over the aliases m + jN, so the exact grid law of the linear
//! field at time t has per-mode variance
//!
//! ```text
//! V_m(t) = Σ_j h(λ_{m+jN}, t) / (2L),   h(λ, t) = (1 - e^{-2λt}) / (2λ).
//! ```
//!
//! The principal alias is propagated as an Ornstein–Uhlenbeck recursion;
//! the unresolved aliases (j ≠ 0) decorrelate within one step and are
//! injected as a fresh contribution from the current noise row only. The
//! marginal law at every lattice time is therefore exact for any dt.

use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::constants::AlphaParams;
use crate::error::{invalid, Result};
use crate::grid::GridSpec;
use crate::special::hurwitz_zeta;

pub type C64 = Complex<f64>;

/// h(λ, t) = ∫_0^t e^{-2λr} dr.
#[inline]
pub fn ou_variance(lam: f64, t: f64) -> f64 {
    if lam == 0.0 {
        t
    } else {
        -(-2.0 * lam * t).exp_m1() / (2.0 * lam)
    }
}

/// Forward/backward real FFT plans for one length.
#[derive(Clone)]
pub struct FftPair {
    n: usize,
    fwd: Arc<dyn RealToComplex<f64>>,
    inv: Arc<dyn ComplexToReal<f64>>,
}

impl FftPair {
    pub fn new(n: usize) -> Self {
        let mut planner = RealFftPlanner::<f64>::new();
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Coefficients c with input = Σ c_m e^{2πimk/N}; `input` is used as scratch.
    pub fn analyse(&self, input: &mut [f64], out: &mut [C64]) {
        self.fwd.process(input, out).expect("fft length mismatch");
        let inv_n = 1.0 / self.n as f64;
        for c in out.iter_mut() {
            *c *= inv_n;
        }
    }

    /// Grid values from coefficients; `coef` is used as scratch.
    pub fn synthesise(&self, coef: &mut [C64], out: &mut [f64]) {
        let last = coef.len() - 1;
        coef[0].im = 0.0;
        coef[last].im = 0.0;
        self.inv.process(coef, out).expect("fft length mismatch");
    }
}

/// Decay rates and alias sums of the folded spectrum.
#[derive(Clone, Debug)]
pub struct Spectrum {
    alpha: f64,
    n: usize,
    half_length: f64,
    /// Principal rates λ_m, m = 0..=N/2.
    lambda: Vec<f64>,
    /// Σ_{j≠0} 1/(2λ_{m+jN}).
    alias_inf: Vec<f64>,
}

impl Spectrum {
    pub fn new(p: AlphaParams, grid: &GridSpec) -> Self {
        let a = p.alpha();
        let n = grid.n_space;
        let l = grid.half_length;
        let lambda: Vec<f64> = (0..=n / 2).map(|m| (PI * m as f64 / l).powf(a)).collect();
        let pref = 0.5 * (l / (PI * n as f64)).powf(a);
        let alias_inf = (0..=n / 2)
            .map(|m| {
                let frac = m as f64 / n as f64;
                pref * (hurwitz_zeta(a, 1.0 + frac) + hurwitz_zeta(a, 1.0 - frac))
            })
            .collect();
        Self {
            alpha: a,
            n,
            half_length: l,
            lambda,
            alias_inf,
        }
    }

    pub fn modes(&self) -> usize {
        self.lambda.len()
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }

    fn alias_rate(&self, m: usize, j: i64) -> f64 {
        let w = (m as i64 + j * self.n as i64).unsigned_abs() as f64;
        (PI * w / self.half_length).powf(self.alpha)
    }

    /// Σ_{j≠0} e^{-2λ_j t}/(2λ_j).
    pub fn alias_transient(&self, m: usize, t: f64) -> f64 {
        if t <= 0.0 {
            return self.alias_inf[m];
        }
        let mut sum = 0.0;
        let mut j = 1i64;
        loop {
            let mut added = 0.0;
            for jj in [j, -j] {
                let lam = self.alias_rate(m, jj);
                added += (-2.0 * lam * t).exp() / (2.0 * lam);
            }
            sum += added;
            if added <= 1e-18 * sum || added == 0.0 || j > 10_000_000 {
                break;
            }
            j += 1;
        }
        sum
    }

    /// Σ_{j≠0} h(λ_j, t).
    pub fn alias_variance(&self, m: usize, t: f64) -> f64 {
        (self.alias_inf[m] - self.alias_transient(m, t)).max(0.0)
    }

    /// Σ_j h(λ_j, t): grid variance of mode m at time t, times 2L.
    pub fn folded_variance(&self, m: usize, t: f64) -> f64 {
        ou_variance(self.lambda[m], t) + self.alias_variance(m, t)
    }

    /// Σ_j e^{-2λ_j s} h(λ_j, w): contribution of the noise on [s, s+w] to a
    /// field with kernel time equal to the absolute time.
    pub fn window_variance(&self, m: usize, s: f64, w: f64) -> f64 {
        let lam = self.lambda[m];
        let head = if lam == 0.0 { w } else { (-2.0 * lam * s).exp() * ou_variance(lam, w) };
        let alias = (self.alias_transient(m, s) - self.alias_transient(m, s + w)).max(0.0);
        head + alias
    }

    /// Exact grid variance of u(x_{k+e}) - u(x_k) for the linear field at time t.
    pub fn increment_variance(&self, t: f64, lag_cells: usize) -> f64 {
        let two_l = 2.0 * self.half_length;
        let mut sum = 0.0;
        for m in 0..self.modes() {
            let mult = if m == 0 || 2 * m == self.n { 1.0 } else { 2.0 };
            let phase = 2.0 * PI * (m * lag_cells) as f64 / self.n as f64;
            sum += mult * self.folded_variance(m, t) * 2.0 * (1.0 - phase.cos());
        }
        sum / two_l
    }
}

/// Per-step weights of the folded recursion.
///
/// Step n maps the state at t_n to t_{n+1} with
/// `y ← decay·y + carry·η`, `c = decay·y_old + fresh_n·η`,
/// where η are the coefficients of σ(u)·ξ for row n and `c` are the grid
/// coefficients of the field.
#[derive(Clone, Debug)]
pub struct Propagator {
    pub spectrum: Spectrum,
    pub dt: f64,
    pub decay: Vec<f64>,
    pub carry: Vec<f64>,
    transient: Vec<Vec<f64>>,
    steady: Vec<f64>,
}

impl Propagator {
    pub fn new(p: AlphaParams, grid: &GridSpec) -> Result<Self> {
        let spectrum = Spectrum::new(p, grid);
        let dt = grid.dt();
        let dx = grid.dx();
        if !(dt > 0.0) {
            return Err(invalid("time step must be positive"));
        }
        let decay: Vec<f64> = spectrum.lambda.iter().map(|l| (-l * dt).exp()).collect();
        let head: Vec<f64> = spectrum.lambda.iter().map(|&l| ou_variance(l, dt)).collect();
        let carry: Vec<f64> = head.iter().map(|h| (h / dt).sqrt() / dx).collect();
        let fresh_at = |t_next: f64| -> Vec<f64> {
            (0..spectrum.modes())
                .map(|m| ((head[m] + spectrum.alias_variance(m, t_next)) / dt).sqrt() / dx)
                .collect()
        };
        let steady: Vec<f64> = (0..spectrum.modes())
            .map(|m| ((head[m] + spectrum.alias_inf[m]) / dt).sqrt() / dx)
            .collect();
        let mut transient = Vec::new();
        for n in 0..grid.n_time {
            let t_next = (n + 1) as f64 * dt;
            let settled = (0..spectrum.modes())
                .all(|m| spectrum.alias_transient(m, t_next) <= 1e-17 * spectrum.alias_inf[m]);
            if settled {
                break;
            }
            transient.push(fresh_at(t_next));
        }
        Ok(Self {
            spectrum,
            dt,
            decay,
            carry,
            transient,
            steady,
        })
    }

    pub fn modes(&self) -> usize {
        self.decay.len()
    }

    /// Injection weight of step n for the grid field.
    pub fn fresh(&self, n: usize) -> &[f64] {
        self.transient.get(n).unwrap_or(&self.steady)
    }

    /// Effective coefficient multiplying η_i in the field at step `n_final`.
    pub fn row_weight(&self, i: usize, n_final: usize) -> Vec<f64> {
        assert!(i < n_final);
        if i + 1 == n_final {
            return self.fresh(i).to_vec();
        }
        let k = (n_final - 1 - i) as f64;
        self.spectrum
            .lambda
            .iter()
            .zip(&self.carry)
            .map(|(l, c)| (-l * k * self.dt).exp() * c)
            .collect()
    }

    /// Advance one step in place.
    pub fn step(&self, n: usize, y: &mut [C64], c: &mut [C64], eta: &[C64]) {
        let fresh = self.fresh(n);
        for m in 0..y.len() {
            let base = y[m] * self.decay[m];
            c[m] = base + eta[m] * fresh[m];
            y[m] = base + eta[m] * self.carry[m];
        }
    }
}

/// Real-space kernel κ with field = Σ_k' κ(k - k') ξ_k' from spectral weights W.
pub fn real_space_kernel(fft: &FftPair, weights: &[f64]) -> Vec<f64> {
    let n = fft.len();
    let mut coef: Vec<C64> = weights.iter().map(|&w| C64::new(w / n as f64, 0.0)).collect();
    let mut out = vec![0.0; n];
    fft.synthesise(&mut coef, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::q_increment_variance;

    fn ap(a: f64) -> AlphaParams {
        AlphaParams::new(a).unwrap()
    }

    #[test]
    fn fft_round_trip() {
        let fft = FftPair::new(16);
        let data: Vec<f64> = (0..16).map(|k| (k as f64 * 0.7).sin() + 0.1 * k as f64).collect();
        let mut buf = data.clone();
        let mut coef = vec![C64::new(0.0, 0.0); 9];
        fft.analyse(&mut buf, &mut coef);
        assert!((coef[0].re - data.iter().sum::<f64>() / 16.0).abs() < 1e-14);
        let mut back = vec![0.0; 16];
        fft.synthesise(&mut coef, &mut back);
        for (a, b) in data.iter().zip(&back) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn alias_sum_matches_brute_force() {
        let g = GridSpec::new(4.0, 32, 1.0, 1).unwrap();
        let s = Spectrum::new(ap(1.5), &g);
        for m in [0, 3, 16] {
            let mut brute = 0.0;
            for j in 1..2_000_000i64 {
                for jj in [j, -j] {
                    brute += 1.0 / (2.0 * s.alias_rate(m, jj));
                }
            }
            // tail beyond |j| = 2e6 from the integral of the summand
            let pref = (PI * 32.0 / 4.0f64).powf(1.5);
            brute += 2.0 * (2e6f64).powf(-0.5) / 0.5 / (2.0 * pref);
            assert!(((brute - s.alias_inf[m]) / s.alias_inf[m]).abs() < 1e-6, "m {m}");
        }
    }

    #[test]
    fn transient_decays_to_zero_and_starts_at_full_sum() {
        let g = GridSpec::new(4.0, 64, 1.0, 1).unwrap();
        let s = Spectrum::new(ap(2.0), &g);
        assert_eq!(s.alias_transient(5, 0.0), s.alias_inf[5]);
        assert!(s.alias_transient(5, 1.0) < 1e-100);
        assert!(s.alias_variance(5, 1e-6) > 0.0);
    }

    #[test]
    fn window_variances_add_up() {
        let g = GridSpec::new(4.0, 64, 1.0, 1).unwrap();
        let s = Spectrum::new(ap(1.5), &g);
        for m in [1, 10, 32] {
            let total = s.folded_variance(m, 0.9);
            let pieces = s.window_variance(m, 0.0, 0.3) + s.window_variance(m, 0.3, 0.6);
            assert!(((total - pieces) / total).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_grid_variance_close_to_whole_line_oracle() {
        for a in [1.5, 2.0] {
            let p = ap(a);
            let g = GridSpec::new(8.0, 4096, 1.0, 1).unwrap();
            let s = Spectrum::new(p, &g);
            for lag in [8, 16] {
                let eps = lag as f64 * g.dx();
                let grid = s.increment_variance(1.0, lag);
                let oracle = q_increment_variance(p, 1.0, eps).unwrap().value;
                assert!(((grid - oracle) / oracle).abs() < 0.005, "alpha {a} lag {lag}: {grid} {oracle}");
            }
        }
    }

    #[test]
    fn recursion_reproduces_folded_variance() {
        // E|η_m|² = dt·dx/N, so Var(c_m) = Σ_i W_i² dt dx / N must equal V_m(t)/(2L)
        let p = ap(1.5);
        let g = GridSpec::new(2.0, 64, 0.05, 50).unwrap();
        let prop = Propagator::new(p, &g).unwrap();
        let n_final = 37;
        let t = n_final as f64 * g.dt();
        for m in [0usize, 1, 7, 32] {
            let mut var = 0.0;
            for i in 0..n_final {
                let w = prop.row_weight(i, n_final)[m];
                var += w * w * g.dt() * g.dx() / g.n_space as f64;
            }
            let target = prop.spectrum.folded_variance(m, t) / (2.0 * g.half_length);
            assert!(((var - target) / target).abs() < 1e-10, "m {m}: {var} vs {target}");
        }
    }
}
