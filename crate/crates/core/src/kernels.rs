//! Transition density of the symmetric α-stable semigroup.
//!
//! The density is defined through its characteristic function
//! `exp(-t |χ|^α)`, so that
//!
//! ```text
//! p_t(x) = π^{-1} ∫_0^∞ cos(x χ) exp(-t χ^α) dχ,
//! ```
//!
//! which for α = 2 is the Gaussian `(4πt)^{-1/2} exp(-x²/(4t))`. Values are
//! computed for the unit-time density `p_1` and rescaled with
//! `p_t(x) = t^{-1/α} p_1(x t^{-1/α})`. Near the origin the inversion
//! integral is evaluated by adaptive quadrature; for large arguments the
//! convergent-in-practice asymptotic series of the polynomial tail is used.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::constants::AlphaParams;
use crate::error::{invalid, Result};
use crate::quadrature::{integrate_panels, Estimate, Tolerance};
use crate::special::{gamma, ln_gamma, normal_sf};

/// Beyond this scaled abscissa the tail series replaces quadrature.
pub const ASYMPTOTIC_THRESHOLD: f64 = 24.0;

/// exp(-χ^α) is below 1e-18 once χ^α exceeds this.
const CHAR_CUTOFF: f64 = 42.0;

/// A tabulated density p_t on a set of abscissae.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelTable {
    pub params: AlphaParams,
    pub time: f64,
    pub abscissae: Vec<f64>,
    pub values: Vec<f64>,
    /// Largest absolute error estimate over the table.
    pub quad_error: f64,
}

impl KernelTable {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Trapezoid mass over the (sorted) abscissae.
    pub fn trapezoid_mass(&self) -> f64 {
        self.abscissae
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(x, v)| 0.5 * (x[1] - x[0]) * (v[0] + v[1]))
            .sum()
    }
}

/// Terms of the large-|y| expansion of p_1(y):
/// π^{-1} Σ_k (-1)^{k+1} Γ(αk+1) sin(kπα/2) / k! · |y|^{-αk-1}.
fn tail_series(alpha: f64, y: f64, integrated: bool) -> f64 {
    let y = y.abs();
    let ln_y = y.ln();
    let mut sum = 0.0;
    let mut prev_mag = f64::INFINITY;
    for k in 1..400 {
        let kf = k as f64;
        let s = (kf * PI * alpha / 2.0).sin();
        // integrated form gives ∫_y^∞ instead of the density
        let ln_mag = ln_gamma(alpha * kf + 1.0) - ln_gamma(kf + 1.0) - alpha * kf * ln_y
            - if integrated { (alpha * kf).ln() } else { ln_y };
        let mag = ln_mag.exp();
        if mag > prev_mag && k > 3 {
            break;
        }
        prev_mag = mag;
        let term = mag * s;
        sum += if k % 2 == 1 { term } else { -term };
        if mag < 1e-18 * sum.abs().max(1e-300) {
            break;
        }
    }
    sum / PI
}

fn oscillation_breaks(upper: f64, freq: f64) -> Vec<f64> {
    let mut breaks = vec![0.0];
    // geometric refinement near the cusp of χ^α at the origin
    let mut b = 1e-3_f64.min(upper / 4.0);
    while b < 0.5_f64.min(upper) {
        breaks.push(b);
        b *= 4.0;
    }
    let step = if freq > 0.0 { (PI / freq).min(1.0) } else { 1.0 };
    let mut x = *breaks.last().unwrap();
    loop {
        x += step;
        if x >= upper {
            break;
        }
        breaks.push(x);
    }
    breaks.push(upper);
    breaks
}

/// p_1(y) with an absolute error estimate.
pub fn unit_density(p: AlphaParams, y: f64) -> Result<Estimate> {
    let a = p.alpha();
    let y = y.abs();
    if y >= ASYMPTOTIC_THRESHOLD {
        if a == 2.0 {
            return Ok(Estimate::new((-y * y / 4.0).exp() / (2.0 * PI.sqrt()), 0.0));
        }
        let v = tail_series(a, y, false);
        return Ok(Estimate::new(v, 1e-16 * v.abs()));
    }
    let upper = CHAR_CUTOFF.powf(1.0 / a);
    let breaks = oscillation_breaks(upper, y);
    let est = integrate_panels(
        &|c: f64| (y * c).cos() * (-c.powf(a)).exp(),
        &breaks,
        Tolerance::new(1e-15, 1e-13),
    )?;
    Ok(est.scale(1.0 / PI))
}

/// p_t(x) with an absolute error estimate.
pub fn density(p: AlphaParams, t: f64, x: f64) -> Result<Estimate> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(invalid(format!("kernel time must be positive, got {t}")));
    }
    if !x.is_finite() {
        return Err(invalid("abscissa must be finite"));
    }
    let scale = t.powf(-1.0 / p.alpha());
    Ok(unit_density(p, x * scale)?.scale(scale))
}

/// Fast p_1 for internal oracles: closed form when α = 2.
pub(crate) fn unit_density_fast(p: AlphaParams, y: f64) -> Result<f64> {
    if p.alpha() == 2.0 {
        return Ok((-y * y / 4.0).exp() / (2.0 * PI.sqrt()));
    }
    Ok(unit_density(p, y)?.value)
}

/// Tabulate p_t at the given abscissae.
pub fn eval_kernel(p: AlphaParams, t: f64, xs: &[f64]) -> Result<KernelTable> {
    let mut values = Vec::with_capacity(xs.len());
    let mut quad_error: f64 = 0.0;
    for &x in xs {
        let e = density(p, t, x)?;
        values.push(e.value);
        quad_error = quad_error.max(e.error);
    }
    Ok(KernelTable {
        params: p,
        time: t,
        abscissae: xs.to_vec(),
        values,
        quad_error,
    })
}

/// Tabulate (∇_ε p_t)(x) = p_t(x) - p_t(x - ε).
pub fn eval_increment_kernel(p: AlphaParams, t: f64, eps: f64, xs: &[f64]) -> Result<KernelTable> {
    if !(eps >= 0.0) {
        return Err(invalid(format!("increment must be non-negative, got {eps}")));
    }
    let mut values = Vec::with_capacity(xs.len());
    let mut quad_error: f64 = 0.0;
    for &x in xs {
        if eps == 0.0 {
            density(p, t, x)?;
            values.push(0.0);
            continue;
        }
        let a = density(p, t, x)?;
        let b = density(p, t, x - eps)?;
        values.push(a.value - b.value);
        quad_error = quad_error.max(a.error + b.error);
    }
    Ok(KernelTable {
        params: p,
        time: t,
        abscissae: xs.to_vec(),
        values,
        quad_error,
    })
}

/// P{|X_1| > λ} for the unit-time stable law.
///
/// Uses ∫_{-λ}^{λ} p_1 = (2/π) ∫_0^∞ sin(λχ) e^{-χ^α} / χ dχ below the
/// asymptotic threshold and the integrated tail series above it.
pub fn stable_tail_mass(p: AlphaParams, lam: f64) -> Result<f64> {
    if !(lam > 0.0) {
        return Err(invalid(format!("tail level must be positive, got {lam}")));
    }
    let a = p.alpha();
    if a == 2.0 {
        return Ok(2.0 * normal_sf(lam / 2f64.sqrt()));
    }
    if lam >= ASYMPTOTIC_THRESHOLD {
        return Ok(2.0 * tail_series(a, lam, true));
    }
    let upper = CHAR_CUTOFF.powf(1.0 / a);
    let breaks = oscillation_breaks(upper, lam);
    let sinc = |c: f64| {
        let s = if c == 0.0 { lam } else { (lam * c).sin() / c };
        s * (-c.powf(a)).exp()
    };
    let inner = integrate_panels(&sinc, &breaks, Tolerance::new(1e-15, 1e-14))?;
    Ok((1.0 - 2.0 * inner.value / PI).max(0.0))
}

/// p_t(0) = Γ(1/α) / (π α) · t^{-1/α}.
pub fn density_at_origin(p: AlphaParams, t: f64) -> f64 {
    let a = p.alpha();
    gamma(1.0 / a) / (PI * a) * t.powf(-1.0 / a)
}

/// Coefficient C_α of the tail p_1(y) ~ C_α |y|^{-α-1}.
pub fn tail_coefficient(p: AlphaParams) -> f64 {
    let a = p.alpha();
    gamma(a + 1.0) * (PI * a / 2.0).sin() / PI
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct CacheKey {
    alpha: u64,
    time: u64,
    grid: u64,
}

/// Thread-safe cache of kernel tables keyed by (α, t, abscissae hash).
#[derive(Clone, Default)]
pub struct KernelCache {
    inner: Arc<Mutex<HashMap<CacheKey, Arc<KernelTable>>>>,
}

impl KernelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_eval(&self, p: AlphaParams, t: f64, xs: &[f64]) -> Result<Arc<KernelTable>> {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for x in xs {
            x.to_bits().hash(&mut h);
        }
        let key = CacheKey {
            alpha: p.alpha().to_bits(),
            time: t.to_bits(),
            grid: h.finish(),
        };
        if let Some(hit) = self.inner.lock().expect("cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let table = Arc::new(eval_kernel(p, t, xs)?);
        self.inner
            .lock()
            .expect("cache poisoned")
            .entry(key)
            .or_insert_with(|| table.clone());
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
