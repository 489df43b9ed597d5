//! Adaptive Gauss–Kronrod quadrature and oscillatory half-period summation.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// A quadrature result with its error estimate.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

impl Estimate {
    pub fn new(value: f64, error: f64) -> Self {
        Self { value, error }
    }

    pub fn scale(self, c: f64) -> Self {
        Self::new(self.value * c, self.error * c.abs())
    }
}

impl std::ops::Add for Estimate {
    type Output = Estimate;
    fn add(self, rhs: Self) -> Self {
        Estimate::new(self.value + rhs.value, self.error + rhs.error)
    }
}

impl std::ops::Sub for Estimate {
    type Output = Estimate;
    fn sub(self, rhs: Self) -> Self {
        Estimate::new(self.value - rhs.value, self.error + rhs.error)
    }
}

/// Tolerances for adaptive integration.
#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_intervals: usize,
}

impl Tolerance {
    pub fn new(abs: f64, rel: f64) -> Self {
        Self {
            abs,
            rel,
            max_intervals: 4000,
        }
    }

    fn target(&self, value: f64) -> f64 {
        self.abs.max(self.rel * value.abs())
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Self::new(1e-14, 1e-12)
    }
}

/// One 15-point Kronrod panel on [a, b]; error is |K15 - G7|.
pub fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Estimate {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Estimate::new(kronrod * half, ((kronrod - gauss) * half).abs())
}

struct Panel {
    a: f64,
    b: f64,
    est: Estimate,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.est.error == other.est.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.est
            .error
            .partial_cmp(&other.est.error)
            .unwrap_or(Ordering::Equal)
    }
}

/// Globally adaptive bisection on [a, b].
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: Tolerance) -> Result<Estimate> {
    integrate_panels(&f, &[a, b], tol)
}

/// Adaptive integration starting from the given breakpoints.
pub fn integrate_panels<F: Fn(f64) -> f64>(
    f: &F,
    breaks: &[f64],
    tol: Tolerance,
) -> Result<Estimate> {
    let mut heap = BinaryHeap::new();
    let mut total = Estimate::new(0.0, 0.0);
    for w in breaks.windows(2) {
        let est = gk15(f, w[0], w[1]);
        total = total + est;
        heap.push(Panel {
            a: w[0],
            b: w[1],
            est,
        });
    }
    let mut count = heap.len();
    while total.error > tol.target(total.value) {
        if count >= tol.max_intervals {
            return Err(Error::Quadrature {
                value: total.value,
                achieved: total.error,
                requested: tol.target(total.value),
            });
        }
        let worst = heap.pop().expect("non-empty heap");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // cannot bisect further in floating point
            return Err(Error::Quadrature {
                value: total.value,
                achieved: total.error,
                requested: tol.target(total.value),
            });
        }
        let left = gk15(f, worst.a, mid);
        let right = gk15(f, mid, worst.b);
        total = total - Estimate::new(worst.est.value, 0.0) + left + right;
        total.error -= worst.est.error;
        heap.push(Panel {
            a: worst.a,
            b: mid,
            est: left,
        });
        heap.push(Panel {
            a: mid,
            b: worst.b,
            est: right,
        });
        count += 1;
        // resynchronise the running error to limit drift
        if count % 256 == 0 {
            total.error = heap.iter().map(|p| p.est.error).sum();
        }
    }
    let value: f64 = heap.iter().map(|p| p.est.value).sum();
    let error: f64 = heap.iter().map(|p| p.est.error).sum();
    Ok(Estimate::new(value, error))
}

/// ∫_a^∞ f(x) dx for a non-oscillatory integrand via x = a + (1 - s)/s.
pub fn integrate_to_infinity<F: Fn(f64) -> f64>(f: F, a: f64, tol: Tolerance) -> Result<Estimate> {
    let g = |s: f64| {
        let x = a + (1.0 - s) / s;
        let v = f(x) / (s * s);
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    integrate(g, 0.0, 1.0, tol)
}

/// Wynn's epsilon extrapolation of a sequence of partial sums.
/// Returns the extrapolated limit and the change from the previous extrapolant.
pub fn wynn_epsilon(partial: &[f64]) -> Estimate {
    let n = partial.len();
    if n < 3 {
        let last = *partial.last().unwrap_or(&0.0);
        let prev = if n >= 2 { partial[n - 2] } else { 0.0 };
        return Estimate::new(last, (last - prev).abs());
    }
    // e[k] holds column k of the table for the current anti-diagonal.
    let mut prev_col: Vec<f64> = vec![0.0; n + 1];
    let mut cur_col: Vec<f64> = partial.to_vec();
    let mut best = *partial.last().unwrap();
    let mut best_prev = partial[n - 2];
    let mut col = 0;
    while cur_col.len() > 1 {
        let mut next = Vec::with_capacity(cur_col.len() - 1);
        for i in 0..cur_col.len() - 1 {
            let diff = cur_col[i + 1] - cur_col[i];
            let base = if col == 0 { 0.0 } else { prev_col[i + 1] };
            if diff == 0.0 {
                next.push(f64::INFINITY);
            } else {
                next.push(base + 1.0 / diff);
            }
        }
        col += 1;
        prev_col = cur_col;
        cur_col = next;
        if col % 2 == 0 && cur_col.iter().all(|v| v.is_finite()) {
            let m = cur_col.len();
            best = cur_col[m - 1];
            best_prev = if m >= 2 { cur_col[m - 2] } else { prev_col[prev_col.len() - 2] };
        }
    }
    Estimate::new(best, (best - best_prev).abs())
}

/// ∫_a^∞ g(x) cos(ω x) dx for smooth, eventually monotone g → 0.
///
/// The range is cut at the zeros of cos(ω x); the alternating half-period
/// contributions are summed with Wynn-epsilon acceleration.
pub fn integrate_cos_tail<G: Fn(f64) -> f64>(
    g: G,
    omega: f64,
    a: f64,
    tol: Tolerance,
) -> Result<Estimate> {
    assert!(omega > 0.0, "frequency must be positive");
    let f = |x: f64| g(x) * (omega * x).cos();
    let half = PI / omega;
    // first zero of cos(ωx) strictly above a
    let k0 = ((a * omega / PI) - 0.5).floor() + 1.0;
    let mut left = a;
    let mut right = (k0 + 0.5) * half;
    let piece_tol = Tolerance {
        abs: tol.abs * 1e-2,
        rel: tol.rel * 1e-2,
        max_intervals: tol.max_intervals,
    };
    let mut partial = Vec::new();
    let mut running = 0.0;
    let mut quad_err = 0.0;
    let mut last = Estimate::new(f64::NAN, f64::INFINITY);
    for piece in 0..400 {
        let est = integrate(&f, left, right, piece_tol)?;
        running += est.value;
        quad_err += est.error;
        partial.push(running);
        left = right;
        right += half;
        if piece >= 8 {
            let ext = wynn_epsilon(&partial);
            let change = (ext.value - last.value).abs();
            last = ext;
            if change.max(ext.error) <= tol.target(ext.value) {
                return Ok(Estimate::new(ext.value, change.max(ext.error) + quad_err));
            }
        }
    }
    Err(Error::Quadrature {
        value: last.value,
        achieved: last.error,
        requested: tol.target(last.value),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gk15_is_exact_for_polynomials() {
        let e = gk15(&|x: f64| x.powi(10) - 3.0 * x.powi(3), -1.0, 2.0);
        let exact = (2f64.powi(11) + 1.0) / 11.0 - 0.75 * (16.0 - 1.0);
        assert!((e.value - exact).abs() < 1e-12);
    }

    #[test]
    fn adaptive_handles_sqrt_endpoint() {
        let e = integrate(|x: f64| x.sqrt(), 0.0, 1.0, Tolerance::new(1e-13, 1e-13)).unwrap();
        assert!((e.value - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_reports_failure() {
        let tol = Tolerance {
            abs: 1e-15,
            rel: 1e-15,
            max_intervals: 5,
        };
        let err = integrate(|x: f64| (1.0 / x).sin(), 1e-6, 1.0, tol).unwrap_err();
        match err {
            Error::Quadrature { achieved, .. } => assert!(achieved > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semi_infinite_exponential() {
        let e = integrate_to_infinity(|x: f64| (-x).exp(), 1.0, Tolerance::default()).unwrap();
        assert!((e.value - (-1f64).exp()).abs() < 1e-13);
    }

    #[test]
    fn wynn_accelerates_alternating_harmonic() {
        let mut s = 0.0;
        let partial: Vec<f64> = (1..=20)
            .map(|k| {
                s += if k % 2 == 1 { 1.0 } else { -1.0 } / k as f64;
                s
            })
            .collect();
        let e = wynn_epsilon(&partial);
        assert!((e.value - 2f64.ln()).abs() < 1e-10, "{}", e.value);
    }

    #[test]
    fn cosine_tail_dirichlet_type() {
        // ∫_1^∞ cos(x)/x² dx = cos 1 - (π/2 - Si(1)) ... compared against a brute-force
        // finite integral plus integration by parts remainder.
        let e = integrate_cos_tail(|x| x.powi(-2), 1.0, 1.0, Tolerance::new(1e-13, 1e-12)).unwrap();
        // Si(1) = 0.946083070367183
        let expected = 1f64.cos() - (PI / 2.0 - 0.946_083_070_367_183);
        assert!((e.value - expected).abs() < 1e-11, "{} vs {}", e.value, expected);
    }
}
