//! Closed-form constants of the gradient limit theorems.
//!
//! Everything here is a pure function of the stability index `alpha`; the
//! values act as ground truth for the samplers and estimators elsewhere in
//! the crate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::quadrature::{integrate_cos_tail, Estimate, Tolerance};
use crate::special::gamma;

/// Smallest admissible distance of `alpha` from 1.
pub const ALPHA_MARGIN: f64 = 1e-6;

/// Stability index of the fractional Laplacian, validated to lie in (1, 2].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct AlphaParams {
    alpha: f64,
}

impl AlphaParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 1.0 + ALPHA_MARGIN || alpha > 2.0 {
            return Err(invalid(format!(
                "alpha must lie in (1 + {ALPHA_MARGIN:e}, 2], got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }

    #[inline]
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Hurst index (alpha - 1) / 2 of the associated fBm.
    #[inline]
    pub fn hurst(&self) -> f64 {
        0.5 * (self.alpha - 1.0)
    }

    /// The variation exponent 2 / (alpha - 1).
    #[inline]
    pub fn variation_exponent(&self) -> f64 {
        2.0 / (self.alpha - 1.0)
    }
}

impl TryFrom<f64> for AlphaParams {
    type Error = crate::error::Error;
    fn try_from(value: f64) -> Result<Self> {
        AlphaParams::new(value)
    }
}

impl From<AlphaParams> for f64 {
    fn from(p: AlphaParams) -> f64 {
        p.alpha
    }
}

fn abs_cos_half_pi(alpha: f64) -> f64 {
    (alpha * PI / 2.0).cos().abs()
}

/// {2 Γ(α) |cos(απ/2)|}^{-1/2}: the gradient-ratio constant.
pub fn frak_a(p: AlphaParams) -> f64 {
    let a = p.alpha();
    (2.0 * gamma(a) * abs_cos_half_pi(a)).powf(-0.5)
}

/// The variation constant π^{-1/2} |Γ(α) cos(απ/2)|^{-1/(α-1)} Γ(1/2 + 1/(α-1)).
pub fn frak_b(p: AlphaParams) -> f64 {
    let a = p.alpha();
    let q = 1.0 / (a - 1.0);
    (gamma(a) * abs_cos_half_pi(a)).powf(-q) * gamma(0.5 + q) / PI.sqrt()
}

/// c with E|X|^{2/(α-1)} = c (E X²)^{1/(α-1)} for a centred Gaussian X.
pub fn gauss_moment_c(p: AlphaParams) -> f64 {
    let q = 1.0 / (p.alpha() - 1.0);
    2f64.powf(q) * gamma(0.5 + q) / PI.sqrt()
}

/// Optimal localization exponent b = (α - 1) / (3α - 2).
pub fn rate_exponent_b(p: AlphaParams) -> f64 {
    let a = p.alpha();
    (a - 1.0) / (3.0 * a - 2.0)
}

/// ∫_0^∞ (1 - cos z) z^{-α} dz by series on [0, 1] and half-period
/// summation of the oscillatory tail on [1, ∞).
pub fn cosine_integral(p: AlphaParams) -> Result<Estimate> {
    let a = p.alpha();
    // (1 - cos z)/z^α = Σ_{k≥1} (-1)^{k+1} z^{2k-α}/(2k)!
    let mut head = 0.0;
    let mut fact = 1.0;
    for k in 1..30 {
        let n = 2 * k;
        fact *= ((n - 1) * n) as f64;
        let term = 1.0 / (fact * (n as f64 + 1.0 - a));
        head += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    let power_tail = 1.0 / (a - 1.0);
    let cos_tail = integrate_cos_tail(|z| z.powf(-a), 1.0, 1.0, Tolerance::new(1e-13, 1e-12))?;
    Ok(Estimate::new(head + power_tail - cos_tail.value, cos_tail.error))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ap(a: f64) -> AlphaParams {
        AlphaParams::new(a).unwrap()
    }

    #[test]
    fn rejects_out_of_range_alpha() {
        for bad in [1.0, 1.0 + 1e-7, 0.5, 2.000_001, f64::NAN, f64::INFINITY] {
            assert!(AlphaParams::new(bad).is_err(), "{bad}");
        }
        assert!(AlphaParams::new(1.0 + 2e-6).is_ok());
        assert!(AlphaParams::new(2.0).is_ok());
    }

    #[test]
    fn hurst_is_derived() {
        assert_eq!(ap(2.0).hurst(), 0.5);
        assert_eq!(ap(1.5).hurst(), 0.25);
    }

    #[test]
    fn endpoint_values_at_alpha_two() {
        assert!((frak_a(ap(2.0)) - 0.707_106_781_186_547_6).abs() < 1e-15);
        assert!((frak_b(ap(2.0)) - 0.5).abs() < 1e-15);
        assert!((gauss_moment_c(ap(2.0)) - 1.0).abs() < 1e-14);
        assert_eq!(rate_exponent_b(ap(2.0)), 0.25);
    }

    #[test]
    fn golden_values_from_high_precision_evaluation() {
        // 40-digit reference evaluations of the closed forms.
        let table = [
            (1.1, 1.832_940_825_689_245_140, 119_958_359_398_808.647_43, 654_729_075.0),
            (1.25, 1.200_617_391_489_530_745, 453.342_399_756_068_282_44, 105.0),
            (1.5, 0.893_243_841_738_002_331_4, 1.909_859_317_102_744_029, 3.0),
            (1.75, 0.767_369_970_195_534_244_6, 0.660_047_648_977_845_136_9, 1.337_300_958_125_551_182),
        ];
        for (a, fa, fb, c) in table {
            let p = ap(a);
            assert!(((frak_a(p) - fa) / fa).abs() < 1e-12, "A({a})");
            assert!(((frak_b(p) - fb) / fb).abs() < 1e-12, "B({a}) {}", frak_b(p));
            assert!(((gauss_moment_c(p) - c) / c).abs() < 1e-12, "c({a})");
        }
        assert!((rate_exponent_b(ap(1.5)) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn frak_b_identity_through_gaussian_moment() {
        let mut a = 1.05;
        while a <= 2.0 {
            let p = ap(a);
            let via_c = gauss_moment_c(p) * frak_a(p).powi(2).powf(1.0 / (a - 1.0));
            assert!(((frak_b(p) - via_c) / via_c).abs() < 1e-10, "alpha {a}");
            a += 0.05;
        }
    }

    #[test]
    fn frak_a_finite_positive_on_dense_grid() {
        for i in 0..=199 {
            let a = 1.01 + 0.99 * i as f64 / 199.0;
            let v = frak_a(ap(a));
            assert!(v.is_finite() && v > 0.0);
        }
        // blows up towards alpha = 1
        assert!(frak_a(ap(1.000_01)) > 100.0);
    }

    #[test]
    fn cosine_integral_matches_closed_form() {
        for a in [1.1, 1.25, 1.5, 1.75, 2.0] {
            let p = ap(a);
            let q = cosine_integral(p).unwrap();
            let target = PI * frak_a(p).powi(2);
            assert!(((q.value - target) / target).abs() < 1e-8, "alpha {a}: {} vs {target}", q.value);
        }
        let q2 = cosine_integral(ap(2.0)).unwrap().value;
        assert!((q2 - PI / 2.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_moment_monte_carlo() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let p = ap(1.5);
        let exponent = p.variation_exponent();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = z.abs().powf(exponent);
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - gauss_moment_c(p)).abs() < 3.0 * se, "{mean} ± {se}");
    }
}
