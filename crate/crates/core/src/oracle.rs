//! Deterministic quadrature of the exact second moments of the linear field.
//!
//! These are the reference values against which the samplers and estimators
//! are checked. Every function returns a [`MomentReport`] carrying the value
//! and its quadrature error; a report is only produced when the achieved
//! error meets the requested tolerance.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::constants::{frak_a, gauss_moment_c, AlphaParams};
use crate::error::{invalid, Error, Result};
use crate::kernels::unit_density_fast;
use crate::quadrature::{
    integrate_cos_tail, integrate_panels, integrate_to_infinity, Estimate, Tolerance,
};
use crate::special::gamma;

/// Relative accuracy every oracle value must reach.
pub const ORACLE_REL_TOL: f64 = 1e-9;

/// Panels beyond this count indicate a parameter regime the oracle does not serve.
const MAX_PANELS: usize = 200_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulaId {
    QIncrement,
    QFirstTerm,
    QSecondTerm,
    SIncrement,
    SDerivativeN,
    BIncrement,
    LinearMoment,
    LocalizationTail,
}

impl FormulaId {
    pub const ALL: [FormulaId; 8] = [
        FormulaId::QIncrement,
        FormulaId::QFirstTerm,
        FormulaId::QSecondTerm,
        FormulaId::SIncrement,
        FormulaId::SDerivativeN,
        FormulaId::BIncrement,
        FormulaId::LinearMoment,
        FormulaId::LocalizationTail,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FormulaId::QIncrement => "q_increment",
            FormulaId::QFirstTerm => "q_first_term",
            FormulaId::QSecondTerm => "q_second_term",
            FormulaId::SIncrement => "s_increment",
            FormulaId::SDerivativeN => "s_derivative_n",
            FormulaId::BIncrement => "b_increment",
            FormulaId::LinearMoment => "linear_moment",
            FormulaId::LocalizationTail => "localization_tail",
        }
    }
}

impl fmt::Display for FormulaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FormulaId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FormulaId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| invalid(format!("unknown formula id '{s}'")))
    }
}

/// A second moment with its quadrature error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub value: f64,
    pub quad_error: f64,
    pub formula_id: FormulaId,
}

impl MomentReport {
    fn checked(est: Estimate, id: FormulaId, scale: f64) -> Result<Self> {
        let requested = ORACLE_REL_TOL * est.value.abs().max(scale);
        if !(est.error <= requested) || !est.value.is_finite() {
            return Err(Error::Quadrature {
                value: est.value,
                achieved: est.error,
                requested,
            });
        }
        Ok(Self {
            // tiny negative round-off on a nonnegative quantity
            value: est.value.max(0.0),
            quad_error: est.error,
            formula_id: id,
        })
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(invalid(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

fn tight(scale: f64) -> Tolerance {
    let mut tol = Tolerance::new(1e-13 * scale, 1e-12);
    tol.max_intervals = MAX_PANELS + 1000;
    tol
}

/// Breakpoints for (1 - cos εχ)-type integrands on [0, upper]: geometric
/// below 1/ε, half periods above.
fn cos_breaks(upper: f64, eps: f64) -> Result<Vec<f64>> {
    let knee = (1.0 / eps).min(upper);
    let mut breaks = vec![0.0];
    let mut b = knee * 1e-4;
    while b < knee {
        breaks.push(b);
        b *= 8.0;
    }
    breaks.push(knee);
    let step = PI / eps;
    let count = ((upper - knee) / step).ceil();
    if count > MAX_PANELS as f64 {
        return Err(invalid(format!(
            "oscillatory range too long ({count} half periods); parameters outside oracle range"
        )));
    }
    let mut x = knee;
    loop {
        x += step;
        if x >= upper {
            break;
        }
        breaks.push(x);
    }
    if upper > knee {
        breaks.push(upper);
    }
    Ok(breaks)
}

/// (1 - cos εχ) computed without cancellation.
#[inline]
fn one_minus_cos(eps: f64, chi: f64) -> f64 {
    let s = (0.5 * eps * chi).sin();
    2.0 * s * s
}

/// Point where exp(-2tχ^α) drops below e^{-42}.
fn damping_cutoff(alpha: f64, t: f64) -> f64 {
    (21.0 / t).powf(1.0 / alpha)
}

/// π^{-1} ∫_0^∞ (1 - cos εχ) χ^{-α} dχ = 𝔄² ε^{α-1}, by quadrature.
pub fn q_first_term(p: AlphaParams, eps: f64) -> Result<MomentReport> {
    check_positive("eps", eps)?;
    let c = crate::constants::cosine_integral(p)?;
    MomentReport::checked(
        c.scale(eps.powf(p.alpha() - 1.0) / PI),
        FormulaId::QFirstTerm,
        eps.powf(p.alpha() - 1.0),
    )
}

fn s_increment_estimate(p: AlphaParams, t: f64, eps: f64) -> Result<Estimate> {
    let a = p.alpha();
    let upper = damping_cutoff(a, t);
    let breaks = cos_breaks(upper, eps)?;
    let f = |c: f64| {
        if c == 0.0 {
            0.0
        } else {
            (-2.0 * t * c.powf(a)).exp() * one_minus_cos(eps, c) * c.powf(-a)
        }
    };
    Ok(integrate_panels(&f, &breaks, tight(eps.powf(a - 1.0)))?.scale(1.0 / PI))
}

/// E|S(x) - S(x-ε)|² = π^{-1} ∫_0^∞ e^{-2tχ^α} (1 - cos εχ) χ^{-α} dχ.
pub fn s_increment_variance(p: AlphaParams, t: f64, eps: f64) -> Result<MomentReport> {
    check_positive("t", t)?;
    if eps == 0.0 {
        return Ok(MomentReport {
            value: 0.0,
            quad_error: 0.0,
            formula_id: FormulaId::SIncrement,
        });
    }
    check_positive("eps", eps)?;
    let est = s_increment_estimate(p, t, eps)?;
    MomentReport::checked(est, FormulaId::SIncrement, eps.powf(p.alpha() - 1.0))
}

/// The second term of the increment-variance decomposition; equal in value
/// to the smooth-part increment variance.
pub fn q_second_term(p: AlphaParams, t: f64, eps: f64) -> Result<MomentReport> {
    let mut r = s_increment_variance(p, t, eps)?;
    r.formula_id = FormulaId::QSecondTerm;
    Ok(r)
}

/// E|Z_t(x) - Z_t(x-ε)|² = π^{-1} ∫_0^∞ (1 - e^{-2tχ^α}) (1 - cos εχ) χ^{-α} dχ,
/// integrated directly (not through the decomposition).
pub fn q_increment_variance(p: AlphaParams, t: f64, eps: f64) -> Result<MomentReport> {
    check_positive("t", t)?;
    check_positive("eps", eps)?;
    let a = p.alpha();
    let scale = eps.powf(a - 1.0);
    let cut = damping_cutoff(a, t).max(1.0 / eps);
    let breaks = cos_breaks(cut, eps)?;
    let f = |c: f64| {
        if c == 0.0 {
            0.0
        } else {
            -(-2.0 * t * c.powf(a)).exp_m1() * one_minus_cos(eps, c) * c.powf(-a)
        }
    };
    let head = integrate_panels(&f, &breaks, tight(scale))?;
    // beyond the cut the damping factor is 1 to within e^{-42}
    let power = cut.powf(1.0 - a) / (a - 1.0);
    let cos_tail = integrate_cos_tail(|z| z.powf(-a), eps, cut, tight(scale))?;
    let est = Estimate::new(
        head.value + power - cos_tail.value,
        head.error + cos_tail.error + (-42f64).exp() * power,
    );
    MomentReport::checked(est.scale(1.0 / PI), FormulaId::QIncrement, scale)
}

/// E|B(x) - B(x-ε)|² for B = Z - S; the two pieces are driven by disjoint
/// noise so the variances add up to 𝔄² ε^{α-1}.
pub fn b_increment_variance(p: AlphaParams, t: f64, eps: f64) -> Result<MomentReport> {
    let q = q_increment_variance(p, t, eps)?;
    let s = s_increment_variance(p, t, eps)?;
    let est = Estimate::new(q.value + s.value, q.quad_error + s.quad_error);
    MomentReport::checked(est, FormulaId::BIncrement, eps.powf(p.alpha() - 1.0))
}

/// E|Z_t(x) - Z_t(x-ε)|^{2/(α-1)} = c · Q^{1/(α-1)} by the Gaussian moment identity.
pub fn linear_moment(p: AlphaParams, t: f64, eps: f64) -> Result<MomentReport> {
    let q = q_increment_variance(p, t, eps)?;
    let e = 1.0 / (p.alpha() - 1.0);
    let c = gauss_moment_c(p);
    let value = c * q.value.powf(e);
    let err = c * e * q.value.powf(e - 1.0) * q.quad_error;
    MomentReport::checked(Estimate::new(value, err), FormulaId::LinearMoment, value)
}

/// Closed form of (2π)^{-1} ∫_0^∞ e^{-2tχ^α} χ^{2n-α} dχ.
pub fn s_derivative_closed_form(p: AlphaParams, t: f64, n: u32) -> f64 {
    let a = p.alpha();
    let k = (2.0 * n as f64 - a + 1.0) / a;
    (2.0 * t).powf(-k) * gamma(k) / (2.0 * PI * a)
}

/// E|S^{(n)}(x)|² for n ≥ 1, by closed form cross-checked against quadrature.
pub fn s_derivative_variance(p: AlphaParams, t: f64, n: u32) -> Result<MomentReport> {
    check_positive("t", t)?;
    if n == 0 {
        return Err(invalid("derivative order must be at least 1"));
    }
    let a = p.alpha();
    let closed = s_derivative_closed_form(p, t, n);
    let power = 2.0 * n as f64 - a;
    let f = |c: f64| (-2.0 * t * c.powf(a)).exp() * c.powf(power);
    // the peak of the integrand sits at χ^α = (2n - α)/(2tα)
    let peak = (power / (2.0 * t * a)).powf(1.0 / a);
    let head = integrate_panels(
        &f,
        &[0.0, 0.5 * peak, peak, 2.0 * peak],
        Tolerance::new(0.0, 1e-13),
    )?;
    let tail = integrate_to_infinity(f, 2.0 * peak, Tolerance::new(0.0, 1e-13))?;
    let quad = (head + tail).scale(1.0 / (2.0 * PI));
    let mismatch = (quad.value - closed).abs();
    if mismatch > 1e-10 * closed {
        return Err(Error::Quadrature {
            value: quad.value,
            achieved: mismatch,
            requested: 1e-10 * closed,
        });
    }
    MomentReport::checked(
        Estimate::new(closed, mismatch.max(quad.error)),
        FormulaId::SDerivativeN,
        closed,
    )
}

/// Covariance of fractional Brownian motion pinned at the origin.
pub fn fbm_covariance(h: f64, x: f64, y: f64) -> f64 {
    let e = 2.0 * h;
    0.5 * (x.abs().powf(e) + y.abs().powf(e) - (x - y).abs().powf(e))
}

/// Half-width factor γ = 1 + β^{3/2} of the localization box.
pub fn box_gamma(beta: f64) -> f64 {
    1.0 + beta.powf(1.5)
}

/// Upper bound ε^{α-1} (2β)^{-(3-α)/α} Γ((3-α)/α) / (πα) on the time-tail part.
pub fn q1_bound(p: AlphaParams, eps: f64, beta: f64) -> f64 {
    let a = p.alpha();
    let k = (3.0 - a) / a;
    eps.powf(a - 1.0) * (2.0 * beta).powf(-k) * gamma(k) / (PI * a)
}

/// Both parts of the localization residual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationParts {
    /// Noise before the box, all of space.
    pub q1: Estimate,
    /// Noise inside the box's time window but outside its spatial extent.
    pub q2: Estimate,
}

/// ∫_0^β dr ∫_{|w|>γ} |q_r(w) - q_r(w-1)|² dw with q_r(w) = r^{-1/α} p_1(w r^{-1/α}),
/// i.e. the spatial part of the residual in units of ε^{α-1}.
pub fn localization_q2_scaled(p: AlphaParams, beta: f64) -> Result<Estimate> {
    use std::collections::HashMap;
    use std::sync::{Mutex, OnceLock};
    static MEMO: OnceLock<Mutex<HashMap<(u64, u64), Estimate>>> = OnceLock::new();
    let memo = MEMO.get_or_init(Default::default);
    let key = (p.alpha().to_bits(), beta.to_bits());
    if let Some(hit) = memo.lock().expect("memo poisoned").get(&key) {
        return Ok(*hit);
    }
    let est = q2_scaled_uncached(p, beta)?;
    memo.lock().expect("memo poisoned").insert(key, est);
    Ok(est)
}

fn q2_scaled_uncached(p: AlphaParams, beta: f64) -> Result<Estimate> {
    let a = p.alpha();
    let g = box_gamma(beta);
    let inner = |r: f64| -> Result<Estimate> {
        if r <= 0.0 {
            return Ok(Estimate::new(0.0, 0.0));
        }
        let sc = r.powf(-1.0 / a);
        let q = |w: f64| sc * unit_density_fast(p, w * sc).unwrap_or(f64::NAN);
        let f = |w: f64| {
            let c = q(w);
            let lo = c - q(w - 1.0);
            let hi = c - q(w + 1.0);
            lo * lo + hi * hi
        };
        let near = integrate_panels(&f, &[g, g + 0.5, g + 2.0, g + 8.0], Tolerance::new(1e-300, 1e-11))?;
        let far = integrate_to_infinity(f, g + 8.0, Tolerance::new(1e-300, 1e-11))?;
        Ok(near + far)
    };
    let failure = std::cell::RefCell::new(None);
    let outer = |r: f64| match inner(r) {
        Ok(e) => e.value,
        Err(e) => {
            failure.borrow_mut().get_or_insert(e);
            f64::NAN
        }
    };
    let mut breaks = vec![0.0];
    let mut b = beta * 4f64.powi(-6);
    while b < beta {
        breaks.push(b);
        b *= 4.0;
    }
    breaks.push(beta);
    let est = integrate_panels(&outer, &breaks, Tolerance::new(1e-300, 1e-10));
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let est = est?;
    if !est.value.is_finite() {
        return Err(Error::Quadrature {
            value: est.value,
            achieved: f64::INFINITY,
            requested: 0.0,
        });
    }
    Ok(est)
}

/// Bound on the residual in units of ε^{α-1}, obtained by following the
/// triangle-inequality chain: the time tail through χ² ≥ 2(1 - cos χ), the
/// spatial tail through sup p_r = p_r(0) and the stable tail mass.
pub fn localization_bound_scaled(p: AlphaParams, beta: f64) -> Result<f64> {
    let a = p.alpha();
    let q1 = q1_bound(p, 1.0, beta);
    let lam = beta.powf(1.5);
    let origin = crate::kernels::density_at_origin(p, 1.0);
    let failure = std::cell::RefCell::new(None);
    let f = |r: f64| {
        if r <= 0.0 {
            return 0.0;
        }
        match crate::kernels::stable_tail_mass(p, lam * r.powf(-1.0 / a)) {
            Ok(m) => 4.0 * origin * r.powf(-1.0 / a) * m,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        }
    };
    let est = integrate_panels(&f, &[0.0, 0.25 * beta, beta], Tolerance::new(1e-300, 1e-9));
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(q1 + est?.value)
}

/// The two parts of the localization residual at (t, ε, β).
pub fn localization_parts(
    p: AlphaParams,
    t: f64,
    eps: f64,
    beta: f64,
) -> Result<LocalizationParts> {
    check_positive("t", t)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(invalid(format!("eps must lie in (0, 1), got {eps}")));
    }
    if !(beta > 1.0) || !beta.is_finite() {
        return Err(invalid(format!("beta must exceed 1, got {beta}")));
    }
    let a = p.alpha();
    let depth = beta * eps.powf(a);
    if depth >= t {
        return Err(Error::BoxDoesNotFit(format!(
            "box depth beta*eps^alpha = {depth:e} is not below t = {t}"
        )));
    }
    let q1 = s_increment_estimate(p, depth, eps)? - s_increment_estimate(p, t, eps)?;
    let q2 = localization_q2_scaled(p, beta)?.scale(eps.powf(a - 1.0));
    Ok(LocalizationParts { q1, q2 })
}

/// Mean-square error of replacing the gradient of Z by its box-localized
/// stochastic integral.
pub fn localization_tail(p: AlphaParams, t: f64, eps: f64, beta: f64) -> Result<MomentReport> {
    let parts = localization_parts(p, t, eps, beta)?;
    MomentReport::checked(
        parts.q1 + parts.q2,
        FormulaId::LocalizationTail,
        eps.powf(p.alpha() - 1.0) * 1e-3,
    )
}

/// Dispatch by formula id; `beta` and `n` are only used where relevant.
pub fn evaluate(
    id: FormulaId,
    p: AlphaParams,
    t: f64,
    eps: f64,
    beta: Option<f64>,
    n: Option<u32>,
) -> Result<MomentReport> {
    match id {
        FormulaId::QIncrement => q_increment_variance(p, t, eps),
        FormulaId::QFirstTerm => q_first_term(p, eps),
        FormulaId::QSecondTerm => q_second_term(p, t, eps),
        FormulaId::SIncrement => s_increment_variance(p, t, eps),
        FormulaId::SDerivativeN => s_derivative_variance(p, t, n.unwrap_or(1)),
        FormulaId::BIncrement => b_increment_variance(p, t, eps),
        FormulaId::LinearMoment => linear_moment(p, t, eps),
        FormulaId::LocalizationTail => localization_tail(
            p,
            t,
            eps,
            beta.ok_or_else(|| invalid("localization_tail needs beta"))?,
        ),
    }
}

/// 𝔄² ε^{α-1}: the stationary limit of the increment variance.
pub fn stationary_increment_variance(p: AlphaParams, eps: f64) -> f64 {
    frak_a(p).powi(2) * eps.powf(p.alpha() - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::frak_b;
    use crate::kernels::eval_increment_kernel;

    fn ap(a: f64) -> AlphaParams {
        AlphaParams::new(a).unwrap()
    }

    #[test]
    fn first_term_is_stationary_variance() {
        for a in [1.2, 1.5, 2.0] {
            for eps in [1e-3, 0.125, 1.0] {
                let r = q_first_term(ap(a), eps).unwrap();
                let exact = stationary_increment_variance(ap(a), eps);
                assert!(((r.value - exact) / exact).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decomposition_identity_across_grid() {
        for a in [1.2, 1.5, 1.75, 2.0] {
            let p = ap(a);
            for t in [0.05, 1.0, 10.0] {
                for k in [0, 3, 6, 12] {
                    let eps = 2f64.powi(-k);
                    let q = q_increment_variance(p, t, eps).unwrap();
                    let s = s_increment_variance(p, t, eps).unwrap();
                    let lhs = q.value;
                    let rhs = stationary_increment_variance(p, eps) - s.value;
                    let scale = eps.powf(a - 1.0);
                    assert!(
                        (lhs - rhs).abs() <= 1e-9 * scale,
                        "alpha {a} t {t} eps {eps}: {lhs} vs {rhs}"
                    );
                    assert!(q.value >= 0.0 && s.value >= 0.0);
                }
            }
        }
    }

    #[test]
    fn second_term_is_order_eps_squared() {
        for a in [1.3, 1.5, 2.0] {
            let p = ap(a);
            let t = 1.0;
            // explicit bound: π^{-1} ∫ e^{-2tχ^α} χ^{2-α} dχ / 2 · 2 = 2 s_derivative(n=1)
            let bound = 2.0 * s_derivative_closed_form(p, t, 1);
            for k in 3..=12 {
                let eps = 2f64.powi(-k);
                let q = q_increment_variance(p, t, eps).unwrap().value;
                let ratio = (stationary_increment_variance(p, eps) - q) / (eps * eps);
                assert!(ratio > 0.0 && ratio <= bound * (1.0 + 1e-6), "alpha {a} k {k}: {ratio} {bound}");
            }
        }
    }

    #[test]
    fn increases_to_stationary_limit_in_t() {
        let p = ap(1.5);
        let eps = 0.1;
        let mut prev = 0.0;
        for t in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let q = q_increment_variance(p, t, eps).unwrap().value;
            assert!(q > prev);
            assert!(q < stationary_increment_variance(p, eps));
            prev = q;
        }
        let lim = stationary_increment_variance(p, eps);
        assert!((lim - prev) / lim < 1e-3);
    }

    #[test]
    fn linear_moment_leading_term() {
        let p = ap(2.0);
        let q = q_increment_variance(p, 1.0, 0.1).unwrap().value;
        let m = linear_moment(p, 1.0, 0.1).unwrap().value;
        assert!((q - m).abs() < 1e-15);
        for a in [1.5, 1.75, 2.0] {
            let p = ap(a);
            let r = linear_moment(p, 1.0, 1e-4).unwrap().value / 1e-4;
            assert!(((r - frak_b(p)) / frak_b(p)).abs() < 1e-3, "alpha {a}: {r}");
        }
    }

    #[test]
    fn linear_moment_remainder_exponent() {
        // c·Q^{1/(α-1)} with Q = 𝔄²ε^{α-1} - O(ε²) leaves a remainder of order ε^{4-α}
        for a in [1.25, 1.5, 1.75, 2.0] {
            let p = ap(a);
            let rem = |k: i32| {
                let eps = 2f64.powi(-k);
                (frak_b(p) * eps - linear_moment(p, 1.0, eps).unwrap().value, eps)
            };
            let mut scaled = Vec::new();
            for k in 4..=10 {
                let (r, eps) = rem(k);
                assert!(r > 0.0);
                scaled.push(r / eps.powf(4.0 - a));
            }
            let (r4, _) = rem(6);
            let (r10, _) = rem(10);
            let observed = (r4 / r10).log2() / 4.0;
            assert!((observed - (4.0 - a)).abs() < 0.02, "alpha {a}: exponent {observed}");
            let (lo, hi) = scaled.iter().fold((f64::INFINITY, 0f64), |(l, h), &v| (l.min(v), h.max(v)));
            assert!(hi / lo < 1.1, "alpha {a}: {lo} .. {hi}");
        }
    }

    #[test]
    fn s_derivative_examples() {
        let r = s_derivative_variance(ap(2.0), 1.0, 1).unwrap();
        let expected = (PI / 2.0).sqrt() / (4.0 * PI);
        assert!((r.value - expected).abs() < 1e-15);
        for a in [1.2, 1.5, 2.0] {
            for n in 1..=4 {
                let v1 = s_derivative_variance(ap(a), 1.0, n).unwrap().value;
                let v2 = s_derivative_variance(ap(a), 2.0, n).unwrap().value;
                let k = (2.0 * n as f64 - a + 1.0) / a;
                assert!((v2 / v1 - 2f64.powf(-k)).abs() < 1e-12);
            }
        }
        assert!(s_derivative_variance(ap(1.5), 1.0, 0).is_err());
    }

    #[test]
    fn s_increment_smoothness_and_zero() {
        let p = ap(1.5);
        assert_eq!(s_increment_variance(p, 1.0, 0.0).unwrap().value, 0.0);
        let bound = 2.0 * s_derivative_closed_form(p, 1.0, 1);
        for k in 1..=12 {
            let eps = 2f64.powi(-k);
            let v = s_increment_variance(p, 1.0, eps).unwrap().value / (eps * eps);
            assert!(v <= bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn b_increment_is_stationary() {
        for a in [1.5, 2.0] {
            let p = ap(a);
            let b = b_increment_variance(p, 0.7, 0.05).unwrap().value;
            let exact = stationary_increment_variance(p, 0.05);
            assert!(((b - exact) / exact).abs() < 1e-9);
        }
    }

    #[test]
    fn fbm_covariance_examples() {
        assert_eq!(fbm_covariance(0.5, 2.0, 2.0), 2.0);
        assert_eq!(fbm_covariance(0.3, 0.0, 1.7), 0.0);
        let h = 0.25;
        let (x, y) = (0.3, 1.9);
        let inc = fbm_covariance(h, x, x) + fbm_covariance(h, y, y) - 2.0 * fbm_covariance(h, x, y);
        assert!((inc - (x - y).abs().powf(2.0 * h)).abs() < 1e-15);
    }

    #[test]
    fn time_derivative_matches_kernel_l2_norm() {
        // d/dt Q(t, ε) = ∫ |∇_ε p_t(y)|² dy
        let p = ap(1.5);
        let (t, eps, h) = (0.5, 0.3, 1e-3);
        let dq = (q_increment_variance(p, t + h, eps).unwrap().value
            - q_increment_variance(p, t - h, eps).unwrap().value)
            / (2.0 * h);
        let dy = 0.01;
        let r = 40.0;
        let n = (r / dy) as i64;
        let xs: Vec<f64> = (-n..=n).map(|i| i as f64 * dy).collect();
        let table = eval_increment_kernel(p, t, eps, &xs).unwrap();
        let l2: f64 = table.values.iter().map(|v| v * v * dy).sum();
        assert!(((l2 - dq) / dq).abs() < 1e-5, "{l2} vs {dq}");
    }

    #[test]
    fn localization_q1_below_closed_bound() {
        for a in [1.5, 2.0] {
            let p = ap(a);
            for beta in [2.0, 4.0, 16.0] {
                let eps = 2f64.powi(-4);
                let parts = localization_parts(p, 1.0, eps, beta).unwrap();
                assert!(parts.q1.value > 0.0);
                assert!(parts.q1.value <= q1_bound(p, eps, beta));
                assert!(parts.q2.value >= 0.0);
            }
        }
    }

    #[test]
    fn localization_tail_below_proof_bound() {
        for a in [1.5, 2.0] {
            let p = ap(a);
            let mut prev = f64::INFINITY;
            for beta in [2.0, 4.0, 8.0, 16.0] {
                let scaled_bound = localization_bound_scaled(p, beta).unwrap() * beta.sqrt();
                // the constant in front of ε^{α-1}β^{-1/2} is uniformly bounded in β
                assert!(scaled_bound <= localization_bound_scaled(p, 1.0 + 1e-9).unwrap() * 1.5);
                for k in [4, 6, 8] {
                    let e = 2f64.powi(-k);
                    let v = localization_tail(p, 1.0, e, beta).unwrap().value;
                    let bound = scaled_bound * e.powf(a - 1.0) / beta.sqrt();
                    assert!(v <= bound, "alpha {a} beta {beta} k {k}: {v} > {bound}");
                }
                let v = localization_tail(p, 1.0, 2f64.powi(-4), beta).unwrap().value;
                assert!(v < prev);
                prev = v;
            }
        }
    }

    #[test]
    fn localization_rejects_oversized_box() {
        let p = ap(2.0);
        assert!(matches!(
            localization_tail(p, 0.01, 0.5, 4.0),
            Err(Error::BoxDoesNotFit(_))
        ));
        assert!(localization_tail(p, 1.0, 1.5, 4.0).is_err());
        assert!(localization_tail(p, 1.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn formula_ids_round_trip() {
        for id in FormulaId::ALL {
            assert_eq!(id.name().parse::<FormulaId>().unwrap(), id);
        }
        assert!("nope".parse::<FormulaId>().is_err());
    }
}
