//! Noise coefficients σ, test functions φ and initial profiles.

use std::fmt;
use std::sync::Arc;

use serde::{Serialize, Serializer};

use crate::constants::AlphaParams;
use crate::error::{invalid, Error, Result};
use crate::quadrature::{integrate, Tolerance};

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A Lipschitz noise coefficient with its declared Lipschitz constant.
#[derive(Clone)]
pub enum Sigma {
    Constant(f64),
    /// σ(u) = u, the parabolic Anderson model.
    Identity,
    /// σ(u) = a + b·u.
    Affine { a: f64, b: f64 },
    /// σ(u) = 1 + sin(u)/2.
    BoundedSmooth,
    Custom { name: String, f: RealFn, lip: f64 },
}

impl fmt::Debug for Sigma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl Serialize for Sigma {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl Sigma {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Sigma::Constant(c) => *c,
            Sigma::Identity => u,
            Sigma::Affine { a, b } => a + b * u,
            Sigma::BoundedSmooth => 1.0 + 0.5 * u.sin(),
            Sigma::Custom { f, .. } => f(u),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            Sigma::Constant(_) => 0.0,
            Sigma::Identity => 1.0,
            Sigma::Affine { b, .. } => b.abs(),
            Sigma::BoundedSmooth => 0.5,
            Sigma::Custom { lip, .. } => *lip,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Sigma::Constant(_))
    }

    pub fn name(&self) -> String {
        match self {
            Sigma::Constant(c) => format!("constant({c})"),
            Sigma::Identity => "identity".into(),
            Sigma::Affine { a, b } => format!("affine({a},{b})"),
            Sigma::BoundedSmooth => "bounded_smooth".into(),
            Sigma::Custom { name, .. } => name.clone(),
        }
    }

    /// Parse a built-in name: `constant(c)`, `identity`/`pam`, `affine(a,b)`,
    /// `bounded_smooth`.
    pub fn parse(spec: &str) -> Result<Self> {
        let s = spec.trim();
        let args = |prefix: &str| -> Option<Result<Vec<f64>>> {
            let inner = s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
            Some(
                inner
                    .split(',')
                    .map(|a| a.trim().parse::<f64>().map_err(|e| invalid(format!("bad number in '{s}': {e}"))))
                    .collect(),
            )
        };
        match s {
            "identity" | "pam" => return Ok(Sigma::Identity),
            "bounded_smooth" => return Ok(Sigma::BoundedSmooth),
            "one" => return Ok(Sigma::Constant(1.0)),
            _ => {}
        }
        if let Some(v) = args("constant") {
            let v = v?;
            if v.len() == 1 && v[0].is_finite() {
                return Ok(Sigma::Constant(v[0]));
            }
        }
        if let Some(v) = args("affine") {
            let v = v?;
            if v.len() == 2 && v.iter().all(|x| x.is_finite()) {
                return Ok(Sigma::Affine { a: v[0], b: v[1] });
            }
        }
        Err(invalid(format!("unknown sigma '{s}'")))
    }

    /// Check |σ(y) - σ(x)| ≤ Lip·|y - x|·(1 + 1e-9) on a mesh of [-r, r].
    pub fn validate_lipschitz(&self, r: f64, points: usize) -> Result<()> {
        let lip = self.lipschitz();
        if !lip.is_finite() || lip < 0.0 {
            return Err(invalid(format!("declared Lipschitz constant {lip} is invalid")));
        }
        let xs: Vec<f64> = (0..points).map(|i| -r + 2.0 * r * i as f64 / (points - 1) as f64).collect();
        let vals: Vec<f64> = xs.iter().map(|&x| self.eval(x)).collect();
        for stride in [1usize, 7, points / 3] {
            for i in 0..points.saturating_sub(stride) {
                let (x, y) = (xs[i], xs[i + stride]);
                let d = (vals[i + stride] - vals[i]).abs();
                if d > lip * (y - x) * (1.0 + 1e-9) + 1e-15 {
                    return Err(invalid(format!(
                        "{} violates its Lipschitz constant {lip} between {x} and {y}",
                        self.name()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Smallest |σ| on the closed interval between a and b, or an error if σ
    /// has a zero there (closed forms where available, sampling otherwise).
    pub fn min_abs_on(&self, a: f64, b: f64) -> f64 {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        match self {
            Sigma::Constant(c) => c.abs(),
            Sigma::Identity => {
                if lo <= 0.0 && hi >= 0.0 {
                    0.0
                } else {
                    lo.abs().min(hi.abs())
                }
            }
            Sigma::Affine { a: c0, b: c1 } => {
                let (va, vb) = (c0 + c1 * lo, c0 + c1 * hi);
                if va * vb <= 0.0 {
                    0.0
                } else {
                    va.abs().min(vb.abs())
                }
            }
            Sigma::BoundedSmooth => {
                // minimum 1/2 attained at u = -π/2 + 2πk
                let k = ((hi + std::f64::consts::FRAC_PI_2) / (2.0 * std::f64::consts::PI)).floor();
                let trough = -std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * k;
                if trough >= lo {
                    0.5
                } else {
                    self.eval(lo).min(self.eval(hi))
                }
            }
            Sigma::Custom { .. } => {
                let n = 257;
                let mut m = f64::INFINITY;
                let mut prev = self.eval(lo);
                for i in 0..n {
                    let v = self.eval(lo + (hi - lo) * i as f64 / (n - 1) as f64);
                    if v * prev <= 0.0 {
                        return 0.0;
                    }
                    prev = v;
                    m = m.min(v.abs());
                }
                m
            }
        }
    }

    /// ∫_a^b dy / σ(y); the caller guarantees σ has no zero between a and b.
    pub fn inverse_integral(&self, a: f64, b: f64) -> Result<f64> {
        if a == b {
            return Ok(0.0);
        }
        match self {
            Sigma::Constant(c) => Ok((b - a) / c),
            Sigma::Identity => Ok((b / a).ln()),
            Sigma::Affine { a: c0, b: c1 } if *c1 != 0.0 => Ok(((c0 + c1 * b) / (c0 + c1 * a)).ln() / c1),
            Sigma::Affine { a: c0, .. } => Ok((b - a) / c0),
            _ => {
                let f = |y: f64| 1.0 / self.eval(y);
                let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
                Ok(sign * integrate(f, lo, hi, Tolerance::new(1e-14, 1e-12))?.value)
            }
        }
    }
}

/// Build a user-registered σ.
pub fn custom_sigma(
    name: &str,
    f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    lip: f64,
) -> Sigma {
    Sigma::Custom {
        name: name.to_string(),
        f: Arc::new(f),
        lip,
    }
}

/// Weight function of variation sums.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Phi {
    Zero,
    One,
    Identity,
    Cos,
}

impl Phi {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Phi::Zero => 0.0,
            Phi::One => 1.0,
            Phi::Identity => u,
            Phi::Cos => u.cos(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "zero" | "0" => Ok(Phi::Zero),
            "one" | "1" => Ok(Phi::One),
            "identity" => Ok(Phi::Identity),
            "cos" => Ok(Phi::Cos),
            other => Err(invalid(format!("unknown phi '{other}'"))),
        }
    }
}

/// Bounded Lipschitz initial profile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Profile {
    Constant(f64),
    /// base + height·exp(-x²/width²).
    Bump { base: f64, height: f64, width: f64 },
    /// mean + amplitude·cos(k x).
    Cosine { mean: f64, amplitude: f64, k: f64 },
}

impl Profile {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Profile::Constant(c) => c,
            Profile::Bump { base, height, width } => base + height * (-(x / width).powi(2)).exp(),
            Profile::Cosine { mean, amplitude, k } => mean + amplitude * (k * x).cos(),
        }
    }

    pub fn sup_abs(&self) -> f64 {
        match *self {
            Profile::Constant(c) => c.abs(),
            Profile::Bump { base, height, .. } => base.abs().max((base + height).abs()),
            Profile::Cosine { mean, amplitude, .. } => mean.abs() + amplitude.abs(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(c) = s.parse::<f64>() {
            return Ok(Profile::Constant(c));
        }
        let nums = |prefix: &str| -> Option<Vec<f64>> {
            let inner = s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
            inner.split(',').map(|a| a.trim().parse().ok()).collect()
        };
        if let Some(v) = nums("constant") {
            if v.len() == 1 {
                return Ok(Profile::Constant(v[0]));
            }
        }
        if let Some(v) = nums("bump") {
            if v.len() == 3 && v[2] > 0.0 {
                return Ok(Profile::Bump {
                    base: v[0],
                    height: v[1],
                    width: v[2],
                });
            }
        }
        if let Some(v) = nums("cosine") {
            if v.len() == 3 {
                return Ok(Profile::Cosine {
                    mean: v[0],
                    amplitude: v[1],
                    k: v[2],
                });
            }
        }
        Err(invalid(format!("unknown initial profile '{s}'")))
    }
}

/// Everything that defines the equation apart from the noise.
#[derive(Clone, Debug, Serialize)]
pub struct ModelSpec {
    pub params: AlphaParams,
    pub sigma: Sigma,
    pub u0: Profile,
    pub horizon: f64,
}

impl ModelSpec {
    pub fn new(params: AlphaParams, sigma: Sigma, u0: Profile, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if !u0.sup_abs().is_finite() {
            return Err(invalid("initial profile must be bounded"));
        }
        sigma.validate_lipschitz(50.0, 4001)?;
        Ok(Self {
            params,
            sigma,
            u0,
            horizon,
        })
    }

    /// σ evaluated on a field, failing on non-finite values.
    pub fn sigma_field(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, &v) in out.iter_mut().zip(u) {
            *o = self.sigma.eval(v);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("sigma produced a non-finite value".into()));
        }
        Ok(())
    }
}
