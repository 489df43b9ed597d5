//! Finite-ε, finite-replica estimators for the gradient limit theorems.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::constants::{frak_a, frak_b, AlphaParams};
use crate::error::{invalid, Error, Result};
use crate::fields::{coupled_f, FieldSample, LinearSampler, SPlan};
use crate::grid::GridSpec;
use crate::model::{ModelSpec, Phi, Sigma};
use crate::noise::NoiseLattice;
use crate::oracle::box_gamma;
use crate::solver::{log_log_slope, Solver};
use crate::special::{normal_cdf, CompensatedSum};
use crate::spectral::real_space_kernel;

/// Denominators below this are flagged instead of divided by.
pub const DEGENERATE: f64 = 1e-14;

/// Smallest admissible lag in cells.
pub const MIN_LAG: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub value: f64,
    pub stderr: f64,
    pub replicas: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Criterion {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub rule: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Curve {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Curve {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config: BTreeMap<String, String>,
    pub statistics: BTreeMap<String, Stat>,
    pub criteria: Vec<Criterion>,
    pub curves: BTreeMap<String, Curve>,
    pub failed_replicas: Vec<(usize, String)>,
    pub runtime_seconds: f64,
}

impl ExperimentReport {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            ..Default::default()
        }
    }

    pub fn stat(&mut self, key: &str, s: Stat) {
        self.statistics.insert(key.to_string(), s);
    }

    /// Record `value ≤ threshold`.
    pub fn at_most(&mut self, name: &str, value: f64, threshold: f64) -> bool {
        let passed = value <= threshold;
        self.criteria.push(Criterion {
            name: name.to_string(),
            value,
            threshold,
            rule: "<=".into(),
            passed,
        });
        passed
    }

    /// Record `value ≥ threshold`.
    pub fn at_least(&mut self, name: &str, value: f64, threshold: f64) -> bool {
        let passed = value >= threshold;
        self.criteria.push(Criterion {
            name: name.to_string(),
            value,
            threshold,
            rule: ">=".into(),
            passed,
        });
        passed
    }

    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }
}

/// Mean and standard error with compensated sums.
pub fn mean_stderr(values: &[f64]) -> Stat {
    let n = values.len();
    let mut s = CompensatedSum::new();
    for &v in values {
        s.add(v);
    }
    let mean = s.value() / n as f64;
    let mut d = CompensatedSum::new();
    for &v in values {
        d.add((v - mean).powi(2));
    }
    let var = if n > 1 { d.value() / (n - 1) as f64 } else { f64::INFINITY };
    Stat {
        value: mean,
        stderr: (var / n as f64).sqrt(),
        replicas: n,
    }
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Forward increment f(x_{k+lag}) - f(x_k), periodic.
#[inline]
pub fn grad(f: &FieldSample, k: usize, lag: usize) -> f64 {
    let n = f.values.len();
    f.values[(k + lag) % n] - f.values[k]
}

/// Slope of log(mean of per-replica values) against log x with a 20-block
/// jackknife standard error; `power` is applied to the mean before the log.
pub fn jackknife_slope(x: &[f64], per_replica: &[Vec<f64>], power: f64) -> Stat {
    let n = per_replica.len();
    let curve = |skip: Option<std::ops::Range<usize>>| -> Vec<f64> {
        (0..x.len())
            .map(|j| {
                let mut s = CompensatedSum::new();
                let mut c = 0usize;
                for (i, r) in per_replica.iter().enumerate() {
                    if skip.as_ref().is_some_and(|sk| sk.contains(&i)) {
                        continue;
                    }
                    s.add(r[j]);
                    c += 1;
                }
                (s.value() / c as f64).powf(power)
            })
            .collect()
    };
    let slope = log_log_slope(x, &curve(None));
    let blocks = 20.min(n);
    let size = n.div_ceil(blocks);
    let jack: Vec<f64> = (0..blocks)
        .map(|b| log_log_slope(x, &curve(Some(b * size..((b + 1) * size).min(n)))))
        .collect();
    let jm = jack.iter().sum::<f64>() / blocks as f64;
    let se = ((blocks - 1) as f64 / blocks as f64 * jack.iter().map(|v| (v - jm).powi(2)).sum::<f64>()).sqrt();
    Stat {
        value: slope,
        stderr: se,
        replicas: n,
    }
}

/// u, Z, S and F at one time, all driven by one noise lattice.
#[derive(Clone, Debug, Serialize)]
pub struct CoupledSample {
    pub seed: u64,
    pub u: FieldSample,
    pub z: FieldSample,
    pub s: FieldSample,
    pub f: FieldSample,
}

/// Solver, linear sampler and S plan for repeated coupled replicas.
#[derive(Clone)]
pub struct CoupledPipeline {
    solver: Solver,
    linear: LinearSampler,
    plan: SPlan,
    t: f64,
    t_ext: f64,
}

impl CoupledPipeline {
    /// `grid.t_max` is the observation time t; `eps_min` is the finest lag at
    /// which the S truncation is checked.
    pub fn new(model: ModelSpec, grid: GridSpec, t_ext: f64, eps_min: f64) -> Result<Self> {
        let t = grid.t_max;
        let solver = Solver::new(model.clone(), grid)?;
        let linear = LinearSampler::new(model.params, grid)?;
        let template = NoiseLattice::new(grid, 0)?.extend_to(t_ext)?;
        let plan = linear.s_plan(&template, t, t_ext, eps_min)?;
        Ok(Self {
            solver,
            linear,
            plan,
            t,
            t_ext,
        })
    }

    pub fn solver(&self) -> &Solver {
        &self.solver
    }

    pub fn params(&self) -> AlphaParams {
        self.solver.model().params
    }

    pub fn sigma(&self) -> &Sigma {
        &self.solver.model().sigma
    }

    pub fn grid(&self) -> &GridSpec {
        self.solver.grid()
    }

    pub fn plan(&self) -> &SPlan {
        &self.plan
    }

    pub fn replica(&self, seed: u64) -> Result<CoupledSample> {
        let noise = NoiseLattice::new(*self.grid(), seed)?.extend_to(self.t_ext)?;
        let u = self.solver.solve(&noise, &[self.t])?.snapshots.pop().expect("one snapshot");
        let z = self.linear.sample_z(&noise, self.t)?;
        let s = self.linear.sample_s(&self.plan, &noise)?;
        let f = coupled_f(&z, &s, self.params())?;
        Ok(CoupledSample { seed, u, z, s, f })
    }
}

fn check_lags(lags: &[usize], n: usize) -> Result<()> {
    if lags.is_empty() {
        return Err(invalid("at least one lag is required"));
    }
    if let Some(&l) = lags.iter().find(|&&l| l < MIN_LAG || l >= n / 2) {
        return Err(invalid(format!("lag {l} cells is outside [{MIN_LAG}, n/2)")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExceedancePoint {
    pub lag: usize,
    pub eps: f64,
    /// Largest exceedance over the probed locations.
    pub exceedance: f64,
    pub stderr: f64,
    /// Exceedance per probed location.
    pub per_location: Vec<f64>,
    /// Replica-location pairs with |∇F| below [`DEGENERATE`].
    pub flagged: usize,
    pub samples: usize,
}

/// P{|∇_ε u/∇_ε F - 𝔄σ(u_t(x))| > λ} per lag, sup over the locations `xs`.
pub fn ratio_statistic(
    batch: &[CoupledSample],
    p: AlphaParams,
    sigma: &Sigma,
    xs: &[usize],
    lags: &[usize],
    lambda: f64,
) -> Result<Vec<ExceedancePoint>> {
    if batch.is_empty() || xs.is_empty() {
        return Err(Error::Insufficient("empty batch or no locations".into()));
    }
    let grid = batch[0].u.grid;
    check_lags(lags, grid.n_space)?;
    let a = frak_a(p);
    let mut out = Vec::new();
    for &lag in lags {
        let mut per_location = Vec::new();
        let mut flagged = 0;
        let mut worst = (0.0f64, 0usize);
        for &x in xs {
            let mut hits = 0usize;
            let mut valid = 0usize;
            for r in batch {
                let df = grad(&r.f, x, lag);
                if df.abs() < DEGENERATE {
                    flagged += 1;
                    continue;
                }
                valid += 1;
                let dev = grad(&r.u, x, lag) / df - a * sigma.eval(r.u.values[x]);
                if dev.abs() > lambda {
                    hits += 1;
                }
            }
            let prob = hits as f64 / valid.max(1) as f64;
            if prob >= worst.0 {
                worst = (prob, valid);
            }
            per_location.push(prob);
        }
        let (prob, valid) = worst;
        out.push(ExceedancePoint {
            lag,
            eps: lag as f64 * grid.dx(),
            exceedance: prob,
            stderr: (prob * (1.0 - prob) / valid.max(1) as f64).sqrt(),
            per_location,
            flagged,
            samples: batch.len() * xs.len(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorPoint {
    pub eps: f64,
    /// ‖∇_ε u - 𝔄σ(u)∇_ε F‖ in L².
    pub l2: f64,
    pub l2_stderr: f64,
    /// Median of |∇_ε u - 𝔄σ(u)∇_ε F| / ε^{(α-1)/2}.
    pub median_normalized: f64,
}

/// Per-replica squared errors e² = (∇_ε u - 𝔄σ(u)∇_ε F)² at location x.
pub fn squared_errors(batch: &[CoupledSample], p: AlphaParams, sigma: &Sigma, x: usize, lags: &[usize]) -> Vec<Vec<f64>> {
    let a = frak_a(p);
    batch
        .iter()
        .map(|r| {
            lags.iter()
                .map(|&lag| (grad(&r.u, x, lag) - a * sigma.eval(r.u.values[x]) * grad(&r.f, x, lag)).powi(2))
                .collect()
        })
        .collect()
}

/// L² error per lag and the fitted ε-exponent of the L² error.
pub fn rate_probe(
    batch: &[CoupledSample],
    p: AlphaParams,
    sigma: &Sigma,
    x: usize,
    lags: &[usize],
) -> Result<(Vec<ErrorPoint>, Stat)> {
    if batch.len() < 2 {
        return Err(Error::Insufficient("rate probe needs replicas".into()));
    }
    let grid = batch[0].u.grid;
    check_lags(lags, grid.n_space)?;
    let sq = squared_errors(batch, p, sigma, x, lags);
    let eps: Vec<f64> = lags.iter().map(|&l| l as f64 * grid.dx()).collect();
    let h = p.hurst();
    let points = (0..lags.len())
        .map(|j| {
            let col: Vec<f64> = sq.iter().map(|r| r[j]).collect();
            let ms = mean_stderr(&col);
            let l2 = ms.value.sqrt();
            let norm: Vec<f64> = col.iter().map(|v| v.sqrt() / eps[j].powf(h)).collect();
            ErrorPoint {
                eps: eps[j],
                l2,
                l2_stderr: ms.stderr / (2.0 * l2.max(f64::MIN_POSITIVE)),
                median_normalized: quantile(&norm, 0.5),
            }
        })
        .collect();
    let fit = jackknife_slope(&eps, &sq, 0.5);
    Ok((points, fit))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LilReport {
    pub eps: Vec<f64>,
    /// Per replica, max over ε of +∇u / envelope.
    pub max_plus: Vec<f64>,
    /// Per replica, max over ε of -∇u / envelope.
    pub max_minus: Vec<f64>,
    /// Per replica 𝔄|σ(u_t(x))|.
    pub limit: Vec<f64>,
    /// Per replica max(max_plus, max_minus) - limit.
    pub gap: Vec<f64>,
    /// Fraction of replicas whose two-sided max is ≤ (1 + δ)·limit.
    pub fraction_below: f64,
    pub delta: f64,
    /// Two-sample KS p-value of max_plus against max_minus.
    pub symmetry_p: f64,
}

/// Normalised increments ±∇_ε u/√(2ε^{α-1} log log(1/ε)) over dyadic lags.
/// Lags with ε ≥ 1/e are dropped.
pub fn lil_scan(
    fields: &[FieldSample],
    p: AlphaParams,
    sigma: &Sigma,
    x: usize,
    lags: &[usize],
    delta: f64,
) -> Result<LilReport> {
    if fields.len() < 2 {
        return Err(Error::Insufficient("lil_scan needs replicas".into()));
    }
    let grid = fields[0].grid;
    check_lags(lags, grid.n_space)?;
    let kept: Vec<usize> = lags
        .iter()
        .copied()
        .filter(|&l| (l as f64 * grid.dx()) < (-1.0f64).exp())
        .collect();
    if kept.is_empty() {
        return Err(invalid("no lag with eps < 1/e"));
    }
    let a = frak_a(p);
    let eps: Vec<f64> = kept.iter().map(|&l| l as f64 * grid.dx()).collect();
    let env: Vec<f64> = eps
        .iter()
        .map(|&e| (2.0 * e.powf(p.alpha() - 1.0) * (1.0 / e).ln().ln()).sqrt())
        .collect();
    let mut max_plus = Vec::new();
    let mut max_minus = Vec::new();
    let mut limit = Vec::new();
    let mut gap = Vec::new();
    let mut below = 0usize;
    for f in fields {
        let (mut mp, mut mm) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (j, &lag) in kept.iter().enumerate() {
            let v = grad(f, x, lag) / env[j];
            mp = mp.max(v);
            mm = mm.max(-v);
        }
        let lim = a * sigma.eval(f.values[x]).abs();
        let both = mp.max(mm);
        if both <= (1.0 + delta) * lim + 1e-12 {
            below += 1;
        }
        max_plus.push(mp);
        max_minus.push(mm);
        limit.push(lim);
        gap.push(both - lim);
    }
    let (_, symmetry_p) = ks_two_sample(&max_plus, &max_minus);
    Ok(LilReport {
        eps,
        fraction_below: below as f64 / fields.len() as f64,
        max_plus,
        max_minus,
        limit,
        gap,
        delta,
        symmetry_p,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityPoint {
    pub s: f64,
    pub median: f64,
    pub upper_quartile: f64,
    pub values: Vec<f64>,
}

/// (1/s)∫_{4dx}^s |∇_ε u/∇_ε F - 𝔄σ(u_t(x))| dε by the trapezoid rule on the
/// lag lattice, per replica, for each s (in cells).
pub fn density_average(
    batch: &[CoupledSample],
    p: AlphaParams,
    sigma: &Sigma,
    x: usize,
    s_cells: &[usize],
) -> Result<Vec<DensityPoint>> {
    if batch.is_empty() {
        return Err(Error::Insufficient("empty batch".into()));
    }
    let grid = batch[0].u.grid;
    check_lags(s_cells, grid.n_space)?;
    if s_cells.iter().any(|&s| s <= MIN_LAG) {
        return Err(invalid("s must exceed the smallest lag"));
    }
    let a = frak_a(p);
    let dx = grid.dx();
    let top = *s_cells.iter().max().unwrap();
    let per_replica: Vec<Vec<f64>> = batch
        .iter()
        .map(|r| {
            let target = a * sigma.eval(r.u.values[x]);
            (MIN_LAG..=top)
                .map(|lag| {
                    let df = grad(&r.f, x, lag);
                    if df.abs() < DEGENERATE {
                        0.0
                    } else {
                        (grad(&r.u, x, lag) / df - target).abs()
                    }
                })
                .collect()
        })
        .collect();
    Ok(s_cells
        .iter()
        .map(|&s| {
            let values: Vec<f64> = per_replica
                .iter()
                .map(|g| {
                    let m = s - MIN_LAG;
                    let mut acc = CompensatedSum::new();
                    for j in 0..m {
                        acc.add(0.5 * (g[j] + g[j + 1]) * dx);
                    }
                    acc.value() / (s as f64 * dx)
                })
                .collect();
            DensityPoint {
                s: s as f64 * dx,
                median: quantile(&values, 0.5),
                upper_quartile: quantile(&values, 0.75),
                values,
            }
        })
        .collect())
}

/// Reference law of the normalised gradient.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum ReferenceLaw {
    Gaussian { sd: f64 },
    /// Equal-weight mixture of N(0, scale²).
    Mixture { scales: Vec<f64> },
}

impl ReferenceLaw {
    pub fn cdf(&self, z: f64) -> f64 {
        match self {
            ReferenceLaw::Gaussian { sd } => normal_cdf(z / sd),
            ReferenceLaw::Mixture { scales } => {
                let mut s = CompensatedSum::new();
                for &c in scales {
                    s.add(if c > 0.0 {
                        normal_cdf(z / c)
                    } else if z >= 0.0 {
                        1.0
                    } else {
                        0.0
                    });
                }
                s.value() / scales.len() as f64
            }
        }
    }

    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        match self {
            ReferenceLaw::Gaussian { sd } => sd * z,
            ReferenceLaw::Mixture { scales } => scales[rng.random_range(0..scales.len())] * z,
        }
    }
}

/// sup |F_n - F| for a sample against a continuous CDF.
pub fn ks_statistic(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// P{K > λ} for the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Two-sample KS distance and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(|p, q| p.total_cmp(q));
    y.sort_by(|p, q| p.total_cmp(q));
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lam = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_sf(lam))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CltReport {
    pub ks: f64,
    pub p_asymptotic: f64,
    pub p_bootstrap: f64,
    pub n: usize,
}

/// ε^{-(α-1)/2}∇_ε u_t(x) per field.
pub fn normalized_gradients(fields: &[FieldSample], p: AlphaParams, x: usize, lag: usize) -> Vec<f64> {
    fields
        .iter()
        .map(|f| grad(f, x, lag) / (lag as f64 * f.grid.dx()).powf(p.hurst()))
        .collect()
}

/// Mixture law 𝔄|σ(u_t(x))|·N from an independent batch of u_t(x) values.
pub fn mixture_law(reference: &[FieldSample], p: AlphaParams, sigma: &Sigma, x: usize) -> ReferenceLaw {
    let a = frak_a(p);
    ReferenceLaw::Mixture {
        scales: reference.iter().map(|f| a * sigma.eval(f.values[x]).abs()).collect(),
    }
}

/// KS distance of the test values against `law`, with asymptotic and
/// parametric-bootstrap p-values. The seeds behind the mixture must be
/// disjoint from the test seeds.
pub fn clt_check(
    test: &[f64],
    test_seeds: &[u64],
    law: &ReferenceLaw,
    reference_seeds: &[u64],
    bootstrap: usize,
    rng_seed: u64,
) -> Result<CltReport> {
    if test.len() < 10 {
        return Err(Error::Insufficient("too few test values".into()));
    }
    let set: std::collections::HashSet<u64> = test_seeds.iter().copied().collect();
    if let Some(s) = reference_seeds.iter().find(|s| set.contains(s)) {
        return Err(invalid(format!("reference batch reuses test seed {s}")));
    }
    let n = test.len();
    let ks = ks_statistic(test, |z| law.cdf(z));
    let ne = (n as f64).sqrt();
    let p_asymptotic = kolmogorov_sf((ne + 0.12 + 0.11 / ne) * ks);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut exceed = 0usize;
    for _ in 0..bootstrap {
        let sample: Vec<f64> = (0..n).map(|_| law.sample(&mut rng)).collect();
        if ks_statistic(&sample, |z| law.cdf(z)) >= ks {
            exceed += 1;
        }
    }
    Ok(CltReport {
        ks,
        p_asymptotic,
        p_bootstrap: (exceed + 1) as f64 / (bootstrap + 1) as f64,
        n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariationReport {
    pub sum: f64,
    pub reference: f64,
    pub terms: usize,
    pub mesh: f64,
}

/// Σ_{a2^n ≤ j ≤ b2^n} φ(u(j2^{-n}))|u((j+1)2^{-n}) - u(j2^{-n})|^{2/(α-1)}
/// with the reference 𝔅·∫_a^b φ(u)|σ(u)|^{2/(α-1)} dx from the same field.
pub fn variation_sum(
    field: &FieldSample,
    p: AlphaParams,
    sigma: &Sigma,
    phi: Phi,
    a: f64,
    b: f64,
    n: u32,
) -> Result<VariationReport> {
    let grid = field.grid;
    let dx = grid.dx();
    let mesh = 2f64.powi(-(n as i32));
    let step = grid.lag_cells(mesh)?;
    if step < MIN_LAG {
        return Err(invalid(format!("mesh 2^-{n} is finer than {MIN_LAG}dx")));
    }
    if !(a < b) || a < -grid.half_length || b + mesh >= grid.half_length {
        return Err(invalid(format!("[{a}, {b}] does not fit the grid")));
    }
    let index = |x: f64| -> Result<usize> {
        let r = (x + grid.half_length) / dx;
        let k = r.round();
        if (r - k).abs() > 1e-9 * r.max(1.0) {
            return Err(invalid(format!("{x} is not a grid point")));
        }
        Ok(k as usize)
    };
    let p_exp = p.variation_exponent();
    let j0 = (a / mesh).ceil() as i64;
    let j1 = (b / mesh).floor() as i64;
    let mut sum = CompensatedSum::new();
    let mut terms = 0;
    for j in j0..=j1 {
        let k = index(j as f64 * mesh)?;
        let w = phi.eval(field.values[k]);
        if w != 0.0 {
            sum.add(w * (field.values[k + step] - field.values[k]).abs().powf(p_exp));
        }
        terms += 1;
    }
    let ka = index((a / dx).ceil() * dx)?;
    let kb = index((b / dx).floor() * dx)?;
    let g = |k: usize| {
        let u = field.values[k];
        phi.eval(u) * sigma.eval(u).abs().powf(p_exp)
    };
    let mut integral = CompensatedSum::new();
    for k in ka..kb {
        integral.add(0.5 * (g(k) + g(k + 1)) * dx);
    }
    Ok(VariationReport {
        sum: sum.value(),
        reference: frak_b(p) * integral.value(),
        terms,
        mesh,
    })
}

/// Box of the localization statement on the lattice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LatticeBox {
    pub beta: f64,
    /// First row inside the time window.
    pub first_row: usize,
    /// Half-width in cells.
    pub half_cells: usize,
}

/// Per-row spatial weights D_i(k) of ∇_ε at (t, x) as a function of the noise
/// cell k: field(x + ε) - field(x) = Σ_i Σ_k D_i(k) ξ_{i,k} for zero data.
#[derive(Clone, Debug)]
pub struct GradientWeights {
    pub grid: GridSpec,
    pub n_final: usize,
    pub x: usize,
    pub lag: usize,
    pub rows: Vec<Vec<f64>>,
}

impl GradientWeights {
    pub fn new(sampler: &LinearSampler, n_final: usize, x: usize, lag: usize) -> Result<Self> {
        let grid = *sampler.grid();
        if n_final == 0 || n_final > grid.n_time {
            return Err(invalid("n_final outside the lattice"));
        }
        let n = grid.n_space;
        let prop = sampler.propagator();
        let rows = (0..n_final)
            .map(|i| {
                let kappa = real_space_kernel(sampler.fft(), &prop.row_weight(i, n_final));
                (0..n)
                    .map(|k| kappa[(x + lag + n - k) % n] - kappa[(x + n - k) % n])
                    .collect()
            })
            .collect();
        Ok(Self {
            grid,
            n_final,
            x,
            lag,
            rows,
        })
    }

    /// The box for β, or an error with the smallest L and t that would fit it.
    pub fn lattice_box(&self, p: AlphaParams, beta: f64) -> Result<LatticeBox> {
        let eps = self.lag as f64 * self.grid.dx();
        let depth = beta * eps.powf(p.alpha());
        let t = self.n_final as f64 * self.grid.dt();
        let half = box_gamma(beta) * eps;
        let need_l = half + eps + self.grid.dx();
        if depth >= t || need_l >= self.grid.half_length {
            return Err(Error::BoxDoesNotFit(format!(
                "beta = {beta} needs L > {need_l} and t > {depth}, have L = {}, t = {t}",
                self.grid.half_length
            )));
        }
        let rows = (depth / self.grid.dt() * (1.0 + 1e-12)).floor() as usize;
        Ok(LatticeBox {
            beta,
            first_row: self.n_final - rows,
            half_cells: (half / self.grid.dx() * (1.0 + 1e-12)).floor() as usize,
        })
    }

    fn inside(&self, b: &LatticeBox, k: usize) -> bool {
        let n = self.grid.n_space;
        let d = (k + n - self.x) % n;
        d.min(n - d) <= b.half_cells
    }

    /// Exact lattice variance of the part outside the box.
    pub fn residual_variance(&self, b: &LatticeBox) -> f64 {
        let cell = self.grid.dt() * self.grid.dx();
        let mut s = CompensatedSum::new();
        for (i, row) in self.rows.iter().enumerate() {
            for (k, d) in row.iter().enumerate() {
                if i < b.first_row || !self.inside(b, k) {
                    s.add(d * d * cell);
                }
            }
        }
        s.value()
    }

    /// Σ over the box of w(i, k)·D_i(k)·ξ_{i,k} for one row.
    pub fn box_row_sum(&self, b: &LatticeBox, i: usize, xi: &[f64], weight: Option<&[f64]>) -> f64 {
        if i < b.first_row {
            return 0.0;
        }
        let n = self.grid.n_space;
        let row = &self.rows[i];
        let mut s = 0.0;
        for off in 0..=2 * b.half_cells {
            let k = (self.x + n + off - b.half_cells) % n;
            let w = weight.map_or(1.0, |w| w[k]);
            s += w * row[k] * xi[k];
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalizationPoint {
    pub beta: f64,
    pub mc: Stat,
    /// Exact variance of the lattice residual.
    pub lattice: f64,
    /// Whole-line oracle.
    pub oracle: f64,
}

/// Monte Carlo E|∇_ε Z_t(x) - box integral|² for each β with `seeds`.
pub fn localization_mc(
    weights: &GradientWeights,
    p: AlphaParams,
    betas: &[f64],
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<LocalizationPoint>> {
    let boxes = betas
        .iter()
        .map(|&b| weights.lattice_box(p, b))
        .collect::<Result<Vec<_>>>()?;
    let grid = weights.grid;
    let results = crate::farm::map_replicas(seeds.len(), 0, workers, |i, _| {
        let noise = NoiseLattice::new(grid, seeds[i])?;
        let mut row = vec![0.0; grid.n_space];
        let mut total = 0.0;
        let mut inside = vec![0.0; boxes.len()];
        for r in 0..weights.n_final {
            noise.fill_row(r, &mut row);
            total += weights.rows[r].iter().zip(&row).map(|(d, x)| d * x).sum::<f64>();
            for (bi, b) in boxes.iter().enumerate() {
                inside[bi] += weights.box_row_sum(b, r, &row, None);
            }
        }
        Ok(inside.iter().map(|v| (total - v).powi(2)).collect::<Vec<f64>>())
    })?;
    let per = results.into_iter().collect::<Result<Vec<_>>>()?;
    let eps = weights.lag as f64 * grid.dx();
    let t = weights.n_final as f64 * grid.dt();
    boxes
        .iter()
        .enumerate()
        .map(|(bi, b)| {
            let col: Vec<f64> = per.iter().map(|r| r[bi]).collect();
            Ok(LocalizationPoint {
                beta: b.beta,
                mc: mean_stderr(&col),
                lattice: weights.residual_variance(b),
                oracle: crate::oracle::localization_tail(p, t, eps, b.beta)?.value,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalizationUPoint {
    pub beta: f64,
    /// E|∇_ε u - box integral with σ(u_s(y))|^k.
    pub moment: Stat,
    /// E|moving-σ box integral - frozen-σ box integral|².
    pub frozen_gap: Stat,
}

/// Nonlinear localization residual with σ(u_s(y)) inside the box, and the gap
/// to the box integral with σ frozen at u_{t-βε^α}(x).
pub fn localization_u_mc(
    solver: &Solver,
    weights: &GradientWeights,
    betas: &[f64],
    k: i32,
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<LocalizationUPoint>> {
    let p = solver.model().params;
    let boxes = betas
        .iter()
        .map(|&b| weights.lattice_box(p, b))
        .collect::<Result<Vec<_>>>()?;
    let grid = weights.grid;
    if !grid.same_space(solver.grid()) || grid.dt() != solver.grid().dt() {
        return Err(Error::GridMismatch("weights and solver grids differ".into()));
    }
    let t = weights.n_final as f64 * grid.dt();
    let results = crate::farm::map_replicas(seeds.len(), 0, workers, |i, _| {
        let noise = NoiseLattice::new(grid, seeds[i])?;
        let mut moving = vec![0.0; boxes.len()];
        let mut plain = vec![0.0; boxes.len()];
        let mut frozen_sigma = vec![0.0; boxes.len()];
        let traj = solver.solve_observed(&noise, &[t], &mut |v| {
            for (bi, b) in boxes.iter().enumerate() {
                if v.step == b.first_row {
                    frozen_sigma[bi] = v.sigma_u[weights.x];
                }
                if v.step >= b.first_row {
                    moving[bi] += weights.box_row_sum(b, v.step, v.xi, Some(v.sigma_u));
                    plain[bi] += weights.box_row_sum(b, v.step, v.xi, None);
                }
            }
        })?;
        let du = grad(traj.last(), weights.x, weights.lag);
        Ok((0..boxes.len())
            .map(|bi| {
                (
                    (du - moving[bi]).abs().powi(k),
                    (moving[bi] - frozen_sigma[bi] * plain[bi]).powi(2),
                )
            })
            .collect::<Vec<_>>())
    })?;
    let per = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(boxes
        .iter()
        .enumerate()
        .map(|(bi, b)| {
            let m: Vec<f64> = per.iter().map(|r| r[bi].0).collect();
            let g: Vec<f64> = per.iter().map(|r| r[bi].1).collect();
            LocalizationUPoint {
                beta: b.beta,
                moment: mean_stderr(&m),
                frozen_gap: mean_stderr(&g),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Profile;
    use crate::noise::make_noise;
    use crate::special::normal_sf;

    fn ap(a: f64) -> AlphaParams {
        AlphaParams::new(a).unwrap()
    }

    #[test]
    fn kolmogorov_tail_values() {
        // reference values of the Kolmogorov distribution
        assert!((kolmogorov_sf(1.36) - 0.0494).abs() < 5e-4);
        assert!((kolmogorov_sf(1.0) - 0.2700).abs() < 5e-4);
        assert_eq!(kolmogorov_sf(0.1), 1.0);
    }

    #[test]
    fn ks_detects_shift_and_accepts_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let law = ReferenceLaw::Gaussian { sd: 2.0 };
        let good: Vec<f64> = (0..2000).map(|_| law.sample(&mut rng)).collect();
        let bad: Vec<f64> = good.iter().map(|v| v + 0.5).collect();
        assert!(ks_statistic(&good, |z| law.cdf(z)) < 0.04);
        assert!(ks_statistic(&bad, |z| law.cdf(z)) > 0.08);
        let (d, p) = ks_two_sample(&good[..1000], &good[1000..]);
        assert!(d < 0.07 && p > 0.01);
        let rep = clt_check(&good, &[1], &law, &[2], 50, 9).unwrap();
        assert!(rep.p_bootstrap > 0.01 && rep.p_asymptotic > 0.01);
        assert!(clt_check(&good, &[1, 2], &law, &[2], 10, 9).is_err());
    }

    #[test]
    fn mixture_cdf_is_average() {
        let law = ReferenceLaw::Mixture { scales: vec![1.0, 2.0] };
        let z = 0.7;
        let expect = 0.5 * (normal_cdf(z) + normal_cdf(z / 2.0));
        assert!((law.cdf(z) - expect).abs() < 1e-15);
        assert!((law.cdf(-z) - 0.5 * (normal_sf(z) + normal_sf(z / 2.0))).abs() < 1e-15);
    }

    #[test]
    fn quantiles_and_means() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 1.0), 4.0);
        let s = mean_stderr(&v);
        assert_eq!(s.value, 2.5);
        assert!((s.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    fn linear_pipeline(sigma: Sigma) -> CoupledPipeline {
        let p = ap(1.5);
        let g = GridSpec::new(4.0, 128, 1.0, 4).unwrap();
        let model = ModelSpec::new(p, sigma, Profile::Constant(0.0), 1.0).unwrap();
        CoupledPipeline::new(model, g, 4096.0, 4.0 * g.dx()).unwrap()
    }

    #[test]
    fn constant_sigma_ratio_is_linear_identity() {
        // u = c·Z, so ∇u/∇F - 𝔄c = c·∇S/∇F
        let c = 1.7;
        let pipe = linear_pipeline(Sigma::Constant(c));
        let r = pipe.replica(3).unwrap();
        let p = pipe.params();
        for lag in [4, 8] {
            for x in [10, 64, 100] {
                let lhs = grad(&r.u, x, lag) / grad(&r.f, x, lag) - frak_a(p) * c;
                let rhs = c * grad(&r.s, x, lag) / grad(&r.f, x, lag);
                assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()), "{lhs} {rhs}");
            }
        }
        let batch: Vec<_> = (0..20).map(|s| pipe.replica(s).unwrap()).collect();
        let pts = ratio_statistic(&batch, p, &Sigma::Constant(c), &[64], &[4, 8], 0.25).unwrap();
        for pt in &pts {
            assert!((0.0..=1.0).contains(&pt.exceedance));
        }
        assert!(ratio_statistic(&batch, p, &Sigma::Constant(c), &[64], &[2], 0.25).is_err());
    }

    #[test]
    fn zero_sigma_degenerate_statistics() {
        let pipe = linear_pipeline(Sigma::Constant(0.0));
        let p = pipe.params();
        let batch: Vec<_> = (0..5).map(|s| pipe.replica(s).unwrap()).collect();
        let dens = density_average(&batch, p, &Sigma::Constant(0.0), 64, &[8, 16]).unwrap();
        for d in dens {
            assert!(d.values.iter().all(|&v| v == 0.0));
        }
        let us: Vec<FieldSample> = batch.iter().map(|b| b.u.clone()).collect();
        let lil = lil_scan(&us, p, &Sigma::Constant(0.0), 64, &[4, 8, 16], 0.5).unwrap();
        assert!(lil.max_plus.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn variation_sum_zero_phi_and_reference() {
        let p = ap(2.0);
        let g = GridSpec::new(4.0, 256, 1.0, 4).unwrap();
        let noise = make_noise(g, 2).unwrap();
        let model = ModelSpec::new(p, Sigma::Constant(2.0), Profile::Constant(0.0), 1.0).unwrap();
        let u = crate::solver::solve(&model, &noise, &[1.0]).unwrap().snapshots.pop().unwrap();
        let z = variation_sum(&u, p, &Sigma::Constant(2.0), Phi::Zero, 0.0, 1.0, 3).unwrap();
        assert_eq!(z.sum, 0.0);
        let one = variation_sum(&u, p, &Sigma::Constant(2.0), Phi::One, 0.0, 1.0, 3).unwrap();
        assert!((one.reference - 0.5 * 4.0).abs() < 1e-12);
        assert_eq!(one.terms, 9);
        assert!(variation_sum(&u, p, &Sigma::Constant(2.0), Phi::One, 0.0, 1.0, 6).is_err());
    }

    #[test]
    fn localization_whole_domain_box_leaves_nothing() {
        let p = ap(1.5);
        let eps: f64 = 1.0 / 16.0;
        let dt = eps.powf(1.5) / 4.0;
        let g = GridSpec::from_steps(eps / 8.0, 4096, dt, 64).unwrap();
        let sampler = LinearSampler::new(p, g).unwrap();
        let w = GradientWeights::new(&sampler, 64, g.origin_index(), 8).unwrap();
        // depth 15.9 ε^α of 16 and a half-width covering the torus
        let b = w.lattice_box(p, 15.9).unwrap();
        let whole = LatticeBox {
            first_row: 0,
            half_cells: g.n_space / 2,
            ..b
        };
        let scale = frak_a(p).powi(2) * eps.powf(0.5);
        assert!(w.residual_variance(&whole) < 1e-3 * scale);
        assert!(w.lattice_box(p, 40.0).is_err());
        // lattice variance of the full gradient equals the spectral formula
        let none = LatticeBox {
            first_row: 64,
            half_cells: 0,
            ..b
        };
        let full: f64 = w.rows.iter().flatten().map(|d| d * d).sum::<f64>() * g.dt() * g.dx();
        let exact = sampler.propagator().spectrum.increment_variance(64.0 * dt, 8);
        assert!(((full - exact) / exact).abs() < 1e-9, "{full} {exact}");
        assert!((w.residual_variance(&none) - full).abs() < 1e-12 * full);
    }
}
