//! Experiment orchestration from a flat `key = value` configuration.
//!
//! Grammar: one `key = value` per line, `#` starts a comment, lists are
//! comma separated. Unknown keys are rejected and every default is echoed
//! into the report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::constants::{frak_a, rate_exponent_b, AlphaParams};
use crate::error::{Error, Result};
use crate::farm::{map_replicas, partition};
use crate::fields::{FieldSample, LinearSampler};
use crate::grid::GridSpec;
use crate::kpz::{hopf_cole, stabilize};
use crate::model::{ModelSpec, Phi, Profile, Sigma};
use crate::noise::NoiseLattice;
use crate::solver::{holder_slope, log_log_slope, Direction, Solver, Trajectory};
use crate::stats::*;

pub const EXPERIMENTS: [&str; 12] = [
    "ratio",
    "lil",
    "density",
    "clt",
    "variation",
    "localization",
    "localization-u",
    "holder",
    "kpz-ratio",
    "kpz-lil",
    "kpz-clt",
    "kpz-qv",
];

/// Keys with their defaults; `None` marks a derived default.
const KEYS: [(&str, Option<&str>); 35] = [
    ("experiment", None),
    ("alpha", Some("2")),
    ("sigma", Some("bounded_smooth")),
    ("u0", Some("0")),
    ("t", Some("1")),
    ("L", Some("1")),
    ("grid_n", Some("128")),
    ("n_time", None),
    ("t_ext_factor", Some("1048576")),
    ("replicas", Some("1000")),
    ("seed", Some("1")),
    ("reference_seed", None),
    ("lags", Some("32,16,8")),
    ("x_cells", Some("0")),
    ("lambda", None),
    ("betas", Some("4,16,64")),
    ("s_cells", Some("64,32,16,8")),
    ("n_level", Some("4")),
    ("a", Some("0")),
    ("b", Some("1")),
    ("phi", Some("one")),
    ("delta", Some("0.5")),
    ("k", Some("2")),
    ("direction", Some("space")),
    ("bootstrap", Some("200")),
    ("rate_check", Some("false")),
    ("max_exceedance", Some("0.2")),
    ("max_ks", Some("0.08")),
    ("variation_tol", Some("0.05")),
    ("slope_tol", Some("0.1")),
    ("rate_tol", Some("0.15")),
    ("min_fraction_below", Some("0.8")),
    ("loc_rel_tol", Some("0.03")),
    ("max_beta_slope", Some("-0.4")),
    ("max_failed_fraction", Some("0.01")),
];

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Validated configuration of one run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    explicit: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parse the text format. Later lines override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected key = value", no + 1)))?;
            raw.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_map(raw)
    }

    pub fn from_map(raw: BTreeMap<String, String>) -> Result<Self> {
        for k in raw.keys() {
            if !KEYS.iter().any(|(name, _)| name == k) {
                return Err(cfg_err(format!("unknown key '{k}'")));
            }
        }
        let mut values = BTreeMap::new();
        for (k, d) in KEYS {
            if let Some(v) = raw.get(k).cloned().or(d.map(str::to_string)) {
                values.insert(k.to_string(), v);
            }
        }
        let mut cfg = Self {
            values,
            explicit: raw.clone(),
        };
        let exp = cfg.str("experiment")?;
        if !EXPERIMENTS.contains(&exp.as_str()) {
            return Err(cfg_err(format!("unknown experiment '{exp}'")));
        }
        if exp.starts_with("kpz-") {
            cfg.values.entry("sigma".into()).and_modify(|v| *v = "identity".into());
            if !raw.contains_key("u0") {
                cfg.values.insert("u0".into(), "1".into());
            }
        }
        // derived defaults
        let p = cfg.params()?;
        if !cfg.values.contains_key("reference_seed") {
            let s = cfg.u64("seed")?.wrapping_add(1 << 40);
            cfg.values.insert("reference_seed".into(), s.to_string());
        }
        if !cfg.values.contains_key("lambda") {
            cfg.values.insert("lambda".into(), (0.25 * frak_a(p)).to_string());
        }
        if !cfg.values.contains_key("n_time") {
            let n = cfg.default_n_time()?;
            cfg.values.insert("n_time".into(), n.to_string());
        }
        if cfg.usize("replicas")? == 0 {
            return Err(cfg_err("replicas must be positive"));
        }
        cfg.sigma()?;
        cfg.profile()?;
        Phi::parse(&cfg.str("phi")?).map_err(|e| cfg_err(e.to_string()))?;
        cfg.grid()?;
        Ok(cfg)
    }

    /// Set one key (used for command-line overrides) and re-validate.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        let mut raw = self.explicit.clone();
        raw.insert(key.to_string(), value.to_string());
        Self::from_map(raw)
    }

    fn default_n_time(&self) -> Result<usize> {
        let p = self.params()?;
        let dx = 2.0 * self.f64("L")? / self.usize("grid_n")? as f64;
        let t = self.f64("t")?;
        if self.str("experiment")? == "localization" {
            // dt = ε^α / 4 with ε the first lag
            let eps = self.usize_list("lags")?[0] as f64 * dx;
            let dt = eps.powf(p.alpha()) / 4.0;
            let n = (t / dt).round();
            if (t / dt - n).abs() > 1e-9 * n {
                return Err(cfg_err(format!("t = {t} is not a multiple of eps^alpha/4 = {dt}")));
            }
            return Ok(n as usize);
        }
        let lead = if self.str("experiment")? == "holder" && self.str("direction")? == "time" {
            *self.usize_list("lags")?.iter().max().unwrap_or(&0)
        } else {
            0
        };
        let n = (t / dx.powf(p.alpha()) * (1.0 - 1e-12)).ceil() as usize;
        Ok(n.max(1) + lead)
    }

    pub fn echo(&self) -> BTreeMap<String, String> {
        self.values.clone()
    }

    /// First 12 hex digits of the SHA-256 of the canonical echo.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn str(&self, key: &str) -> Result<String> {
        self.values
            .get(key)
            .cloned()
            .ok_or_else(|| cfg_err(format!("missing key '{key}'")))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key)?;
        v.parse().map_err(|_| cfg_err(format!("bad value '{v}' for '{key}'")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse_as(key)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse_as(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse_as(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse_as(key)
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.str(key)?;
        let out: Vec<T> = v
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| cfg_err(format!("bad list '{v}' for '{key}'"))))
            .collect::<Result<_>>()?;
        if out.is_empty() {
            return Err(cfg_err(format!("'{key}' is empty")));
        }
        Ok(out)
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.list(key)
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.list(key)
    }

    pub fn params(&self) -> Result<AlphaParams> {
        AlphaParams::new(self.f64("alpha")?).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn sigma(&self) -> Result<Sigma> {
        Sigma::parse(&self.str("sigma")?).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn profile(&self) -> Result<Profile> {
        Profile::parse(&self.str("u0")?).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.f64("L")?, self.usize("grid_n")?, self.f64("t")?, self.usize("n_time")?)
            .map_err(|e| cfg_err(e.to_string()))
    }

    pub fn model(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.params()?, self.sigma()?, self.profile()?, self.f64("t")?)
            .map_err(|e| cfg_err(e.to_string()))
    }

    fn locations(&self, grid: &GridSpec) -> Result<Vec<usize>> {
        let n = grid.n_space as i64;
        self.list::<i64>("x_cells")
            .map(|v| v.iter().map(|o| (grid.origin_index() as i64 + o).rem_euclid(n) as usize).collect())
    }
}

/// Map an outcome to the process exit code: 0 pass, 1 criteria failed,
/// 2 configuration error, 3 runtime error.
pub fn exit_code(outcome: &Result<ExperimentReport>) -> i32 {
    match outcome {
        Ok(r) if r.passed() => 0,
        Ok(_) => 1,
        Err(Error::Config(_)) | Err(Error::InvalidParameter(_)) => 2,
        Err(_) => 3,
    }
}

struct Batch<T> {
    items: Vec<T>,
    failed: Vec<(usize, String)>,
}

fn farm<T: Send>(
    count: usize,
    seed: u64,
    workers: usize,
    f: impl Fn(usize, u64) -> Result<T> + Sync + Send,
) -> Result<Batch<T>> {
    let (items, failed) = partition(map_replicas(count, seed, workers, f)?);
    if items.is_empty() {
        return Err(Error::Insufficient(format!(
            "all {count} replicas failed; first error: {}",
            failed.first().map(|f| f.1.as_str()).unwrap_or("")
        )));
    }
    Ok(Batch { items, failed })
}

fn record_failures(rep: &mut ExperimentReport, cfg: &RunConfig, failed: Vec<(usize, String)>, count: usize) -> Result<()> {
    let frac = failed.len() as f64 / count as f64;
    rep.failed_replicas.extend(failed);
    rep.at_most("failed_replica_fraction", frac, cfg.f64("max_failed_fraction")?);
    Ok(())
}

fn coupled_batch(cfg: &RunConfig, workers: usize) -> Result<(CoupledPipeline, Batch<CoupledSample>)> {
    let grid = cfg.grid()?;
    let lags = cfg.usize_list("lags")?;
    let eps_min = *lags.iter().min().unwrap() as f64 * grid.dx();
    let pipe = CoupledPipeline::new(cfg.model()?, grid, cfg.f64("t_ext_factor")? * grid.t_max, eps_min)?;
    let batch = farm(cfg.usize("replicas")?, cfg.u64("seed")?, workers, |_, s| pipe.replica(s))?;
    Ok((pipe, batch))
}

fn solve_batch(cfg: &RunConfig, seed: u64, snapshots: &[f64], workers: usize) -> Result<Batch<Trajectory>> {
    let solver = Solver::new(cfg.model()?, cfg.grid()?)?;
    let grid = *solver.grid();
    farm(cfg.usize("replicas")?, seed, workers, |_, s| {
        solver.solve(&NoiseLattice::new(grid, s)?, snapshots)
    })
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn exceedance_report(
    rep: &mut ExperimentReport,
    cfg: &RunConfig,
    batch: &[CoupledSample],
    p: AlphaParams,
    sigma: &Sigma,
) -> Result<()> {
    let grid = batch[0].u.grid;
    let xs = cfg.locations(&grid)?;
    let mut lags = cfg.usize_list("lags")?;
    lags.sort_unstable_by(|a, b| b.cmp(a));
    let pts = ratio_statistic(batch, p, sigma, &xs, &lags, cfg.f64("lambda")?)?;
    let mut curve = Curve::new(&["eps", "exceedance", "stderr", "flagged"]);
    for pt in &pts {
        curve.push(vec![pt.eps, pt.exceedance, pt.stderr, pt.flagged as f64]);
        rep.stat(
            &format!("exceedance_eps_{:e}", pt.eps),
            Stat {
                value: pt.exceedance,
                stderr: pt.stderr,
                replicas: batch.len(),
            },
        );
    }
    rep.curves.insert("ratio".into(), curve);
    let ex: Vec<f64> = pts.iter().map(|p| p.exceedance).collect();
    rep.at_least("exceedance_strictly_decreasing", strictly_decreasing(&ex) as u8 as f64, 1.0);
    rep.at_most("exceedance_finest", *ex.last().unwrap(), cfg.f64("max_exceedance")?);
    Ok(())
}

fn run_ratio(cfg: &RunConfig, workers: usize, rep: &mut ExperimentReport) -> Result<()> {
    let (pipe, batch) = coupled_batch(cfg, workers)?;
    let p = pipe.params();
    let sigma = pipe.sigma().clone();
    exceedance_report(rep, cfg, &batch.items, p, &sigma)?;
    let grid = *pipe.grid();
    let x = cfg.locations(&grid)?[0];
    let mut lags = cfg.usize_list("lags")?;
    lags.sort_unstable();
    let (errs, fit) = rate_probe(&batch.items, p, &sigma, x, &lags)?;
    let mut curve = Curve::new(&["eps", "l2_error", "stderr", "median_normalized"]);
    for e in &errs {
        curve.push(vec![e.eps, e.l2, e.l2_stderr, e.median_normalized]);
    }
    rep.curves.insert("rate".into(), curve);
    rep.stat("rate_exponent", fit);
    if cfg.bool("rate_check")? {
        let target = (p.alpha() - 1.0 + rate_exponent_b(p)) / 2.0;
        rep.at_most(
            "rate_exponent_deviation",
            (fit.value - target).abs(),
            cfg.f64("rate_tol")? * target,
        );
    }
    record_failures(rep, cfg, batch.failed, cfg.usize("replicas")?)
}

fn lil_report(
    rep: &mut ExperimentReport,
    cfg: &RunConfig,
    fields: &[FieldSample],
    p: AlphaParams,
    sigma: &Sigma,
) -> Result<()> {
    let grid = fields[0].grid;
    let x = cfg.locations(&grid)?[0];
    let top = ((grid.half_length / grid.dx()).log2().floor() as i32 - 2).max(4);
    let lags: Vec<usize> = (4..=top).map(|k| 1usize << k).filter(|&l| l < grid.n_space / 2).collect();
    let lil = lil_scan(fields, p, sigma, x, &lags, cfg.f64("delta")?)?;
    let ratio: Vec<f64> = lil
        .max_plus
        .iter()
        .zip(&lil.max_minus)
        .zip(&lil.limit)
        .map(|((a, b), l)| a.max(*b) / l)
        .collect();
    rep.stat("envelope_over_limit", mean_stderr(&ratio));
    rep.stat("gap", mean_stderr(&lil.gap));
    rep.stat(
        "symmetry_p",
        Stat {
            value: lil.symmetry_p,
            stderr: 0.0,
            replicas: fields.len(),
        },
    );
    let mut curve = Curve::new(&["max_plus", "max_minus", "limit"]);
    for i in 0..fields.len() {
        curve.push(vec![lil.max_plus[i], lil.max_minus[i], lil.limit[i]]);
    }
    rep.curves.insert("lil".into(), curve);
    rep.at_least("fraction_below_envelope", lil.fraction_below, cfg.f64("min_fraction_below")?);
    rep.at_least("symmetry_p_value", lil.symmetry_p, 0.01);
    Ok(())
}

fn run_lil(cfg: &RunConfig, workers: usize, rep: &mut ExperimentReport) -> Result<()> {
    let t = cfg.f64("t")?;
    let batch = solve_batch(cfg, cfg.u64("seed")?, &[t], workers)?;
    let fields: Vec<FieldSample> = batch.items.iter().map(|tr| tr.last().clone()).collect();
    lil_report(rep, cfg, &fields, cfg.params()?, &cfg.sigma()?)?;
    record_failures(rep, cfg, batch.failed, cfg.usize("replicas")?)
}

fn run_density(cfg: &RunConfig, workers: usize, rep: &mut ExperimentReport) -> Result<()> {
    let (pipe, batch) = coupled_batch(cfg, workers)?;
    let x = cfg.locations(pipe.grid())?[0];
    let mut s_cells = cfg.usize_list("s_cells")?;
    s_cells.sort_unstable_by(|a, b| b.cmp(a));
    let pts = density_average(&batch.items, pipe.params(), pipe.sigma(), x, &s_cells)?;
    let mut curve = Curve::new(&["s", "median", "upper_quartile"]);
    for d in &pts {
        curve.push(vec![d.s, d.median, d.upper_quartile]);
    }
    rep.curves.insert("density".into(), curve);
    let med: Vec<f64> = pts.iter().map(|d| d.median).collect();
    rep.at_least("median_strictly_decreasing", strictly_decreasing(&med) as u8 as f64, 1.0);
    record_failures(rep, cfg, batch.failed, cfg.usize("replicas")?)
}

fn clt_report(
    rep: &mut ExperimentReport,
    cfg: &RunConfig,
    test: &[FieldSample],
    test_seeds: &[u64],
    law: &ReferenceLaw,
    reference_seeds: &[u64],
    p: AlphaParams,
) -> Result<()> {
    let grid = test[0].grid;
    let x = cfg.locations(&grid)?[0];
    let lag = *cfg.usize_list("lags")?.iter().min().unwrap();
    let values = normalized_gradients(test, p, x, lag);
    let r = clt_check(&values, test_seeds, law, reference_seeds, cfg.usize("bootstrap")?, cfg.u64("seed")?)?;
    rep.stat(
        "ks",
        Stat {
            value: r.ks,
            stderr: 0.0,
            replicas: r.n,
        },
    );
    rep.stat(
        "p_bootstrap",
        Stat {
            value: r.p_bootstrap,
            stderr: 0.0,
            replicas: r.n,
        },
    );
    rep.stat(
        "p_asymptotic",
        Stat {
            value: r.p_asymptotic,
            stderr: 0.0,
            replicas: r.n,
        },
    );
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut curve = Curve::new(&["value", "empirical_cdf", "reference_cdf"]);
    for (i, v) in sorted.iter().enumerate() {
        curve.push(vec![*v, (i + 1) as f64 / sorted.len() as f64, law.cdf(*v)]);
    }
    rep.curves.insert("clt".into(), curve);
    rep.at_most("ks_distance", r.ks, cfg.f64("max_ks")?);
    Ok(())
}

fn run_clt(cfg: &RunConfig, workers: usize, rep: &mut ExperimentReport) -> Result<()> {
    let t = cfg.f64("t")?;
    let p = cfg.params()?;
    let sigma = cfg.sigma()?;
    let batch = solve_batch(cfg, cfg.u64("seed")?, &[t], workers)?;
    let test: Vec<FieldSample> = batch.items.iter().map(|tr| tr.last().clone()).collect();
    let test_seeds: Vec<u64> = batch.items.iter().map(|tr| tr.seed).collect();
    let x = cfg.locations(&test[0].grid)?[0];
    let (law, ref_seeds, ref_failed) = match sigma {
        Sigma::Constant(c) => (ReferenceLaw::Gaussian { sd: frak_a(p) * c.abs() }, vec![], vec![]),
        _ => {
            let reference = solve_batch(cfg, cfg.u64("reference_seed")?, &[t], workers)?;
            let fields: Vec<FieldSample> = reference.items.iter().map(|tr| tr.last().clone()).collect();
            let seeds = reference.items.iter().map(|tr| tr.seed).collect();
            (mixture_law(&fields, p, &sigma, x), seeds, reference.failed)
        }
    };
    clt_report(rep, cfg, &test, &test_seeds, &law, &ref_seeds, p)?;
    let mut failed = batch.failed;
    failed.extend(ref_failed);
    record_failures(rep, cfg, failed, cfg.usize("replicas")?)
}

fn variation_report(
    rep: &mut ExperimentReport,
    cfg: &RunConfig,
    fields: &[FieldSample],
    p: AlphaParams,
    sigma: &Sigma,
) -> Result<()> {
    let phi = Phi::parse(&cfg.str("phi")?)?;
    let (a, b) = (cfg.f64("a")?, cfg.f64("b")?);
    let n = cfg.usize("n_level")? as u32;
    let reps = fields
        .iter()
        .map(|f| variation_sum(f, p, sigma, phi, a, b, n))
        .collect::<Result<Vec<_>>>()?;
    let sums: Vec<f64> = reps.iter().map(|r| r.sum).collect();
    let refs: Vec<f64> = reps.iter().map(|r| r.reference).collect();
    let s = mean_stderr(&sums);
    let r = mean_stderr(&refs);
    rep.stat("variation_sum", s);
    rep.stat("reference", r);
    let mut curve = Curve::new(&["sum", "reference"]);
    for v in &reps {
        curve.push(vec![v.sum, v.reference]);
    }
    rep.curves.insert("variation".into(), curve);
    let rel = if r.value != 0.0 {
        (s.value / r.value - 1.0).abs()
    } else {
        s.value.abs()
    };
    rep.at_most("variation_relative_error", rel, cfg.f64("variation_tol")?);
    Ok(())
}

fn run_variation(cfg: &RunConfig, workers: usize, rep: &mut ExperimentReport) -> Result<()> {
    let t = cfg.f64("t")?;
    let batch = solve_batch(cfg, cfg.u64("seed")?, &[t], workers)?;
    let fields: Vec<FieldSample> = batch.items.iter().map(|tr| tr.last().clone()).collect();
    variation_report(rep, cfg, &fields, cfg.params()?, &cfg.sigma()?)?;
    record_failures(rep, cfg, batch.failed, cfg.usize("replicas")?)
}

fn seeds(cfg: &RunConfig) -> Result<Vec<u64>> {
    let base = cfg.u64("seed")?;
    Ok((0..cfg.usize("replicas")? as u64).map(|i| base.wrapping_add(i)).collect())
}

fn run_localization(cfg: &RunConfig, workers: usize, rep: &mut ExperimentReport) -> Result<()> {
    let p = cfg.params()?;
    let grid = cfg.grid()?;
    let lag = cfg.usize_list("lags")?[0];
    let x = cfg.locations(&grid)?[0];
    let sampler = LinearSampler::new(p, grid)?;
    let weights = GradientWeights::new(&sampler, grid.n_time, x, lag)?;
    let betas = cfg.f64_list("betas")?;
    let pts = localization_mc(&weights, p, &betas, &seeds(cfg)?, workers)?;
    let tol = cfg.f64("loc_rel_tol")?;
    let mut curve = Curve::new(&["beta", "mc_mean", "stderr", "lattice", "oracle"]);
    for pt in &pts {
        curve.push(vec![pt.beta, pt.mc.value, pt.mc.stderr, pt.lattice, pt.oracle]);
        rep.stat(&format!("residual_beta_{}", pt.beta), pt.mc);
        rep.at_most(
            &format!("oracle_deviation_beta_{}", pt.beta),
            (pt.mc.value - pt.oracle).abs(),
            3.0 * pt.mc.stderr + tol * pt.oracle,
        );
    }
    rep.curves.insert("localization".into(), curve);
    if pts.len() >= 2 {
        let b: Vec<f64> = pts.iter().map(|p| p.beta).collect();
        let m: Vec<f64> = pts.iter().map(|p| p.mc.value).collect();
        rep.at_most("beta_slope", log_log_slope(&b, &m), cfg.f64("max_beta_slope")?);
    }
    Ok(())
}

fn run_localization_u(cfg: &RunConfig, workers: usize, rep: &mut ExperimentReport) -> Result<()> {
    let grid = cfg.grid()?;
    let solver = Solver::new(cfg.model()?, grid)?;
    let p = cfg.params()?;
    let lag = cfg.usize_list("lags")?[0];
    let x = cfg.locations(&grid)?[0];
    let sampler = LinearSampler::new(p, grid)?;
    let weights = GradientWeights::new(&sampler, grid.n_time, x, lag)?;
    let betas = cfg.f64_list("betas")?;
    let k = cfg.usize("k")? as i32;
    let pts = localization_u_mc(&solver, &weights, &betas, k, &seeds(cfg)?, workers)?;
    let mut curve = Curve::new(&["beta", "moment", "stderr", "frozen_gap", "frozen_gap_stderr"]);
    for pt in &pts {
        curve.push(vec![pt.beta, pt.moment.value, pt.moment.stderr, pt.frozen_gap.value, pt.frozen_gap.stderr]);
        rep.stat(&format!("moment_beta_{}", pt.beta), pt.moment);
        rep.stat(&format!("frozen_gap_beta_{}", pt.beta), pt.frozen_gap);
    }
    rep.curves.insert("localization_u".into(), curve);
    if pts.len() >= 2 {
        let b: Vec<f64> = pts.iter().map(|p| p.beta).collect();
        let m: Vec<f64> = pts.iter().map(|p| p.moment.value).collect();
        rep.at_most("beta_slope", log_log_slope(&b, &m), -(k as f64) / 4.0 * 0.8);
    }
    Ok(())
}

fn run_holder(cfg: &RunConfig, workers: usize, rep: &mut ExperimentReport) -> Result<()> {
    let p = cfg.params()?;
    let grid = cfg.grid()?;
    let lags = cfg.usize_list("lags")?;
    let direction = match cfg.str("direction")?.as_str() {
        "space" => Direction::Space,
        "time" => Direction::Time,
        other => return Err(cfg_err(format!("direction must be space or time, got '{other}'"))),
    };
    let top = *lags.iter().max().unwrap();
    let (t0, snaps) = match direction {
        Direction::Space => (grid.t_max, vec![grid.t_max]),
        Direction::Time => {
            let n0 = grid.n_time - top;
            let mut s: Vec<usize> = std::iter::once(n0).chain(lags.iter().map(|l| n0 + l)).collect();
            s.sort_unstable();
            s.dedup();
            (n0 as f64 * grid.dt(), s.iter().map(|&n| n as f64 * grid.dt()).collect())
        }
    };
    let batch = solve_batch(cfg, cfg.u64("seed")?, &snaps, workers)?;
    let est = holder_slope(&batch.items, direction, t0, &lags)?;
    let target = match direction {
        Direction::Space => p.alpha() - 1.0,
        Direction::Time => (p.alpha() - 1.0) / p.alpha(),
    };
    let mut curve = Curve::new(&["lag", "mean_square"]);
    for (l, m) in est.lags.iter().zip(&est.mean_square) {
        curve.push(vec![*l, *m]);
    }
    rep.curves.insert("holder".into(), curve);
    rep.stat(
        "slope",
        Stat {
            value: est.slope,
            stderr: est.stderr,
            replicas: est.replicas,
        },
    );
    rep.at_most("slope_deviation", (est.slope - target).abs(), cfg.f64("slope_tol")?);
    record_failures(rep, cfg, batch.failed, cfg.usize("replicas")?)
}

fn log_fields(batch: &[Trajectory]) -> Result<Vec<FieldSample>> {
    batch
        .iter()
        .map(|tr| Ok(hopf_cole(tr)?.pop().expect("one snapshot").transformed))
        .collect()
}

fn run_kpz(cfg: &RunConfig, which: &str, workers: usize, rep: &mut ExperimentReport) -> Result<()> {
    let p = cfg.params()?;
    if p.alpha() != 2.0 || !matches!(cfg.sigma()?, Sigma::Identity) {
        return Err(cfg_err("kpz experiments need alpha = 2 and sigma = identity"));
    }
    let one = Sigma::Constant(1.0);
    let t = cfg.f64("t")?;
    match which {
        "ratio" => {
            let (_, batch) = coupled_batch(cfg, workers)?;
            let stabilized = batch
                .items
                .iter()
                .map(|r| {
                    let x = stabilize(&r.u, &Sigma::Identity)?;
                    Ok(CoupledSample {
                        u: x.transformed,
                        ..r.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            exceedance_report(rep, cfg, &stabilized, p, &one)?;
            record_failures(rep, cfg, batch.failed, cfg.usize("replicas")?)
        }
        "lil" => {
            let batch = solve_batch(cfg, cfg.u64("seed")?, &[t], workers)?;
            lil_report(rep, cfg, &log_fields(&batch.items)?, p, &one)?;
            record_failures(rep, cfg, batch.failed, cfg.usize("replicas")?)
        }
        "clt" => {
            let batch = solve_batch(cfg, cfg.u64("seed")?, &[t], workers)?;
            let seeds: Vec<u64> = batch.items.iter().map(|tr| tr.seed).collect();
            let law = ReferenceLaw::Gaussian { sd: frak_a(p) };
            clt_report(rep, cfg, &log_fields(&batch.items)?, &seeds, &law, &[], p)?;
            record_failures(rep, cfg, batch.failed, cfg.usize("replicas")?)
        }
        "qv" => {
            let batch = solve_batch(cfg, cfg.u64("seed")?, &[t], workers)?;
            variation_report(rep, cfg, &log_fields(&batch.items)?, p, &one)?;
            record_failures(rep, cfg, batch.failed, cfg.usize("replicas")?)
        }
        other => Err(cfg_err(format!("unknown kpz experiment '{other}'"))),
    }
}

/// Run the configured experiment.
pub fn run(cfg: &RunConfig, workers: usize) -> Result<ExperimentReport> {
    let start = Instant::now();
    let name = cfg.str("experiment")?;
    let mut rep = ExperimentReport::new(&name);
    rep.config = cfg.echo();
    rep.config.insert("config_hash".into(), cfg.hash());
    match name.as_str() {
        "ratio" => run_ratio(cfg, workers, &mut rep)?,
        "lil" => run_lil(cfg, workers, &mut rep)?,
        "density" => run_density(cfg, workers, &mut rep)?,
        "clt" => run_clt(cfg, workers, &mut rep)?,
        "variation" => run_variation(cfg, workers, &mut rep)?,
        "localization" => run_localization(cfg, workers, &mut rep)?,
        "localization-u" => run_localization_u(cfg, workers, &mut rep)?,
        "holder" => run_holder(cfg, workers, &mut rep)?,
        kpz => run_kpz(cfg, kpz.trim_start_matches("kpz-"), workers, &mut rep)?,
    }
    rep.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(rep)
}

/// Write `<experiment>-<hash>.json` and one CSV per curve; returns the paths.
pub fn write_outputs(cfg: &RunConfig, rep: &ExperimentReport, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let stem = format!("{}-{}", rep.name, cfg.hash());
    let mut paths = Vec::new();
    let json = out.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(rep).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(&json, text + "\n")?;
    paths.push(json);
    for (name, curve) in &rep.curves {
        let path = out.join(format!("{stem}-{name}.csv"));
        std::fs::write(&path, curve.to_csv())?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_defaults_and_reject_unknown() {
        let cfg = RunConfig::parse("experiment = clt\n# comment\nalpha = 2\n").unwrap();
        assert_eq!(cfg.str("sigma").unwrap(), "bounded_smooth");
        assert_eq!(cfg.usize("n_time").unwrap(), 4096);
        assert!(cfg.echo().contains_key("lambda"));
        assert!(matches!(RunConfig::parse("experiment = clt\ncolour = red"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("experiment = nope"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::parse("experiment = clt\nreplicas = 0"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::parse("experiment = clt\nalpha").is_err());
        assert!(RunConfig::parse("experiment = clt\nsigma = weird").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::parse("experiment = clt").unwrap();
        let b = RunConfig::parse("experiment = clt\nseed = 2").unwrap();
        assert_eq!(a.hash().len(), 12);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::parse("experiment=clt").unwrap().hash());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Err(Error::Config("x".into()))), 2);
        assert_eq!(exit_code(&Err(Error::BlowUp { step: 1, magnitude: 1e9 })), 3);
        let mut r = ExperimentReport::new("x");
        assert_eq!(exit_code(&Ok(r.clone())), 0);
        r.at_most("c", 2.0, 1.0);
        assert_eq!(exit_code(&Ok(r)), 1);
    }

    #[test]
    fn small_runs_are_reproducible_across_workers() {
        let text = "experiment = variation\nsigma = constant(1)\nalpha = 2\nL = 2\ngrid_n = 128\nt = 0.5\nn_time = 2\nreplicas = 6\nn_level = 3\n";
        let cfg = RunConfig::parse(text).unwrap();
        let mut a = run(&cfg, 1).unwrap();
        let mut b = run(&cfg, 3).unwrap();
        a.runtime_seconds = 0.0;
        b.runtime_seconds = 0.0;
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let paths = write_outputs(&cfg, &a, dir.path()).unwrap();
        assert!(paths.iter().all(|p| p.to_string_lossy().contains(&cfg.hash())));
    }
}
