//! Mild-form solver for the nonlinear equation.
//!
//! Each step freezes σ(u) at the start of the step and feeds the coefficients
//! of σ(u)·ξ into the same folded recursion as the linear sampler, so with
//! σ ≡ 1 and u0 ≡ 0 the output equals [`LinearSampler::sample_z`] bit for bit.
//!
//! [`LinearSampler::sample_z`]: crate::fields::LinearSampler::sample_z

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fields::{FieldKind, FieldSample};
use crate::grid::GridSpec;
use crate::model::ModelSpec;
use crate::noise::NoiseLattice;
use crate::special::CompensatedSum;
use crate::spectral::{FftPair, Propagator, C64};

/// Any |u| above this aborts the solve.
pub const BLOW_UP: f64 = 1e8;

#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub seed: u64,
    pub snapshots: Vec<FieldSample>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time_label).collect()
    }

    pub fn at(&self, t: f64) -> Option<&FieldSample> {
        let tol = 1e-9 * self.grid.dt();
        self.snapshots.iter().find(|s| (s.time_label - t).abs() <= tol)
    }

    pub fn last(&self) -> &FieldSample {
        self.snapshots.last().expect("trajectory has snapshots")
    }
}

/// State handed to an observer before step `step` is applied.
pub struct StepView<'a> {
    pub step: usize,
    pub t: f64,
    /// u at the start of the step.
    pub u: &'a [f64],
    /// σ(u) at the start of the step.
    pub sigma_u: &'a [f64],
    /// Noise increments of the row.
    pub xi: &'a [f64],
}

/// Precomputed plans for repeated solves of one model on one grid.
#[derive(Clone)]
pub struct Solver {
    model: ModelSpec,
    grid: GridSpec,
    prop: Propagator,
    fft: FftPair,
}

impl Solver {
    pub fn new(model: ModelSpec, grid: GridSpec) -> Result<Self> {
        if !model.sigma.is_constant() {
            grid.check_resolution(model.params)?;
        }
        Ok(Self {
            prop: Propagator::new(model.params, &grid)?,
            fft: FftPair::new(grid.n_space),
            model,
            grid,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
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

    fn snapshot_steps(&self, times: &[f64]) -> Result<Vec<usize>> {
        if times.is_empty() {
            return Err(invalid("at least one snapshot time is required"));
        }
        let steps = times
            .iter()
            .map(|&t| self.grid.time_index(t))
            .collect::<Result<Vec<_>>>()?;
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("snapshot times must be strictly increasing"));
        }
        if steps[steps.len() - 1] as f64 * self.grid.dt() > self.model.horizon * (1.0 + 1e-12) {
            return Err(invalid("snapshot beyond the model horizon"));
        }
        Ok(steps)
    }

    pub fn solve(&self, noise: &NoiseLattice, snapshot_times: &[f64]) -> Result<Trajectory> {
        self.run(noise, snapshot_times, None)
    }

    /// Solve while calling `observer` before every step.
    pub fn solve_observed(
        &self,
        noise: &NoiseLattice,
        snapshot_times: &[f64],
        observer: &mut dyn FnMut(&StepView<'_>),
    ) -> Result<Trajectory> {
        self.run(noise, snapshot_times, Some(observer))
    }

    fn run(
        &self,
        noise: &NoiseLattice,
        snapshot_times: &[f64],
        mut observer: Option<&mut dyn FnMut(&StepView<'_>)>,
    ) -> Result<Trajectory> {
        let ng = noise.grid();
        if !self.grid.same_space(ng) || (self.grid.dt() - ng.dt()).abs() > 1e-12 * self.grid.dt() {
            return Err(Error::GridMismatch(format!(
                "solver grid {:?} does not match noise grid {ng:?}",
                self.grid
            )));
        }
        let steps = self.snapshot_steps(snapshot_times)?;
        let n_final = *steps.last().unwrap();
        if n_final > ng.n_time {
            return Err(Error::OffLattice(snapshot_times[snapshot_times.len() - 1]));
        }
        let n = self.grid.n_space;
        let dt = self.grid.dt();
        let modes = self.prop.modes();
        let constant = match self.model.sigma {
            crate::model::Sigma::Constant(c) => Some(c),
            _ => None,
        };

        let mut u: Vec<f64> = self.grid.positions().iter().map(|&x| self.model.u0.eval(x)).collect();
        let mut scratch = u.clone();
        let mut y = vec![C64::new(0.0, 0.0); modes];
        self.fft.analyse(&mut scratch, &mut y);
        let mut c = y.clone();
        let mut eta = vec![C64::new(0.0, 0.0); modes];
        let mut coef = vec![C64::new(0.0, 0.0); modes];
        let mut row = vec![0.0; n];
        let mut sig = vec![0.0; n];
        let mut snapshots = Vec::with_capacity(steps.len());
        let mut next = 0;
        if steps[0] == 0 {
            snapshots.push(FieldSample::new(self.grid, 0.0, u.clone(), FieldKind::U)?);
            next = 1;
        }
        // u is current whenever constant σ is absent or an observer needs it
        let track = constant.is_none() || observer.is_some();

        for step in 0..n_final {
            noise.fill_row(step, &mut row);
            match constant {
                Some(k) => sig.iter_mut().for_each(|s| *s = k),
                None => self.model.sigma_field(&u, &mut sig)?,
            }
            if let Some(obs) = observer.as_deref_mut() {
                obs(&StepView {
                    step,
                    t: step as f64 * dt,
                    u: &u,
                    sigma_u: &sig,
                    xi: &row,
                });
            }
            match constant {
                Some(k) => {
                    for v in scratch.iter_mut().zip(&row) {
                        *v.0 = k * v.1;
                    }
                }
                None => {
                    for ((v, r), s) in scratch.iter_mut().zip(&row).zip(&sig) {
                        *v = s * r;
                    }
                }
            }
            self.fft.analyse(&mut scratch, &mut eta);
            self.prop.step(step, &mut y, &mut c, &eta);

            let snap = next < steps.len() && steps[next] == step + 1;
            if track || snap {
                coef.copy_from_slice(&c);
                self.fft.synthesise(&mut coef, &mut u);
                if let Some(bad) = u.iter().find(|v| !(v.abs() <= BLOW_UP)) {
                    return Err(Error::BlowUp {
                        step: step + 1,
                        magnitude: bad.abs(),
                    });
                }
            }
            if snap {
                snapshots.push(FieldSample::new(self.grid, (step + 1) as f64 * dt, u.clone(), FieldKind::U)?);
                next += 1;
            }
        }
        Ok(Trajectory {
            model: self.model.clone(),
            grid: self.grid,
            seed: noise.seed(),
            snapshots,
        })
    }
}

/// Solve once; see [`Solver`] for repeated use.
pub fn solve(model: &ModelSpec, noise: &NoiseLattice, snapshot_times: &[f64]) -> Result<Trajectory> {
    Solver::new(model.clone(), *noise.grid())?.solve(noise, snapshot_times)
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentBoundReport {
    pub k: u32,
    pub replicas: usize,
    pub times: Vec<f64>,
    /// sup over grid points of the empirical E|u_t(x)|^k, per snapshot.
    pub sup_moment: Vec<f64>,
    /// Standard error of the empirical moment at the maximising point.
    pub stderr: Vec<f64>,
    /// Overall sup over times.
    pub sup: f64,
    /// Ratio of the last to the first sup moment.
    pub trend: f64,
}

pub const MIN_MOMENT_REPLICAS: usize = 100;

/// Empirical k-th moments across a batch sharing grid and snapshot times.
pub fn moment_bound_check(batch: &[Trajectory], k: u32) -> Result<MomentBoundReport> {
    if k == 0 || k % 2 != 0 {
        return Err(invalid(format!("k must be a positive even integer, got {k}")));
    }
    if batch.len() < MIN_MOMENT_REPLICAS {
        return Err(Error::Insufficient(format!(
            "{} replicas, need at least {MIN_MOMENT_REPLICAS}",
            batch.len()
        )));
    }
    let times = batch[0].times();
    let n = batch[0].grid.n_space;
    for tr in batch {
        if tr.times() != times || tr.grid != batch[0].grid {
            return Err(Error::GridMismatch("trajectories differ in grid or snapshot times".into()));
        }
    }
    let r = batch.len() as f64;
    let mut sup_moment = Vec::new();
    let mut stderr = Vec::new();
    for (si, _) in times.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for x in 0..n {
            let mut s1 = CompensatedSum::new();
            let mut s2 = CompensatedSum::new();
            for tr in batch {
                let v = tr.snapshots[si].values[x].abs().powi(k as i32);
                s1.add(v);
                s2.add(v * v);
            }
            let m = s1.value() / r;
            let var = (s2.value() / r - m * m).max(0.0);
            if m > best.0 {
                best = (m, (var / r).sqrt());
            }
        }
        sup_moment.push(best.0);
        stderr.push(best.1);
    }
    let sup = sup_moment.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let trend = sup_moment[sup_moment.len() - 1] / sup_moment[0];
    Ok(MomentBoundReport {
        k,
        replicas: batch.len(),
        times,
        sup_moment,
        stderr,
        sup,
        trend,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Space,
    Time,
}

#[derive(Clone, Debug, Serialize)]
pub struct SlopeEstimate {
    pub slope: f64,
    pub stderr: f64,
    /// Lags in physical units.
    pub lags: Vec<f64>,
    /// E|Δu|² per lag.
    pub mean_square: Vec<f64>,
    pub replicas: usize,
}

pub const MIN_HOLDER_REPLICAS: usize = 1000;

/// Least-squares slope of log x against log y.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Hölder slope of log E|Δu|² against log(lag).
///
/// Space: increments of the snapshot at `t` over all grid points.
/// Time: u_{t + lag·dt}(x) - u_t(x) over all grid points; those snapshots must
/// exist. Lags are in cells (or steps). The standard error comes from a
/// 20-block jackknife over replicas.
pub fn holder_slope(batch: &[Trajectory], direction: Direction, t: f64, lags: &[usize]) -> Result<SlopeEstimate> {
    if batch.len() < MIN_HOLDER_REPLICAS {
        return Err(Error::Insufficient(format!(
            "{} replicas, need at least {MIN_HOLDER_REPLICAS}",
            batch.len()
        )));
    }
    let (&lo, &hi) = (lags.iter().min().unwrap_or(&0), lags.iter().max().unwrap_or(&0));
    if lags.len() < 2 || lo < 4 || hi < 8 * lo {
        return Err(Error::Insufficient(
            "lags must be at least 4 cells and span three dyadic levels".into(),
        ));
    }
    let grid = batch[0].grid;
    let per_replica: Vec<Vec<f64>> = batch
        .iter()
        .map(|tr| -> Result<Vec<f64>> {
            let base = tr.at(t).ok_or(Error::OffLattice(t))?;
            let n = base.values.len();
            lags.iter()
                .map(|&lag| {
                    let mut s = CompensatedSum::new();
                    match direction {
                        Direction::Space => {
                            for k in 0..n {
                                s.add(base.increment(k, lag).powi(2));
                            }
                        }
                        Direction::Time => {
                            let t2 = t + lag as f64 * grid.dt();
                            let later = tr.at(t2).ok_or(Error::OffLattice(t2))?;
                            for k in 0..n {
                                s.add((later.values[k] - base.values[k]).powi(2));
                            }
                        }
                    }
                    Ok(s.value() / n as f64)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let unit = match direction {
        Direction::Space => grid.dx(),
        Direction::Time => grid.dt(),
    };
    let phys: Vec<f64> = lags.iter().map(|&l| l as f64 * unit).collect();
    let mean_over = |skip: Option<std::ops::Range<usize>>| -> Vec<f64> {
        (0..lags.len())
            .map(|j| {
                let mut s = CompensatedSum::new();
                let mut cnt = 0usize;
                for (i, r) in per_replica.iter().enumerate() {
                    if skip.as_ref().is_some_and(|sk| sk.contains(&i)) {
                        continue;
                    }
                    s.add(r[j]);
                    cnt += 1;
                }
                s.value() / cnt as f64
            })
            .collect()
    };
    let mean_square = mean_over(None);
    let slope = log_log_slope(&phys, &mean_square);
    let blocks = 20usize;
    let size = batch.len().div_ceil(blocks);
    let jack: Vec<f64> = (0..blocks)
        .map(|b| log_log_slope(&phys, &mean_over(Some(b * size..((b + 1) * size).min(batch.len())))))
        .collect();
    let jm = jack.iter().sum::<f64>() / blocks as f64;
    let stderr = ((blocks - 1) as f64 / blocks as f64 * jack.iter().map(|v| (v - jm).powi(2)).sum::<f64>()).sqrt();
    Ok(SlopeEstimate {
        slope,
        stderr,
        lags: phys,
        mean_square,
        replicas: batch.len(),
    })
}
