use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use shegrad::constants::{cosine_integral, frak_a, frak_b, gauss_moment_c, rate_exponent_b, AlphaParams};
use shegrad::error::{Error, Result};
use shegrad::farm::resolve_workers;
use shegrad::fields::{coupled_f, LinearSampler};
use shegrad::grid::GridSpec;
use shegrad::kernels::{eval_increment_kernel, eval_kernel};
use shegrad::model::{ModelSpec, Profile, Sigma};
use shegrad::noise::NoiseLattice;
use shegrad::oracle::{evaluate, FormulaId};
use shegrad::runner::{exit_code, run, write_outputs, RunConfig};
use shegrad::solver::Solver;

/// Numerical laboratory for the fractional stochastic heat equation.
#[derive(Parser)]
#[command(name = "shegrad", version)]
struct Cli {
    /// Base seed; replica i uses seed + i.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: SHEGRAD_WORKERS, then the CPU count).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FieldArg {
    Z,
    S,
    F,
}

#[derive(Clone, Copy, ValueEnum)]
enum KpzKind {
    Ratio,
    Lil,
    Clt,
    Qv,
}

#[derive(Subcommand)]
enum Command {
    /// Print the derived constants for one alpha.
    Constants {
        #[arg(long)]
        alpha: f64,
    },
    /// Tabulate p_t(x), or p_t(x) - p_t(x - eps) when --eps is given.
    Kernel {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        t: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        x: Vec<f64>,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Evaluate one second-moment formula.
    Oracle {
        #[arg(long)]
        formula: String,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        n: Option<u32>,
    },
    /// Sample one linear field on a grid and write it as CSV.
    Sample {
        #[arg(long, value_enum)]
        field: FieldArg,
        #[arg(long)]
        alpha: f64,
        #[arg(long = "half-length", default_value_t = 1.0)]
        half_length: f64,
        #[arg(long = "grid-n", default_value_t = 128)]
        grid_n: usize,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long = "n-time", default_value_t = 64)]
        n_time: usize,
        /// t_ext / t for the smooth residual.
        #[arg(long = "t-ext-factor", default_value_t = 1048576.0)]
        t_ext_factor: f64,
        /// Finest lag in cells at which the residual tail is checked.
        #[arg(long = "min-lag", default_value_t = 4)]
        min_lag: usize,
    },
    /// Solve the nonlinear equation once and write u_t as CSV.
    Solve {
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value = "bounded_smooth")]
        sigma: String,
        #[arg(long, default_value = "0")]
        u0: String,
        #[arg(long = "half-length", default_value_t = 1.0)]
        half_length: f64,
        #[arg(long = "grid-n", default_value_t = 128)]
        grid_n: usize,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long = "n-time")]
        n_time: Option<usize>,
    },
    /// Run an experiment from a key = value configuration file.
    Experiment {
        config: PathBuf,
        /// Override one key, e.g. --set replicas=200.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run a transformed-field experiment for the parabolic Anderson model.
    Kpz {
        #[arg(value_enum)]
        kind: KpzKind,
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

enum Outcome {
    Done,
    Report(i32),
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn load_config(path: &Path, set: &[String], seed: Option<u64>, experiment: Option<&str>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(name) = experiment {
        cfg = cfg.with("experiment", name)?;
    }
    for kv in set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| config_error(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg = cfg.with(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg = cfg.with("seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn write_field(out: &Path, name: &str, grid: &GridSpec, values: &[f64]) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let path = out.join(name);
    let mut text = String::from("x,value\n");
    for (k, v) in values.iter().enumerate() {
        text.push_str(&format!("{},{}\n", grid.x(k), v));
    }
    std::fs::write(&path, text)?;
    Ok(path)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn execute(cli: Cli) -> Result<Outcome> {
    let seed = cli.seed.unwrap_or(1);
    match cli.command {
        Command::Constants { alpha } => {
            let p = AlphaParams::new(alpha)?;
            let ci = cosine_integral(p)?;
            print_json(&json!({
                "alpha": alpha,
                "hurst": p.hurst(),
                "variation_exponent": p.variation_exponent(),
                "frak_a": frak_a(p),
                "frak_b": frak_b(p),
                "gauss_moment_c": gauss_moment_c(p),
                "rate_exponent_b": rate_exponent_b(p),
                "cosine_integral": ci,
            }));
        }
        Command::Kernel { alpha, t, x, eps } => {
            let p = AlphaParams::new(alpha)?;
            let table = match eps {
                Some(e) => eval_increment_kernel(p, t, e, &x)?,
                None => eval_kernel(p, t, &x)?,
            };
            print_json(&serde_json::to_value(&table).map_err(|e| Error::Io(e.to_string()))?);
        }
        Command::Oracle {
            formula,
            alpha,
            t,
            eps,
            beta,
            n,
        } => {
            let id: FormulaId = formula.parse()?;
            let r = evaluate(id, AlphaParams::new(alpha)?, t, eps, beta, n)?;
            print_json(&serde_json::to_value(r).map_err(|e| Error::Io(e.to_string()))?);
        }
        Command::Sample {
            field,
            alpha,
            half_length,
            grid_n,
            t,
            n_time,
            t_ext_factor,
            min_lag,
        } => {
            let p = AlphaParams::new(alpha)?;
            let grid = GridSpec::new(half_length, grid_n, t, n_time)?;
            let sampler = LinearSampler::new(p, grid)?;
            let noise = NoiseLattice::new(grid, seed)?;
            let eps = min_lag as f64 * grid.dx();
            let z = || sampler.sample_z(&noise, t);
            let s = || -> Result<_> {
                let ext = noise.clone().extend_to(t_ext_factor * t)?;
                let plan = sampler.s_plan(&ext, t, t_ext_factor * t, eps)?;
                sampler.sample_s(&plan, &ext)
            };
            let (tag, sample) = match field {
                FieldArg::Z => ("z", z()?),
                FieldArg::S => ("s", s()?),
                FieldArg::F => ("f", coupled_f(&z()?, &s()?, p)?),
            };
            let path = write_field(&cli.out, &format!("sample-{tag}-seed{seed}.csv"), &grid, &sample.values)?;
            println!("{}", path.display());
        }
        Command::Solve {
            alpha,
            sigma,
            u0,
            half_length,
            grid_n,
            t,
            n_time,
        } => {
            let p = AlphaParams::new(alpha)?;
            let dx = 2.0 * half_length / grid_n as f64;
            let n_time = n_time.unwrap_or_else(|| ((t / dx.powf(alpha)) * (1.0 - 1e-12)).ceil().max(1.0) as usize);
            let grid = GridSpec::new(half_length, grid_n, t, n_time)?;
            let model = ModelSpec::new(p, Sigma::parse(&sigma)?, Profile::parse(&u0)?, t)?;
            let solver = Solver::new(model, grid)?;
            let traj = solver.solve(&NoiseLattice::new(grid, seed)?, &[t])?;
            let path = write_field(&cli.out, &format!("solve-seed{seed}.csv"), &grid, &traj.last().values)?;
            println!("{}", path.display());
        }
        Command::Experiment { config, set } => {
            let cfg = load_config(&config, &set, cli.seed, None)?;
            return report(&cfg, cli.workers, &cli.out);
        }
        Command::Kpz { kind, config, set } => {
            let name = match kind {
                KpzKind::Ratio => "kpz-ratio",
                KpzKind::Lil => "kpz-lil",
                KpzKind::Clt => "kpz-clt",
                KpzKind::Qv => "kpz-qv",
            };
            let cfg = load_config(&config, &set, cli.seed, Some(name))?;
            return report(&cfg, cli.workers, &cli.out);
        }
    }
    Ok(Outcome::Done)
}

fn report(cfg: &RunConfig, workers: Option<usize>, out: &Path) -> Result<Outcome> {
    let outcome = run(cfg, resolve_workers(workers));
    let code = exit_code(&outcome);
    let rep = outcome?;
    for path in write_outputs(cfg, &rep, out)? {
        println!("{}", path.display());
    }
    for c in &rep.criteria {
        println!(
            "{} {} value={} threshold={}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    Ok(Outcome::Report(code))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers == Some(0) {
        eprintln!("error: --workers must be positive");
        return ExitCode::from(2);
    }
    match execute(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Report(code)) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&Err(e)) as u8)
        }
    }
}
