use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfg_core::bsde::game::solve_saddle_bsde;
use mfg_core::bsde::uncontrolled::solve_uncontrolled_pair;
use mfg_core::experiments::{
    cross_validate_limit, run_convergence, verify_saddle_and_uniqueness, write_csv, Study, MIN_FORWARD_REPS,
};
use mfg_core::forward::{sample_brownian_bundle, simulate_n_system, TimeGrid};
use mfg_core::model::{load_scenario_with_overrides, Scenario};
use mfg_core::numeric::fsum;
use mfg_core::rng::RandomStream;
use mfg_core::Error;
use serde_json::{json, Value};

const DEFAULT_N: usize = 16;
const DEFAULT_N_LIST: [usize; 4] = [8, 16, 32, 64];
/// Repetitions of the game and BSDE studies when `--reps` is absent.
const DEFAULT_GAME_REPS: usize = 2;

#[derive(Parser, Debug)]
#[command(name = "mfg", version, about = "Major-minor mean-field game solvers and convergence studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse and check a config, print the model constants.
    Validate(Common),
    /// Simulate the N-particle system.
    Forward {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
    },
    /// Solve the uncontrolled N-player BSDE and its limit on one bundle.
    Bsde {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
    },
    /// Solve the N-game saddle BSDE.
    Saddle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
    },
    /// Solve the limit BSDE on the grid and cross-check it against the limit game.
    Limit(Common),
    /// Run a convergence study in N.
    Converge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        study: Study,
        #[arg(long, value_delimiter = ',')]
        n_list: Option<Vec<usize>>,
        /// Outer samples (forward) or independent repetitions (other studies).
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Check the saddle and uniqueness inequalities under random perturbations.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        perturbations: usize,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
    },
}

#[derive(Args, Debug)]
struct Common {
    config: PathBuf,
    /// JSON report path; convergence studies also write a CSV next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value`, applied on top of the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. } | Error::MissingKey(_) | Error::OutOfRange { .. } | Error::Assumption(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Run(e.to_string()),
        }
    }
}

struct Loaded {
    scenario: Scenario,
    overrides: Vec<String>,
    out: Option<Outputs>,
}

struct Outputs {
    json: PathBuf,
    csv: PathBuf,
}

impl Outputs {
    fn new(out: &Path) -> Self {
        let json = if out.extension().is_some_and(|e| e == "csv") {
            out.with_extension("json")
        } else {
            out.to_path_buf()
        };
        Self {
            json,
            csv: out.with_extension("csv"),
        }
    }
}

fn load(common: &Common) -> Result<Loaded, Failure> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", common.config.display())))?;
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let scenario = load_scenario_with_overrides(&text, &overrides)?;
    scenario.validate()?;
    let out = common.out.as_deref().map(Outputs::new);
    if let Some(o) = &out {
        // Fail before a long run rather than after it.
        File::create(&o.json).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", o.json.display())))?;
    }
    Ok(Loaded {
        scenario,
        overrides,
        out,
    })
}

fn emit_json(out: Option<&Outputs>, value: &Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("reports serialise");
    match out {
        Some(o) => fs::write(&o.json, text + "\n")
            .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", o.json.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

/// Report for everything but the convergence studies.
fn envelope(command: &str, l: &Loaded, result: Value, pass: bool, failures: Vec<String>) -> Value {
    json!({
        "command": command,
        "seed": l.scenario.seed,
        "config_digest": l.scenario.digest(),
        "overrides": l.overrides,
        "pass": pass,
        "failures": failures,
        "result": result,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = fsum(v.iter().copied()) / n;
    let var = fsum(v.iter().map(|x| (x - m) * (x - m))) / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

fn validate(common: &Common) -> Result<bool, Failure> {
    let l = load(common)?;
    let s = &l.scenario;
    let m = &s.model;
    let (lambda, mu) = (m.lambda_mod(), m.mu_mod());
    let eps: Vec<Value> = DEFAULT_N_LIST.iter().map(|&n| json!({"N": n, "eps": s.eps_n(n)})).collect();
    let constants = json!({
        "lambda": lambda,
        "mu": mu,
        "uniqueness_modulus": (lambda * lambda - mu * mu) / lambda,
        "reduced_curvature": m.reduced_curvature(),
        "h": s.step(),
        "eps_schedule": eps,
        "conforming": s.is_conforming(),
    });
    println!("ok");
    println!("lambda = {lambda}, mu = {mu}, (lambda^2 - mu^2)/lambda = {}", (lambda * lambda - mu * mu) / lambda);
    println!("h = {}, conforming eps schedule: {}", s.step(), s.is_conforming());
    if l.out.is_some() {
        emit_json(l.out.as_ref(), &envelope("validate", &l, constants, true, vec![]))?;
    }
    Ok(true)
}

fn forward(common: &Common, n: usize) -> Result<bool, Failure> {
    let l = load(common)?;
    let s = &l.scenario;
    let grid = TimeGrid::from_scenario(s);
    let bundle = sample_brownian_bundle(&grid, n, s.mc_outer, &RandomStream::new(s.seed, "forward", 0));
    let paths = simulate_n_system(s, n, &bundle)?;
    let steps: Vec<Value> = (0..=grid.n_steps)
        .map(|i| {
            let x0: Vec<f64> = (0..paths.n_samples).map(|k| paths.path(k, 0)[i]).collect();
            let minors: Vec<f64> = (0..paths.n_samples)
                .map(|k| fsum((1..=n).map(|j| paths.path(k, j)[i])) / n as f64)
                .collect();
            let (m0, s0) = mean_std(&x0);
            let (mm, sm) = mean_std(&minors);
            json!({"t": grid.times[i], "x0_mean": m0, "x0_std": s0, "minor_avg_mean": mm, "minor_avg_std": sm})
        })
        .collect();
    let result = json!({"N": n, "samples": paths.n_samples, "steps": steps});
    emit_json(l.out.as_ref(), &envelope("forward", &l, result, true, vec![]))?;
    Ok(true)
}

fn bsde(common: &Common, n: usize) -> Result<bool, Failure> {
    let l = load(common)?;
    let s = &l.scenario;
    let grid = TimeGrid::from_scenario(s);
    let bundle = sample_brownian_bundle(&grid, n, s.mc_outer, &RandomStream::new(s.seed, "bsde", 0));
    let pair = solve_uncontrolled_pair(s, n, &bundle)?;
    let result = json!({
        "N": n,
        "y_n": pair.y_n_t(),
        "y_limit": pair.y_bar_t(),
        "statistics": pair.stats,
        "n_side": pair.n_side.diagnostics,
        "limit_side": pair.limit_side.diagnostics,
    });
    emit_json(l.out.as_ref(), &envelope("bsde", &l, result, true, vec![]))?;
    Ok(true)
}

fn saddle(common: &Common, n: usize) -> Result<bool, Failure> {
    let l = load(common)?;
    let s = &l.scenario;
    let grid = TimeGrid::from_scenario(s);
    let bundle = sample_brownian_bundle(&grid, n, s.mc_outer, &RandomStream::new(s.seed, "saddle", 0));
    let sol = solve_saddle_bsde(s, n, &bundle)?;
    let ctrl = sol.controls.as_ref().expect("saddle solve records controls");
    let u0: Vec<f64> = (0..sol.n_samples).map(|k| ctrl.u_at(k, 0)).collect();
    let v0: Vec<f64> = (0..sol.n_samples).map(|k| fsum(ctrl.v_at(k, 0).iter().copied()) / n as f64).collect();
    let result = json!({
        "N": n,
        "eps": s.eps_n(n),
        "y": sol.y0(),
        "u_start": mean_std(&u0).0,
        "v_start_avg": mean_std(&v0).0,
        "diagnostics": sol.diagnostics,
    });
    emit_json(l.out.as_ref(), &envelope("saddle", &l, result, true, vec![]))?;
    Ok(true)
}

fn limit(common: &Common) -> Result<bool, Failure> {
    let l = load(common)?;
    let check = cross_validate_limit(&l.scenario)?;
    let mut failures = Vec::new();
    if !check.pass {
        failures.push(format!(
            "grid and game limit values differ by {:e} > tol {:e}",
            check.diff, check.tol
        ));
    }
    let pass = check.pass;
    let result = serde_json::to_value(&check).expect("reports serialise");
    emit_json(l.out.as_ref(), &envelope("limit", &l, result, pass, failures))?;
    Ok(pass)
}

fn converge(common: &Common, study: Study, n_list: Option<Vec<usize>>, reps: Option<usize>) -> Result<bool, Failure> {
    let l = load(common)?;
    let n_list = n_list.unwrap_or_else(|| DEFAULT_N_LIST.to_vec());
    let reps = reps.unwrap_or(match study {
        Study::Forward => 5 * MIN_FORWARD_REPS,
        _ => DEFAULT_GAME_REPS,
    });
    let mut report = run_convergence(study, &l.scenario, &n_list, reps)?;
    report.overrides.clone_from(&l.overrides);
    match &l.out {
        Some(o) => {
            let f = File::create(&o.csv).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", o.csv.display())))?;
            write_csv(&report, BufWriter::new(f))?;
        }
        None => write_csv(&report, io::stderr().lock())?,
    }
    let pass = report.pass;
    emit_json(l.out.as_ref(), &serde_json::to_value(&report).expect("reports serialise"))?;
    match report.slope {
        Some(b) => eprintln!("{study}: slope {b:.3}, pass = {pass}"),
        None => eprintln!("{study}: no slope, pass = {pass}"),
    }
    Ok(pass)
}

fn verify(common: &Common, n: usize, perturbations: usize, delta: f64) -> Result<bool, Failure> {
    let l = load(common)?;
    let report = verify_saddle_and_uniqueness(&l.scenario, n, perturbations, delta)?;
    let failures: Vec<String> = report
        .violations
        .iter()
        .map(|v| format!("{:?} perturbation {}: margin {:e}", v.side, v.index, v.margin))
        .collect();
    let pass = report.pass;
    eprintln!("verify: {} checks, {} violations", report.checks.len(), report.violations.len());
    let result = serde_json::to_value(&report).expect("reports serialise");
    emit_json(l.out.as_ref(), &envelope("verify", &l, result, pass, failures))?;
    Ok(pass)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("MFG_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|t| *t > 0)
        .ok_or_else(|| Failure::Usage(format!("MFG_THREADS must be a positive integer, got `{raw}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Run(format!("cannot size the thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Failure> {
    configure_threads()?;
    match cli.command {
        Command::Validate(c) => validate(&c),
        Command::Forward { common, n } => forward(&common, n),
        Command::Bsde { common, n } => bsde(&common, n),
        Command::Saddle { common, n } => saddle(&common, n),
        Command::Limit(c) => limit(&c),
        Command::Converge {
            common,
            study,
            n_list,
            reps,
        } => converge(&common, study, n_list, reps),
        Command::Verify {
            common,
            n,
            perturbations,
            delta,
        } => verify(&common, n, perturbations, delta),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    };
    let _ = io::stdout().flush();
    ExitCode::from(code)
}
