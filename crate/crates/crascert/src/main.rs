//! Command-line front end: solve, refine, and inspect certificates for
//! problems stored as JSON files.
//!
//! Exit codes: 0 success, 2 input error, 3 solver failure, 4 validation
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crascert::error::Error;
use crascert::sdp::SdpOptions;
use crascert::spec::{Certificate, ObjectiveMode, SafetySpec, SolveConfig, SystemSpec};
use crascert::synth::{
    compile_initial, compile_safety, run_alg1, solve_initial, solve_safety, IterationConfig,
    StateSampling,
};
use crascert::validate::{
    estimate_volume, levelset_csv, positive_interval, simulate_greedy, validate_reach_avoid,
    validate_safety, Verdict,
};

#[derive(Parser)]
#[command(name = "crascert", version, about = "Certified reach-avoid and safety synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the initial reach-avoid program under the uniform input law
    Init(InitArgs),
    /// Run the iterative enlargement loop
    Iterate(IterateArgs),
    /// Synthesize a barrier certificate for a safety problem
    Safety(SafetyArgs),
    /// Estimate the volume of a stored certificate's certified set
    Volume(VolumeArgs),
    /// Roll out the greedy policy from an initial state
    Simulate(SimulateArgs),
    /// Export a CSV grid of a certificate polynomial over the safe set
    Levelset(LevelsetArgs),
}

#[derive(Args, Serialize, Clone)]
struct SolveArgs {
    /// Problem file (JSON)
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for the manifest and result artifacts
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed for sampling objectives, volume estimates, and validation
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Degree of the certificate polynomial
    #[arg(long, default_value_t = 4)]
    deg_v: u32,
    /// Degree of the SOS multipliers
    #[arg(long, default_value_t = 8)]
    deg_s: u32,
    /// Override the decay rate from the problem file
    #[arg(long)]
    lambda: Option<f64>,
    /// Monte Carlo samples for volume estimates
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    /// Box bound on certificate and multiplier coefficients
    #[arg(long, default_value_t = 1000.0)]
    coeff_bound: f64,
    /// Objective: closed-form integral or a sampled sum
    #[arg(long, value_enum, default_value_t = Objective::Closed)]
    objective: Objective,
    /// Embedded interior-point solver, or write an SDPA sparse file and stop
    #[arg(long, value_enum, default_value_t = Solver::Embedded)]
    solver: Solver,
}

#[derive(Args, Serialize, Clone)]
struct InitArgs {
    #[command(flatten)]
    solve: SolveArgs,
}

#[derive(Args, Serialize, Clone)]
struct IterateArgs {
    #[command(flatten)]
    solve: SolveArgs,
    /// Degree of the fitted controller
    #[arg(long, default_value_t = 2)]
    deg_u: u32,
    /// Initial exploration weight ε₀
    #[arg(long, default_value_t = 0.3)]
    eps0: f64,
    /// Multiplicative ε decay per iteration
    #[arg(long, default_value_t = 0.5)]
    eps_factor: f64,
    /// Half-width of the uniform window around the fitted controller
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Number of refinement iterations
    #[arg(long, default_value_t = 5)]
    iters: usize,
    /// State samples per axis for the controller fit
    #[arg(long, default_value_t = 20)]
    grid: usize,
    /// Draw this many random states instead of a grid
    #[arg(long, conflicts_with = "grid")]
    random_states: Option<usize>,
    /// Control grid points per input axis
    #[arg(long, default_value_t = 5)]
    controls: usize,
    /// Greedy baseline: substitute the fitted controller directly (ε = δ = 0)
    #[arg(long, default_value_t = false)]
    greedy: bool,
}

#[derive(Args, Serialize, Clone)]
struct SafetyArgs {
    #[command(flatten)]
    solve: SolveArgs,
}

#[derive(Args, Serialize, Clone)]
struct VolumeArgs {
    /// Problem file (JSON)
    #[arg(long)]
    spec: PathBuf,
    /// Certificate file produced by init/iterate
    #[arg(long)]
    cert: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
}

#[derive(Args, Serialize, Clone)]
struct SimulateArgs {
    /// Problem file (JSON)
    #[arg(long)]
    spec: PathBuf,
    /// Certificate file produced by init/iterate
    #[arg(long)]
    cert: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Initial state, comma-separated
    #[arg(long, value_delimiter = ',', required = true)]
    x0: Vec<f64>,
    /// Maximum number of steps
    #[arg(long, default_value_t = 100_000)]
    horizon: usize,
    /// Control grid points per input axis
    #[arg(long, default_value_t = 101)]
    controls: usize,
}

#[derive(Args, Serialize, Clone)]
struct LevelsetArgs {
    /// Problem file (JSON)
    #[arg(long)]
    spec: PathBuf,
    /// Certificate file produced by init/iterate
    #[arg(long)]
    cert: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grid points per axis
    #[arg(long, default_value_t = 101)]
    grid: usize,
}

#[derive(ValueEnum, Serialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum Objective {
    Closed,
    Sample,
}

#[derive(ValueEnum, Serialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum Solver {
    Embedded,
    SdpaFile,
}

/// Everything needed to reproduce a run, persisted verbatim to the output
/// directory before any solving starts.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: serde_json::Value,
}

fn exit_for(e: &Error) -> ExitCode {
    match e {
        Error::Solver(_) => ExitCode::from(3),
        Error::Residual(_) | Error::Validation(_) => ExitCode::from(4),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match &cli.command {
        Command::Init(a) => cmd_init(a),
        Command::Iterate(a) => cmd_iterate(a),
        Command::Safety(a) => cmd_safety(a),
        Command::Volume(a) => cmd_volume(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Levelset(a) => cmd_levelset(a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}

fn write_manifest(
    out: &Option<PathBuf>,
    command: &str,
    args: &impl Serialize,
) -> Result<(), Error> {
    let Some(dir) = out else { return Ok(()) };
    std::fs::create_dir_all(dir)?;
    let manifest = RunManifest {
        command: command.to_string(),
        args: serde_json::to_value(args)?,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn write_artifact(out: &Option<PathBuf>, name: &str, text: &str) -> Result<(), Error> {
    if let Some(dir) = out {
        std::fs::write(dir.join(name), text)?;
    }
    Ok(())
}

fn solve_config(a: &SolveArgs) -> SolveConfig {
    SolveConfig {
        deg_v: a.deg_v,
        deg_multipliers: a.deg_s,
        coeff_bound: a.coeff_bound,
        objective_mode: match a.objective {
            Objective::Closed => ObjectiveMode::ClosedForm,
            Objective::Sample => ObjectiveMode::SampleSum,
        },
        rng_seed: a.seed,
        ..SolveConfig::default()
    }
}

fn load_system(a: &SolveArgs) -> Result<SystemSpec, Error> {
    let mut spec = SystemSpec::load(&a.spec)?;
    if let Some(l) = a.lambda {
        if l <= 1.0 {
            return Err(Error::invariant("lambda", "override must exceed 1"));
        }
        spec.lambda = l;
    }
    Ok(spec)
}

/// Validation samples per region for the post-solve certificate check.
const VALIDATE_SAMPLES: usize = 10_000;
const VALIDATE_TOL: f64 = 1e-6;

fn report_interval(v: &crascert::Polynomial, spec: &SystemSpec) {
    if spec.n() != 1 {
        return;
    }
    let b = spec
        .safe_set()
        .map(|s| (s.bounding_box[0].lo, s.bounding_box[0].hi));
    if let Ok((lo, hi)) = b {
        match positive_interval(v, lo, hi, 10_000) {
            Some((a, b)) => println!("certified interval: ({a:.4}, {b:.4})"),
            None => println!("certified interval: empty"),
        }
    }
}

fn cmd_init(a: &InitArgs) -> Result<(), Error> {
    write_manifest(&a.solve.out, "init", a)?;
    let spec = load_system(&a.solve)?;
    let cfg = solve_config(&a.solve);
    if a.solve.solver == Solver::SdpaFile {
        let text = compile_initial(&spec, &cfg)?.to_sparse_text();
        write_artifact(&a.solve.out, "problem.dat-s", &text)?;
        if a.solve.out.is_none() {
            print!("{text}");
        }
        return Ok(());
    }
    let mut syn = solve_initial(&spec, &cfg, &SdpOptions::default())?;
    let vol = estimate_volume(&syn.v, &spec, a.solve.samples, a.solve.seed)?;
    syn.certificate.gamma = Some(vol.gamma);
    write_artifact(&a.solve.out, "certificate.json", &syn.certificate.to_json())?;
    println!(
        "status: {}  objective: {:.6e}  gamma: {:.4} (±{:.4})",
        syn.certificate.status,
        syn.certificate.objective.unwrap_or(f64::NAN),
        vol.gamma,
        2.0 * vol.std_error
    );
    report_interval(&syn.v, &spec);
    let report = validate_reach_avoid(
        &syn.certificate,
        &spec,
        VALIDATE_SAMPLES,
        VALIDATE_TOL,
        a.solve.seed,
    )?;
    if !report.pass() {
        return Err(Error::Validation(format!(
            "certificate check failed: worst margin {:.3e}",
            report.worst()
        )));
    }
    println!("validation: pass (worst margin {:.3e})", report.worst());
    Ok(())
}

#[derive(Serialize)]
struct IterationRow {
    iter: usize,
    epsilon: f64,
    gamma: Option<f64>,
    status: String,
}

fn cmd_iterate(a: &IterateArgs) -> Result<(), Error> {
    write_manifest(&a.solve.out, "iterate", a)?;
    let spec = load_system(&a.solve)?;
    let mut cfg = solve_config(&a.solve);
    cfg.deg_controller = a.deg_u;
    if a.solve.solver == Solver::SdpaFile {
        return Err(Error::invariant(
            "solver",
            "the refinement loop needs solver feedback; sdpa-file export is \
             available through `init` and `safety`",
        ));
    }
    let it = IterationConfig {
        iters: a.iters,
        eps0: a.eps0,
        eps_factor: a.eps_factor,
        delta: a.delta,
        sampling: match a.random_states {
            Some(n) => StateSampling::Random(n),
            None => StateSampling::Grid(a.grid),
        },
        m_controls: a.controls,
        volume_samples: a.solve.samples,
        seed: a.solve.seed,
        greedy: a.greedy,
    };
    let result = run_alg1(&spec, &cfg, &it, &SdpOptions::default())?;
    write_artifact(&a.solve.out, "initial.json", &result.initial.to_json())?;
    write_artifact(
        &a.solve.out,
        "final.json",
        &result.final_certificate.to_json(),
    )?;
    let rows: Vec<IterationRow> = result
        .records
        .iter()
        .map(|r| IterationRow {
            iter: r.iter,
            epsilon: r.epsilon,
            gamma: r.gamma,
            status: r.status.clone(),
        })
        .collect();
    write_artifact(
        &a.solve.out,
        "iterations.json",
        &serde_json::to_string_pretty(&rows)?,
    )?;
    println!(
        "initial gamma: {:.4}",
        result.initial.gamma.unwrap_or(f64::NAN)
    );
    for r in &result.records {
        match r.gamma {
            Some(g) => println!("iter {}: eps={:.4} gamma={:.4} [{}]", r.iter, r.epsilon, g, r.status),
            None => println!("iter {}: eps={:.4} {}", r.iter, r.epsilon, r.status),
        }
    }
    println!(
        "final gamma: {:.4}  union gamma: {:.4}",
        result.final_certificate.gamma.unwrap_or(f64::NAN),
        result.union_gamma
    );
    let v = result.final_certificate.v_poly(&spec.state_vars)?;
    report_interval(&v, &spec);
    let report = validate_reach_avoid(
        &result.final_certificate,
        &spec,
        VALIDATE_SAMPLES,
        VALIDATE_TOL,
        a.solve.seed,
    )?;
    if !report.pass() {
        return Err(Error::Validation(format!(
            "final certificate check failed: worst margin {:.3e}",
            report.worst()
        )));
    }
    println!("validation: pass (worst margin {:.3e})", report.worst());
    Ok(())
}

fn cmd_safety(a: &SafetyArgs) -> Result<(), Error> {
    write_manifest(&a.solve.out, "safety", a)?;
    let mut spec = SafetySpec::load(&a.solve.spec)?;
    if let Some(l) = a.solve.lambda {
        if l <= 0.0 || l >= 1.0 {
            return Err(Error::invariant("lambda", "override must lie in (0, 1)"));
        }
        spec.lambda = l;
    }
    let cfg = solve_config(&a.solve);
    if a.solve.solver == Solver::SdpaFile {
        let text = compile_safety(&spec, &cfg)?.to_sparse_text();
        write_artifact(&a.solve.out, "problem.dat-s", &text)?;
        if a.solve.out.is_none() {
            print!("{text}");
        }
        return Ok(());
    }
    let syn = solve_safety(&spec, &cfg, &SdpOptions::default())?;
    write_artifact(&a.solve.out, "certificate.json", &syn.certificate.to_json())?;
    println!(
        "status: {}  objective: {:.6e}",
        syn.certificate.status,
        syn.certificate.objective.unwrap_or(f64::NAN)
    );
    let report = validate_safety(
        &syn.certificate,
        &spec,
        VALIDATE_SAMPLES,
        VALIDATE_TOL,
        a.solve.seed,
    )?;
    if !report.pass() {
        return Err(Error::Validation(format!(
            "barrier check failed: worst margin {:.3e}",
            report.worst()
        )));
    }
    println!("validation: pass (worst margin {:.3e})", report.worst());
    Ok(())
}

fn cmd_volume(a: &VolumeArgs) -> Result<(), Error> {
    write_manifest(&a.out, "volume", a)?;
    let spec = SystemSpec::load(&a.spec)?;
    let cert = Certificate::load(&a.cert)?;
    let v = cert.v_poly(&spec.state_vars)?;
    let vol = estimate_volume(&v, &spec, a.samples, a.seed)?;
    println!(
        "gamma: {:.6} (±{:.6}, {} samples, seed {})",
        vol.gamma,
        2.0 * vol.std_error,
        vol.n_samples,
        vol.seed
    );
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "gamma": vol.gamma,
        "std_error": vol.std_error,
        "n_samples": vol.n_samples,
        "seed": vol.seed,
    }))?;
    write_artifact(&a.out, "volume.json", &text)?;
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), Error> {
    write_manifest(&a.out, "simulate", a)?;
    let spec = SystemSpec::load(&a.spec)?;
    let cert = Certificate::load(&a.cert)?;
    let v = cert.v_poly(&spec.state_vars)?;
    if a.x0.len() != spec.n() {
        return Err(Error::invariant(
            "x0",
            format!("expected {} coordinates, got {}", spec.n(), a.x0.len()),
        ));
    }
    let traj = simulate_greedy(&v, &spec, &a.x0, a.horizon, a.controls)?;
    let verdict = match traj.verdict {
        Verdict::Reached => "reached",
        Verdict::LeftSafe => "left-safe",
        Verdict::HorizonExhausted => "horizon-exhausted",
    };
    println!("verdict: {verdict} after {} steps", traj.states.len() - 1);
    if a.out.is_some() {
        let mut csv = String::new();
        for var in &spec.state_vars {
            csv.push_str(var);
            csv.push(',');
        }
        csv.pop();
        csv.push('\n');
        for s in &traj.states {
            let row: Vec<String> = s.iter().map(|c| c.to_string()).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        write_artifact(&a.out, "trajectory.csv", &csv)?;
    }
    if traj.verdict != Verdict::Reached {
        return Err(Error::Validation(format!(
            "greedy rollout did not reach the target ({verdict})"
        )));
    }
    Ok(())
}

fn cmd_levelset(a: &LevelsetArgs) -> Result<(), Error> {
    write_manifest(&a.out, "levelset", a)?;
    let spec = SystemSpec::load(&a.spec)?;
    let cert = Certificate::load(&a.cert)?;
    let v = cert.v_poly(&spec.state_vars)?;
    let csv = levelset_csv(&v, &spec, a.grid)?;
    match &a.out {
        Some(_) => write_artifact(&a.out, "levelset.csv", &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
