use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use convex_nmpc::config::{BuiltProblem, LoadedConfig};
use convex_nmpc::model::{validate_universe, Certificate, ValidationReport};
use convex_nmpc::scenario::{PrunedTree, ScenarioEngine, SolveResult};
use convex_nmpc::simulate::ClosedLoop;
use convex_nmpc::Error;

/// Exact NMPC by convex scenario decomposition.
#[derive(Debug, Parser)]
#[command(name = "convex-nmpc", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for generated networks (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for scenario solves and sampling.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Certify the partitions and the input box.
    Validate,
    /// Eliminate scenarios infeasible for every initial state.
    Prune,
    /// Solve the NMPC problem at one state.
    Solve {
        /// Comma-separated state.
        #[arg(long, alias = "x0", value_parser = parse_vector, allow_hyphen_values = true)]
        state: DVector<f64>,
    },
    /// Closed-loop simulation.
    Simulate {
        /// Comma-separated initial state.
        #[arg(long, alias = "state", value_parser = parse_vector, allow_hyphen_values = true)]
        x0: DVector<f64>,
        #[arg(long, default_value_t = 100)]
        steps: usize,
    },
    /// Evaluate the controller on a regular grid over the state set.
    Sample {
        /// Points per axis.
        #[arg(long, default_value_t = 41)]
        grid: usize,
    },
}

fn parse_vector(s: &str) -> Result<DVector<f64>, String> {
    let vals = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if vals.iter().any(|v| !v.is_finite()) {
        return Err("entries must be finite".into());
    }
    Ok(DVector::from_vec(vals))
}

/// Exit status plus message.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InfeasibleState { .. } | Error::StateOutsideX(_) => 2,
            Error::MaxIter(_)
            | Error::NumericalFailure(_)
            | Error::Scenario { .. }
            | Error::NoConvergence(_)
            | Error::SingularInnerMatrix
            | Error::BudgetExceeded { .. } => 3,
            _ => 1,
        };
        Failure(code, e.to_string())
    }
}

struct Context {
    loaded: LoadedConfig,
    hash: String,
    out: PathBuf,
}

impl Context {
    fn new(common: &Common) -> Result<Self, Failure> {
        let path = common
            .config
            .as_deref()
            .ok_or_else(|| Failure(1, "--config is required".into()))?;
        let mut loaded = LoadedConfig::load(path)?;
        if let Some(seed) = common.seed {
            loaded = loaded.with_seed(seed);
        }
        let hash = loaded.hash();
        let out = common
            .out
            .clone()
            .or_else(|| loaded.output_dir())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self { loaded, hash, out })
    }

    fn build(&self) -> Result<BuiltProblem, Failure> {
        Ok(self.loaded.build()?)
    }

    fn engine(&self) -> Result<ScenarioEngine, Failure> {
        let built = self.build()?;
        let (engine, _) = built
            .benchmark
            .into_engine(&self.loaded.config.engine_options())?;
        Ok(engine)
    }

    fn pruned_path(&self) -> PathBuf {
        self.out.join("pruned.json")
    }

    /// The persisted tree when it matches this configuration, otherwise every scenario.
    fn pruned(&self, engine: &ScenarioEngine) -> Result<PrunedTree, Failure> {
        let path = self.pruned_path();
        if path.exists() {
            if let Some(tree) = PrunedTree::load(&path, &self.hash)? {
                return Ok(tree);
            }
            eprintln!("note: {} belongs to another configuration; not using it", path.display());
        } else {
            eprintln!("note: no pruned tree at {}; enumerating all scenarios", path.display());
        }
        Ok(PrunedTree::unpruned(engine.horizon(), engine.s())?)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, Failure> {
        std::fs::create_dir_all(&self.out).map_err(|e| Failure(1, format!("{}: {e}", self.out.display())))?;
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| Failure(1, format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

#[derive(Serialize)]
struct ValidateRecord<'a> {
    config_hash: &'a str,
    report: &'a ValidationReport,
    x_eq: Option<Vec<f64>>,
    u_eq: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct SolveRecord<'a> {
    config_hash: &'a str,
    state: Vec<f64>,
    result: &'a SolveResult,
}

fn json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn check_dim(x: &DVector<f64>, n: usize) -> Result<(), Failure> {
    if x.len() != n {
        return Err(Failure(1, format!("state has {} entries, the system has {n}", x.len())));
    }
    Ok(())
}

fn validate(ctx: &Context) -> Result<(), Failure> {
    let built = ctx.build()?;
    let b = &built.benchmark;
    let report = validate_universe(&b.model, &b.universe, &ctx.loaded.config.validation);
    let record = ValidateRecord {
        config_hash: &ctx.hash,
        report: &report,
        x_eq: built.x_eq.as_ref().map(|v| v.iter().copied().collect()),
        u_eq: built.u_eq.as_ref().map(|v| v.iter().copied().collect()),
    };
    let path = ctx.write("validate.json", &json(&record))?;
    println!("config_hash {}", ctx.hash);
    println!("partitions {}", report.s);
    for (j, row) in report.certificates.iter().enumerate() {
        let cases: Vec<String> = row
            .iter()
            .map(|c| match c {
                Some(Certificate::Certified(case)) => format!("{case:?}"),
                Some(Certificate::Reject { sign: Some(case), .. }) => format!("{case:?}(sign-only)"),
                Some(Certificate::Reject { reason, .. }) => format!("rejected({reason:?})"),
                None => "unchecked".to_string(),
            })
            .collect();
        println!("X_{} {}", j + 1, cases.join(" "));
    }
    for w in &report.warnings {
        println!("warning: {}", w.message);
    }
    for f in &report.failures {
        println!("failure: {}", f.message);
    }
    println!("report {}", path.display());
    if report.passed {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure(1, "validation failed".into()))
    }
}

fn prune(ctx: &Context) -> Result<(), Failure> {
    let engine = ctx.engine()?;
    let mut tree = engine.prune()?;
    tree.config_hash = ctx.hash.clone();
    let path = ctx.pruned_path();
    std::fs::create_dir_all(&ctx.out).map_err(|e| Failure(1, e.to_string()))?;
    tree.save(&path)?;
    let total = (engine.s() as u64).pow(engine.horizon() as u32);
    println!("config_hash {}", ctx.hash);
    println!("scenarios {total}");
    println!("feasible {}", tree.feasible.len());
    println!("feasible_without_terminal {}", tree.feasible_without_terminal.len());
    println!("nodes_visited {}", tree.stats.nodes_visited);
    println!("subtrees_eliminated {}", tree.stats.subtrees_eliminated);
    println!("scenarios_eliminated {}", tree.stats.scenarios_eliminated);
    println!("pruned {}", path.display());
    Ok(())
}

fn solve(ctx: &Context, state: &DVector<f64>) -> Result<(), Failure> {
    let engine = ctx.engine()?;
    check_dim(state, engine.model().n())?;
    let tree = ctx.pruned(&engine)?;
    let result = engine.solve_state(state, &tree)?;
    let record = SolveRecord {
        config_hash: &ctx.hash,
        state: state.iter().copied().collect(),
        result: &result,
    };
    let path = ctx.write("solve.json", &json(&record))?;
    println!("config_hash {}", ctx.hash);
    println!("status {:?}", result.status);
    if result.is_feasible() {
        println!("value {:e}", result.value);
        println!("mu_star {}", result.mu_star.unwrap_or(0));
        println!("eps_star {:?}", result.eps_star);
        println!("v0 {:?}", result.v0);
        println!("u0 {:?}", result.u0);
    }
    println!("record {}", path.display());
    if result.is_feasible() {
        Ok(())
    } else {
        Err(Failure(2, "no scenario is feasible at this state".into()))
    }
}

fn simulate(ctx: &Context, x0: &DVector<f64>, steps: usize) -> Result<(), Failure> {
    let engine = ctx.engine()?;
    check_dim(x0, engine.model().n())?;
    let tree = ctx.pruned(&engine)?;
    let cl = ClosedLoop::new(&engine, &tree, ctx.loaded.config.simulation_options());
    let traj = cl.run(x0, steps)?;
    let csv = format!("# config_hash={}\n{}", ctx.hash, traj.to_csv());
    let path = ctx.write("trajectory.csv", &csv)?;
    println!("config_hash {}", ctx.hash);
    println!("stop {:?}", traj.stop);
    println!("records {}", traj.records.len());
    let last = traj.final_state.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    println!("final_inf_norm {last:e}");
    println!("trajectory {}", path.display());
    match traj.stop {
        convex_nmpc::simulate::StopReason::Infeasible => Err(Failure(2, "closed loop reached an infeasible state".into())),
        convex_nmpc::simulate::StopReason::BudgetExceeded => Err(Failure(3, "controller exceeded its step budget".into())),
        _ => Ok(()),
    }
}

const MAX_SAMPLES: usize = 1_000_000;

fn sample(ctx: &Context, grid: usize) -> Result<(), Failure> {
    let engine = ctx.engine()?;
    let (n, m) = (engine.model().n(), engine.model().m());
    let state_set = &engine.universe().state_set;
    let (lo, hi) = state_set
        .bounding_box()
        .ok_or_else(|| Failure(1, "state set is unbounded".into()))?;
    let count = (grid as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if grid < 2 || count > MAX_SAMPLES as u128 {
        return Err(Failure(1, format!("grid must be at least 2 and at most {MAX_SAMPLES} points in total")));
    }
    let tree = ctx.pruned(&engine)?;
    let points: Vec<DVector<f64>> = (0..count as usize)
        .map(|mut idx| {
            DVector::from_fn(n, |i, _| {
                let k = idx % grid;
                idx /= grid;
                lo[i] + (hi[i] - lo[i]) * k as f64 / (grid - 1) as f64
            })
        })
        .collect();
    let rows: Vec<String> = points
        .par_iter()
        .map(|x| -> Result<String, Error> {
            let mut row = String::new();
            for v in x.iter() {
                let _ = write!(row, "{v:e},");
            }
            if !state_set.contains(x, 1e-12) {
                row.push_str(&",".repeat(m + 1));
                row.push_str(",0");
                return Ok(row);
            }
            let res = engine.solve_state(x, &tree)?;
            match res.mu_star {
                Some(mu) => {
                    let _ = write!(row, "{:e}", res.value);
                    for u in &res.u0 {
                        let _ = write!(row, ",{u:e}");
                    }
                    let _ = write!(row, ",{mu},1");
                }
                None => {
                    row.push_str(&",".repeat(m + 1));
                    row.push_str(",0");
                }
            }
            Ok(row)
        })
        .collect::<Result<_, _>>()?;
    let mut csv = format!("# config_hash={}\n", ctx.hash);
    for i in 1..=n {
        let _ = write!(csv, "x_{i},");
    }
    csv.push('V');
    for i in 1..=m {
        let _ = write!(csv, ",u_{i}");
    }
    csv.push_str(",mu_star,feasible\n");
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    let path = ctx.write("samples.csv", &csv)?;
    let feasible = rows.iter().filter(|r| r.ends_with(",1")).count();
    println!("config_hash {}", ctx.hash);
    println!("points {}", rows.len());
    println!("feasible {feasible}");
    println!("samples {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(jobs) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Failure(1, e.to_string()))?;
    }
    let ctx = Context::new(&cli.common)?;
    match &cli.command {
        Command::Validate => validate(&ctx),
        Command::Prune => prune(&ctx),
        Command::Solve { state } => solve(&ctx, state),
        Command::Simulate { x0, steps } => simulate(&ctx, x0, *steps),
        Command::Sample { grid } => sample(&ctx, *grid),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
