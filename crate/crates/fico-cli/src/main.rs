//! `fico-bench`: closed-loop planning benchmarks on grid maps.
//!
//! Two subcommands:
//!
//! * `run` sweeps seeds over one map and emits one metrics row per
//!   `(seed, algorithm)` pair, as CSV or JSON lines. Without `--timing` the
//!   output is fully deterministic: the same invocation produces
//!   byte-identical bytes on every machine.
//! * `agent-reduction` measures how large a share of the population the
//!   planner leaves untouched per step, averaged over a run, for a list of
//!   agent densities.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use fico::grid::{parse_scenario, GridGraph, GridMap, ScenarioEntry};
use fico::planner::{FicoController, PibtController, PlannerConfig};
use fico::sim::{compute_metrics, run_closed_loop, Termination};
use fico::system::{
    Actuator, Controller, DelayActuator, Environment, Instance, PerfectActuator,
};

#[derive(Parser)]
#[command(name = "fico-bench", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run closed-loop benchmarks and print one metrics row per (seed, algo).
    Run(RunArgs),
    /// Report the mean conflict-free fraction per agent density.
    ///
    /// Agents follow random goal streams so the population keeps moving for
    /// the whole measurement; this reflects steady congestion instead of the
    /// end-game of a one-shot run, where parked agents dominate the count.
    AgentReduction(ReductionArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Map file in MovingAI .map format.
    #[arg(long)]
    map: PathBuf,

    /// Scenario file in MovingAI .scen format; omits for synthetic instances
    /// with distinct uniform random starts and goals per seed.
    #[arg(long)]
    scen: Option<PathBuf>,

    /// Number of agents (with --scen: how many entries to take).
    #[arg(long)]
    agents: usize,

    /// Seeds to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,

    /// Termination mode.
    #[arg(long, value_enum, default_value_t = Mode::OneShot)]
    mode: Mode,

    /// Algorithms to run, comma separated.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "fico")]
    algo: Vec<Algo>,

    /// Lookahead horizon in transitions.
    #[arg(long, default_value_t = 3)]
    horizon: usize,

    /// Conflict-free agents demoted per failed replanning round.
    #[arg(long, default_value_t = 10)]
    congestion_batch: usize,

    /// Order tie candidates by how little they obstruct neighbors.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    hindrance: bool,

    /// Weight tie shuffles by optimal-path counts instead of uniformly.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    balanced_tie_break: bool,

    /// Probability that an agent's move is delayed each step.
    #[arg(long, default_value_t = 0.0)]
    p_delay: f64,

    /// Probability that a new agent appears each step.
    #[arg(long, default_value_t = 0.0)]
    p_add: f64,

    /// Steps to execute in lifelong mode.
    #[arg(long, default_value_t = 500)]
    t_max: usize,

    /// Virtual-time budget in seconds for item-budget mode.
    #[arg(long, default_value_t = 60.0)]
    budget_seconds: f64,

    /// Virtual seconds each executed step costs in item-budget mode.
    #[arg(long, default_value_t = 2.0)]
    step_seconds: f64,

    /// Worker threads for the planner and the seed sweep; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,

    /// Include wall-clock columns. They vary between runs, so leaving this
    /// off keeps the output byte-identical across repeats.
    #[arg(long)]
    timing: bool,

    /// Write rows to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct ReductionArgs {
    /// Map file in MovingAI .map format.
    #[arg(long)]
    map: PathBuf,

    /// Agent densities to measure, comma separated.
    #[arg(long, value_delimiter = ',')]
    agents: Vec<usize>,

    /// Seeds averaged per density, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,

    /// Lookahead horizon in transitions.
    #[arg(long, default_value_t = 3)]
    horizon: usize,

    /// Planning steps measured per run.
    #[arg(long, default_value_t = 50)]
    steps: usize,

    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,

    /// Write rows to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
enum Mode {
    OneShot,
    Lifelong,
    ItemBudget,
}

impl Mode {
    fn as_str(self) -> &'static str {
        match self {
            Mode::OneShot => "one-shot",
            Mode::Lifelong => "lifelong",
            Mode::ItemBudget => "item-budget",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
enum Algo {
    Fico,
    Pibt,
}

impl Algo {
    fn as_str(self) -> &'static str {
        match self {
            Algo::Fico => "fico",
            Algo::Pibt => "pibt",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

/// One output row of the `run` subcommand: the configuration that produced
/// the run, then every metric. Field order is the column order.
#[derive(Serialize)]
struct RunRow {
    map: String,
    scen: String,
    mode: &'static str,
    algo: &'static str,
    agents: usize,
    seed: u64,
    horizon: usize,
    congestion_batch: usize,
    hindrance: bool,
    balanced_tie_break: bool,
    p_delay: f64,
    p_add: f64,
    t_max: usize,
    budget_seconds: f64,
    step_seconds: f64,
    threads: usize,
    complete: bool,
    makespan: usize,
    soc: Option<u64>,
    delta_soc: Option<i64>,
    throughput: Option<f64>,
    items: Option<u64>,
    ert_seconds: Option<f64>,
    plan_seconds_mean: Option<f64>,
    plan_seconds_max: Option<f64>,
}

impl RunRow {
    const HEADER: [&'static str; 25] = [
        "map",
        "scen",
        "mode",
        "algo",
        "agents",
        "seed",
        "horizon",
        "congestion_batch",
        "hindrance",
        "balanced_tie_break",
        "p_delay",
        "p_add",
        "t_max",
        "budget_seconds",
        "step_seconds",
        "threads",
        "complete",
        "makespan",
        "soc",
        "delta_soc",
        "throughput",
        "items",
        "ert_seconds",
        "plan_seconds_mean",
        "plan_seconds_max",
    ];

    fn csv_fields(&self) -> Vec<String> {
        vec![
            self.map.clone(),
            self.scen.clone(),
            self.mode.to_string(),
            self.algo.to_string(),
            self.agents.to_string(),
            self.seed.to_string(),
            self.horizon.to_string(),
            self.congestion_batch.to_string(),
            self.hindrance.to_string(),
            self.balanced_tie_break.to_string(),
            self.p_delay.to_string(),
            self.p_add.to_string(),
            self.t_max.to_string(),
            self.budget_seconds.to_string(),
            self.step_seconds.to_string(),
            self.threads.to_string(),
            self.complete.to_string(),
            self.makespan.to_string(),
            opt(self.soc),
            opt(self.delta_soc),
            opt(self.throughput),
            opt(self.items),
            opt(self.ert_seconds),
            opt(self.plan_seconds_mean),
            opt(self.plan_seconds_max),
        ]
    }
}

/// One output row of the `agent-reduction` subcommand.
#[derive(Serialize)]
struct ReductionRow {
    map: String,
    agents: usize,
    horizon: usize,
    steps: usize,
    seeds: usize,
    cf_fraction: f64,
}

impl ReductionRow {
    const HEADER: [&'static str; 6] = ["map", "agents", "horizon", "steps", "seeds", "cf_fraction"];

    fn csv_fields(&self) -> Vec<String> {
        vec![
            self.map.clone(),
            self.agents.to_string(),
            self.horizon.to_string(),
            self.steps.to_string(),
            self.seeds.to_string(),
            self.cf_fraction.to_string(),
        ]
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let rows = run_benchmark(&args)?;
            let text = render(&RunRow::HEADER, &rows, |r| r.csv_fields(), args.format)?;
            emit(&text, args.out.as_deref())
        }
        Command::AgentReduction(args) => {
            let rows = report_agent_reduction(&args)?;
            let text = render(&ReductionRow::HEADER, &rows, |r| r.csv_fields(), args.format)?;
            emit(&text, args.out.as_deref())
        }
    }
}

fn load_graph(path: &PathBuf) -> Result<Arc<GridGraph>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading map {}", path.display()))?;
    let map = GridMap::parse(&text).with_context(|| format!("parsing map {}", path.display()))?;
    Ok(Arc::new(GridGraph::build(&map)))
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        bail!("--{name} must lie in [0, 1], got {p}");
    }
    Ok(())
}

fn run_benchmark(args: &RunArgs) -> Result<Vec<RunRow>> {
    check_probability("p-delay", args.p_delay)?;
    check_probability("p-add", args.p_add)?;
    if args.agents == 0 {
        bail!("--agents must be at least 1");
    }
    if args.horizon == 0 {
        bail!("--horizon must be at least 1");
    }
    if args.congestion_batch == 0 {
        bail!("--congestion-batch must be at least 1");
    }
    if args.seeds.is_empty() {
        bail!("--seeds must name at least one seed");
    }
    if args.algo.is_empty() {
        bail!("--algo must name at least one algorithm");
    }
    match args.mode {
        Mode::Lifelong if args.t_max == 0 => bail!("--t-max must be at least 1"),
        Mode::ItemBudget if !(args.step_seconds > 0.0) => {
            bail!("--step-seconds must be positive so the budget can run out")
        }
        Mode::ItemBudget if !(args.budget_seconds >= 0.0) => {
            bail!("--budget-seconds must be non-negative")
        }
        _ => {}
    }

    let graph = load_graph(&args.map)?;
    let scenario: Option<Vec<ScenarioEntry>> = match &args.scen {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading scenario {}", path.display()))?;
            let entries = parse_scenario(&text, &graph)
                .with_context(|| format!("parsing scenario {}", path.display()))?;
            if entries.len() < args.agents {
                bail!(
                    "scenario {} holds {} entries but --agents asks for {}",
                    path.display(),
                    entries.len(),
                    args.agents
                );
            }
            Some(entries)
        }
        None => None,
    };

    let mut seeds = args.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let mut algos = args.algo.clone();
    algos.sort_unstable();
    algos.dedup();

    let mut jobs = Vec::new();
    for &seed in &seeds {
        for &algo in &algos {
            jobs.push((seed, algo));
        }
    }

    let pool = sweep_pool(args.threads, jobs.len())?;
    let rows: Result<Vec<RunRow>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(seed, algo)| run_one(args, &graph, scenario.as_deref(), seed, algo))
            .collect()
    });
    rows
}

fn sweep_pool(threads: usize, jobs: usize) -> Result<rayon::ThreadPool> {
    let budget = if threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        threads
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(budget.min(jobs.max(1)))
        .build()
        .context("building the sweep thread pool")
}

fn run_one(
    args: &RunArgs,
    graph: &Arc<GridGraph>,
    scenario: Option<&[ScenarioEntry]>,
    seed: u64,
    algo: Algo,
) -> Result<RunRow> {
    let mut instance = match scenario {
        Some(entries) => Instance::from_scenario(graph.clone(), entries, args.agents)?,
        None => Instance::synthetic(graph.clone(), args.agents, seed)?,
    };
    if args.mode != Mode::OneShot {
        instance = instance.with_random_streams(seed);
    }

    let config = PlannerConfig {
        horizon: args.horizon,
        congestion_batch: args.congestion_batch,
        hindrance: args.hindrance,
        balanced: args.balanced_tie_break,
        threads: args.threads,
        seed,
        ..PlannerConfig::default()
    };
    let controller: Box<dyn Controller> = match algo {
        Algo::Fico => Box::new(FicoController::new(graph.clone(), config)),
        Algo::Pibt => Box::new(PibtController::new(graph.clone(), config)),
    };
    let actuator: Box<dyn Actuator> = if args.p_delay > 0.0 {
        Box::new(DelayActuator::new(args.p_delay, seed))
    } else {
        Box::new(PerfectActuator)
    };
    let environment = if args.p_add > 0.0 {
        Environment::new().with_additions(args.p_add, seed)
    } else {
        Environment::new()
    };
    let termination = match args.mode {
        Mode::OneShot => Termination::all_at_goal(graph, args.agents),
        Mode::Lifelong => Termination::FixedSteps(args.t_max),
        Mode::ItemBudget => Termination::ItemBudget {
            budget_seconds: args.budget_seconds,
            step_seconds: args.step_seconds,
            safety_cap: 1_000_000,
        },
    };

    let (trace, final_instance) =
        run_closed_loop(controller, actuator, environment, instance, termination)?;
    let report = compute_metrics(&trace, &final_instance);

    Ok(RunRow {
        map: args.map.display().to_string(),
        scen: args.scen.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        mode: args.mode.as_str(),
        algo: algo.as_str(),
        agents: args.agents,
        seed,
        horizon: args.horizon,
        congestion_batch: args.congestion_batch,
        hindrance: args.hindrance,
        balanced_tie_break: args.balanced_tie_break,
        p_delay: args.p_delay,
        p_add: args.p_add,
        t_max: args.t_max,
        budget_seconds: args.budget_seconds,
        step_seconds: args.step_seconds,
        threads: args.threads,
        complete: report.complete,
        makespan: report.makespan,
        soc: report.soc,
        delta_soc: report.delta_soc,
        throughput: report.throughput,
        items: report.items,
        ert_seconds: args.timing.then_some(report.ert_seconds),
        plan_seconds_mean: args.timing.then_some(report.plan_seconds_mean),
        plan_seconds_max: args.timing.then_some(report.plan_seconds_max),
    })
}

fn report_agent_reduction(args: &ReductionArgs) -> Result<Vec<ReductionRow>> {
    if args.agents.is_empty() {
        bail!("--agents must name at least one density");
    }
    if args.agents.contains(&0) {
        bail!("--agents densities must be at least 1");
    }
    if args.seeds.is_empty() {
        bail!("--seeds must name at least one seed");
    }
    if args.steps == 0 {
        bail!("--steps must be at least 1");
    }
    if args.horizon == 0 {
        bail!("--horizon must be at least 1");
    }

    let graph = load_graph(&args.map)?;
    let mut densities = args.agents.clone();
    densities.sort_unstable();
    densities.dedup();
    let mut seeds = args.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();

    let mut jobs = Vec::new();
    for &n in &densities {
        for &seed in &seeds {
            jobs.push((n, seed));
        }
    }
    let pool = sweep_pool(args.threads, jobs.len())?;
    let fractions: Result<Vec<(usize, f64)>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(n, seed)| {
                run_mean_cf_fraction(&graph, n, seed, args.horizon, args.steps, args.threads)
                    .map(|f| (n, f))
            })
            .collect()
    });
    let fractions = fractions?;

    let mut rows = Vec::new();
    for &n in &densities {
        let per_seed: Vec<f64> =
            fractions.iter().filter(|&&(m, _)| m == n).map(|&(_, f)| f).collect();
        rows.push(ReductionRow {
            map: args.map.display().to_string(),
            agents: n,
            horizon: args.horizon,
            steps: args.steps,
            seeds: per_seed.len(),
            cf_fraction: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
        });
    }
    Ok(rows)
}

/// Mean first-pass conflict-free fraction over `steps` planning steps of one
/// run with random goal streams and perfect actuation.
fn run_mean_cf_fraction(
    graph: &Arc<GridGraph>,
    agents: usize,
    seed: u64,
    horizon: usize,
    steps: usize,
    threads: usize,
) -> Result<f64> {
    let mut instance =
        Instance::synthetic(graph.clone(), agents, seed)?.with_random_streams(seed);
    let config = PlannerConfig { horizon, threads, seed, ..PlannerConfig::default() };
    let mut controller = FicoController::new(graph.clone(), config);
    let mut actuator = PerfectActuator;
    let mut environment = Environment::new();
    let mut state = instance.initial_state();
    for _ in 0..steps {
        let planned = controller.plan(&state, &instance)?;
        let executed = actuator.actuate(&planned, &state);
        environment.step(&executed, &mut state, &mut instance)?;
    }
    let stats = controller.step_stats();
    Ok(stats.iter().map(|s| s.conflict_free_fraction).sum::<f64>() / stats.len() as f64)
}

fn render<R>(
    header: &[&str],
    rows: &[R],
    fields: impl Fn(&R) -> Vec<String>,
    format: Format,
) -> Result<String>
where
    R: Serialize,
{
    let mut text = String::new();
    match format {
        Format::Csv => {
            writeln!(text, "{}", header.join(",")).unwrap();
            for row in rows {
                let escaped: Vec<String> =
                    fields(row).into_iter().map(|f| escape_csv(&f)).collect();
                writeln!(text, "{}", escaped.join(",")).unwrap();
            }
        }
        Format::Jsonl => {
            for row in rows {
                writeln!(text, "{}", serde_json::to_string(row)?).unwrap();
            }
        }
    }
    Ok(text)
}

fn escape_csv(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn emit(text: &str, out: Option<&std::path::Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
