//! Closed-loop execution, trace recording, and metrics.
//!
//! [`run_closed_loop`] drives controller, actuator and environment until a
//! [`Termination`] condition fires, recording every state and movement along
//! the way. [`validate_trace`] is the deliberately naive safety oracle
//! (pairwise, no hashing) that everything else is checked against, and
//! [`compute_metrics`] turns a trace into the usual numbers.

use std::time::Instant;

use thiserror::Error;

use crate::grid::{GridGraph, Vertex};
use crate::heuristics::HeuristicStore;
use crate::system::{
    Actuator, AgentId, Controller, EnvError, Environment, Instance, Movement, PlanError, State,
};

/// When a closed-loop run stops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Termination {
    /// Stop once every agent sits on its goal; give up (incomplete) after
    /// `safety_cap` steps.
    AllAtGoal { safety_cap: usize },
    /// Run exactly this many steps.
    FixedSteps(usize),
    /// Stop once accumulated virtual time (measured planning seconds plus
    /// `step_seconds` per executed step) exceeds `budget_seconds`. A step
    /// whose planning pushes past the budget is not executed.
    ItemBudget { budget_seconds: f64, step_seconds: f64, safety_cap: usize },
}

impl Termination {
    /// Goal-based termination with a generous default cap: ten times the sum
    /// of map width, map height and agent count (vertex count stands in for
    /// width plus height on non-grid graphs).
    pub fn all_at_goal(graph: &GridGraph, agents: usize) -> Termination {
        let extent = match graph.to_grid_map() {
            Some(map) => (map.width() + map.height()) as usize,
            None => graph.num_vertices(),
        };
        Termination::AllAtGoal { safety_cap: 10 * (extent + agents) }
    }
}

/// Everything that happened during one closed-loop run.
///
/// `states` has one more entry than `planned`/`executed`. `plan_seconds` can
/// be one entry longer than `executed` when an [`Termination::ItemBudget`]
/// run plans a step it no longer has budget to execute.
#[derive(Clone, Debug)]
pub struct ExecutionTrace {
    pub states: Vec<State>,
    pub planned: Vec<Movement>,
    pub executed: Vec<Movement>,
    pub plan_seconds: Vec<f64>,
    /// `(state index, agent)` per goal arrival.
    pub goal_events: Vec<(usize, AgentId)>,
    /// Accumulated virtual time; only meaningful for item-budget runs.
    pub virtual_seconds: f64,
    /// Whether the termination condition itself fired, as opposed to a
    /// safety cap.
    pub complete: bool,
    pub termination: Termination,
}

impl ExecutionTrace {
    pub fn makespan(&self) -> usize {
        self.states.len() - 1
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Plans, actuates and applies one movement per step until `termination`
/// fires. Returns the trace together with the final instance (goal streams
/// advanced, agents possibly added).
pub fn run_closed_loop(
    mut controller: Box<dyn Controller>,
    mut actuator: Box<dyn Actuator>,
    mut environment: Environment,
    mut instance: Instance,
    termination: Termination,
) -> Result<(ExecutionTrace, Instance), RunError> {
    let mut state = instance.initial_state();
    let mut trace = ExecutionTrace {
        states: vec![state.clone()],
        planned: Vec::new(),
        executed: Vec::new(),
        plan_seconds: Vec::new(),
        goal_events: Vec::new(),
        virtual_seconds: 0.0,
        complete: false,
        termination,
    };

    loop {
        let t = trace.executed.len();
        match termination {
            Termination::AllAtGoal { safety_cap } => {
                if (0..state.len()).all(|a| state.position(a) == instance.goal(a)) {
                    trace.complete = true;
                    break;
                }
                if t >= safety_cap {
                    break;
                }
            }
            Termination::FixedSteps(steps) => {
                if t >= steps {
                    trace.complete = true;
                    break;
                }
            }
            Termination::ItemBudget { safety_cap, .. } => {
                if t >= safety_cap {
                    break;
                }
            }
        }

        let started = Instant::now();
        let planned = controller.plan(&state, &instance)?;
        trace.plan_seconds.push(started.elapsed().as_secs_f64());

        if let Termination::ItemBudget { budget_seconds, step_seconds, .. } = termination {
            trace.virtual_seconds += trace.plan_seconds.last().unwrap() + step_seconds;
            if trace.virtual_seconds > budget_seconds {
                trace.complete = true;
                break;
            }
        }

        debug_assert!(
            check_movement(instance.graph(), &state, &planned).is_none(),
            "controller produced an invalid movement: {:?}",
            check_movement(instance.graph(), &state, &planned)
        );
        let executed = actuator.actuate(&planned, &state);
        debug_assert!(
            check_movement(instance.graph(), &state, &executed).is_none(),
            "actuator produced an invalid movement: {:?}",
            check_movement(instance.graph(), &state, &executed)
        );
        let outcome = environment.step(&executed, &mut state, &mut instance)?;

        trace.planned.push(planned);
        trace.executed.push(executed);
        trace.states.push(state.clone());
        let arrival_t = trace.states.len() - 1;
        trace.goal_events.extend(outcome.arrivals.iter().map(|&a| (arrival_t, a)));
    }

    Ok((trace, instance))
}

/// Hashed single-movement check used by the in-loop debug assertions; the
/// after-the-fact oracle is [`validate_trace`].
fn check_movement(graph: &GridGraph, state: &State, m: &Movement) -> Option<Violation> {
    use std::collections::HashMap;
    if m.len() != state.len() {
        return Some(Violation::SourceMismatch { t: 0, a: m.len().min(state.len()) });
    }
    let mut occupied: HashMap<Vertex, AgentId> = HashMap::new();
    let mut edges: HashMap<(Vertex, Vertex), AgentId> = HashMap::new();
    for a in 0..m.len() {
        let (from, to) = (m.from(a), m.to(a));
        if from != state.position(a) {
            return Some(Violation::SourceMismatch { t: 0, a });
        }
        if from != to && !graph.neighbors(from).contains(&to) {
            return Some(Violation::IllegalMove { t: 0, a, from, to });
        }
        if let Some(&b) = occupied.get(&to) {
            return Some(Violation::VertexConflict { t: 0, v: to, a: b, b: a });
        }
        occupied.insert(to, a);
        if from != to {
            if let Some(&b) = edges.get(&(to, from)) {
                return Some(Violation::EdgeConflict { t: 0, a: b, b: a });
            }
            edges.insert((from, to), a);
        }
    }
    None
}

/// A safety violation found in a trace. `t` is a state index for vertex
/// conflicts and a transition index (between states `t` and `t + 1`) for the
/// rest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    VertexConflict { t: usize, v: Vertex, a: AgentId, b: AgentId },
    EdgeConflict { t: usize, a: AgentId, b: AgentId },
    IllegalMove { t: usize, a: AgentId, from: Vertex, to: Vertex },
    /// An executed movement that does not start (or end) where the recorded
    /// states say the agent stands.
    SourceMismatch { t: usize, a: AgentId },
}

/// The naive safety oracle: checks every state pairwise for shared vertices,
/// every transition pairwise for swaps, and every executed move for
/// adjacency and consistency with the surrounding states. Returns all
/// violations found, so a clean trace yields an empty vector.
pub fn validate_trace(graph: &GridGraph, trace: &ExecutionTrace) -> Vec<Violation> {
    let mut out = Vec::new();
    for (t, s) in trace.states.iter().enumerate() {
        for i in 0..s.len() {
            for j in (i + 1)..s.len() {
                if s.position(i) == s.position(j) {
                    out.push(Violation::VertexConflict { t, v: s.position(i), a: i, b: j });
                }
            }
        }
    }
    for (t, m) in trace.executed.iter().enumerate() {
        let before = &trace.states[t];
        let after = &trace.states[t + 1];
        for a in 0..m.len() {
            let (from, to) = (m.from(a), m.to(a));
            if from != before.position(a) || to != after.position(a) {
                out.push(Violation::SourceMismatch { t, a });
            }
            if from != to && !graph.neighbors(from).contains(&to) {
                out.push(Violation::IllegalMove { t, a, from, to });
            }
        }
        for a in 0..m.len() {
            for b in (a + 1)..m.len() {
                if m.from(a) != m.from(b) && m.to(a) == m.from(b) && m.to(b) == m.from(a) {
                    out.push(Violation::EdgeConflict { t, a, b });
                }
            }
        }
    }
    out
}

/// Summary numbers for one trace. Which of the optional fields are filled in
/// depends on the termination mode the trace was recorded under.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub makespan: usize,
    pub complete: bool,
    /// Total steps agents spent away from their goals (goal-based runs).
    pub soc: Option<u64>,
    /// `soc` minus the sum of start-to-goal distances: the congestion
    /// overhead on top of the unavoidable travel (goal-based runs).
    pub delta_soc: Option<i64>,
    /// Goals reached per step (fixed-step runs).
    pub throughput: Option<f64>,
    /// Goals reached within the budget (item-budget runs).
    pub items: Option<u64>,
    /// Wall-clock seconds of the first plan call.
    pub ert_seconds: f64,
    pub plan_seconds_mean: f64,
    pub plan_seconds_max: f64,
}

/// Distills a trace into a [`MetricsReport`]. `instance` must be the final
/// instance returned by [`run_closed_loop`] for the same run.
pub fn compute_metrics(trace: &ExecutionTrace, instance: &Instance) -> MetricsReport {
    let (mut soc, mut delta_soc, mut throughput, mut items) = (None, None, None, None);
    match trace.termination {
        Termination::AllAtGoal { .. } => {
            let mut away: u64 = 0;
            for s in &trace.states {
                for a in 0..s.len() {
                    if s.position(a) != instance.goal(a) {
                        away += 1;
                    }
                }
            }
            let store = HeuristicStore::new(instance.graph().clone());
            let lower: u64 = (0..instance.num_agents())
                .map(|a| {
                    store
                        .distance(instance.start(a), instance.goal(a))
                        .expect("validated instances have reachable goals")
                        as u64
                })
                .sum();
            soc = Some(away);
            delta_soc = Some(away as i64 - lower as i64);
        }
        Termination::FixedSteps(steps) => {
            throughput = Some(instance.total_goals_reached() as f64 / steps.max(1) as f64);
        }
        Termination::ItemBudget { .. } => {
            items = Some(trace.goal_events.len() as u64);
        }
    }
    let n = trace.plan_seconds.len();
    MetricsReport {
        makespan: trace.makespan(),
        complete: trace.complete,
        soc,
        delta_soc,
        throughput,
        items,
        ert_seconds: trace.plan_seconds.first().copied().unwrap_or(0.0),
        plan_seconds_mean: if n == 0 {
            0.0
        } else {
            trace.plan_seconds.iter().sum::<f64>() / n as f64
        },
        plan_seconds_max: trace.plan_seconds.iter().copied().fold(0.0, f64::max),
    }
}
