//! The closed loop the planners run inside: agents, instances, movements,
//! actuators and environments.
//!
//! One simulated timestep is
//!
//! ```text
//! controller.plan  ->  planned Movement
//! actuator         ->  executed Movement   (identity, or delay-perturbed)
//! environment      ->  next State          (goal updates, agent arrivals)
//! ```
//!
//! The pieces are deliberately independent: the same controller runs
//! one-shot, lifelong and stochastic settings without knowing which one it
//! is in.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{GridGraph, ScenarioEntry, Vertex};
use crate::rng::{self, Domain};

pub type AgentId = usize;

/// Positions of all agents at one timestep. Always pairwise distinct in a
/// valid execution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct State {
    positions: Vec<Vertex>,
}

impl State {
    pub fn new(positions: Vec<Vertex>) -> Self {
        State { positions }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, a: AgentId) -> Vertex {
        self.positions[a]
    }

    pub fn positions(&self) -> &[Vertex] {
        &self.positions
    }

    pub fn push(&mut self, v: Vertex) {
        self.positions.push(v);
    }

    /// Map from occupied vertex to its occupant.
    pub fn occupancy(&self) -> HashMap<Vertex, AgentId> {
        self.positions.iter().enumerate().map(|(a, &v)| (v, a)).collect()
    }
}

/// One synchronous transition: a (from, to) pair per agent, where
/// `from == to` is a wait.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Movement {
    steps: Vec<(Vertex, Vertex)>,
}

impl Movement {
    pub fn new(steps: Vec<(Vertex, Vertex)>) -> Self {
        Movement { steps }
    }

    /// The all-wait movement for `state`.
    pub fn hold(state: &State) -> Self {
        Movement { steps: state.positions().iter().map(|&v| (v, v)).collect() }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn from(&self, a: AgentId) -> Vertex {
        self.steps[a].0
    }

    pub fn to(&self, a: AgentId) -> Vertex {
        self.steps[a].1
    }

    pub fn is_wait(&self, a: AgentId) -> bool {
        self.steps[a].0 == self.steps[a].1
    }

    pub fn steps(&self) -> &[(Vertex, Vertex)] {
        &self.steps
    }

    /// State after executing this movement.
    pub fn destination_state(&self) -> State {
        State::new(self.steps.iter().map(|&(_, to)| to).collect())
    }
}

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("agents {0} and {1} share start vertex {2:?}")]
    DuplicateStart(AgentId, AgentId, Vertex),
    #[error("agents {0} and {1} share goal vertex {2:?}")]
    DuplicateGoal(AgentId, AgentId, Vertex),
    #[error("agent {0}: goal {1:?} is unreachable from start {2:?}")]
    UnreachableGoal(AgentId, Vertex, Vertex),
    #[error("requested {requested} agents but the largest component has only {available} cells")]
    TooManyAgents { requested: usize, available: usize },
}

/// What an agent does once it reaches its current goal.
#[derive(Clone, Debug)]
pub enum GoalStream {
    /// Keep the goal forever (one-shot).
    Fixed,
    /// Draw the next goal uniformly from the agent's component, resampling
    /// while it equals the agent's current position.
    Random { rng: ChaCha8Rng, pool: Arc<Vec<Vertex>> },
    /// Pop goals from a queue; on exhaustion either hold the last goal or
    /// fail, depending on [`ExhaustPolicy`].
    Queue { goals: VecDeque<Vertex>, policy: ExhaustPolicy },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExhaustPolicy {
    Hold,
    Error,
}

/// A problem: the graph plus per-agent starts, current goals and goal
/// streams. Mutable because lifelong and stochastic environments rewrite
/// goals and append agents as the run progresses.
#[derive(Clone, Debug)]
pub struct Instance {
    graph: Arc<GridGraph>,
    starts: Vec<Vertex>,
    goals: Vec<Vertex>,
    streams: Vec<GoalStream>,
    goals_reached: Vec<u32>,
    t: usize,
}

impl Instance {
    pub fn new(graph: Arc<GridGraph>, starts: Vec<Vertex>, goals: Vec<Vertex>) -> Self {
        assert_eq!(starts.len(), goals.len());
        let n = starts.len();
        Instance {
            graph,
            starts,
            goals,
            streams: vec![GoalStream::Fixed; n],
            goals_reached: vec![0; n],
            t: 0,
        }
    }

    /// Takes the first `n` scenario entries as agents.
    pub fn from_scenario(
        graph: Arc<GridGraph>,
        entries: &[ScenarioEntry],
        n: usize,
    ) -> Result<Self, InstanceError> {
        let take = n.min(entries.len());
        let starts = entries[..take].iter().map(|e| e.start).collect();
        let goals = entries[..take].iter().map(|e| e.goal).collect();
        Ok(Instance::new(graph, starts, goals))
    }

    /// Samples `n` distinct starts and `n` distinct goals uniformly from the
    /// largest connected component.
    pub fn synthetic(graph: Arc<GridGraph>, n: usize, seed: u64) -> Result<Self, InstanceError> {
        let pool = largest_component(&graph);
        if n > pool.len() {
            return Err(InstanceError::TooManyAgents { requested: n, available: pool.len() });
        }
        let mut r = rng::stream(seed, 0, Domain::Instance, 0, 0);
        let starts = sample_distinct(&pool, n, &mut r);
        let goals = sample_distinct(&pool, n, &mut r);
        Ok(Instance::new(graph, starts, goals))
    }

    /// Switches every agent to a random lifelong goal stream. Current goals
    /// are kept as the first goal of each stream.
    pub fn with_random_streams(mut self, seed: u64) -> Self {
        let pool = Arc::new(largest_component(&self.graph));
        for a in 0..self.starts.len() {
            self.streams[a] = GoalStream::Random {
                rng: rng::stream(seed, 0, Domain::GoalStream, 0, a as u64),
                pool: pool.clone(),
            };
        }
        self
    }

    pub fn with_goal_queue(mut self, a: AgentId, goals: Vec<Vertex>, policy: ExhaustPolicy) -> Self {
        self.streams[a] = GoalStream::Queue { goals: goals.into(), policy };
        self
    }

    pub fn graph(&self) -> &Arc<GridGraph> {
        &self.graph
    }

    pub fn num_agents(&self) -> usize {
        self.starts.len()
    }

    pub fn start(&self, a: AgentId) -> Vertex {
        self.starts[a]
    }

    pub fn starts(&self) -> &[Vertex] {
        &self.starts
    }

    pub fn goal(&self, a: AgentId) -> Vertex {
        self.goals[a]
    }

    pub fn goals(&self) -> &[Vertex] {
        &self.goals
    }

    pub fn goals_reached(&self, a: AgentId) -> u32 {
        self.goals_reached[a]
    }

    pub fn total_goals_reached(&self) -> u64 {
        self.goals_reached.iter().map(|&k| k as u64).sum()
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn initial_state(&self) -> State {
        State::new(self.starts.clone())
    }

    /// Checks starts are distinct and every goal is reachable from its
    /// start; with `distinct_goals` (one-shot) also checks goal uniqueness.
    pub fn validate(&self, distinct_goals: bool) -> Result<(), InstanceError> {
        let mut seen: HashMap<Vertex, AgentId> = HashMap::new();
        for (a, &s) in self.starts.iter().enumerate() {
            if let Some(&b) = seen.get(&s) {
                return Err(InstanceError::DuplicateStart(b, a, s));
            }
            seen.insert(s, a);
        }
        if distinct_goals {
            let mut seen: HashMap<Vertex, AgentId> = HashMap::new();
            for (a, &g) in self.goals.iter().enumerate() {
                if let Some(&b) = seen.get(&g) {
                    return Err(InstanceError::DuplicateGoal(b, a, g));
                }
                seen.insert(g, a);
            }
        }
        for a in 0..self.starts.len() {
            if self.graph.component(self.starts[a]) != self.graph.component(self.goals[a]) {
                return Err(InstanceError::UnreachableGoal(a, self.goals[a], self.starts[a]));
            }
        }
        Ok(())
    }
}

fn largest_component(graph: &GridGraph) -> Vec<Vertex> {
    let mut sizes: HashMap<u32, usize> = HashMap::new();
    for v in 0..graph.num_vertices() {
        *sizes.entry(graph.component(Vertex(v as u32))).or_default() += 1;
    }
    let best = sizes
        .into_iter()
        .max_by_key(|&(comp, size)| (size, std::cmp::Reverse(comp)))
        .map(|(comp, _)| comp)
        .unwrap_or(0);
    (0..graph.num_vertices())
        .map(|v| Vertex(v as u32))
        .filter(|&v| graph.component(v) == best)
        .collect()
}

fn sample_distinct(pool: &[Vertex], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vertex> {
    // Partial Fisher-Yates over a copy of the pool.
    let mut pool = pool.to_vec();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
        out.push(pool[i]);
    }
    out
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("agent {0}: goal {1:?} unreachable from {2:?}")]
    UnreachableGoal(AgentId, Vertex, Vertex),
}

/// Produces the planned movement for the current state. Stateful: planners
/// carry priorities, caches and thread pools across calls.
pub trait Controller {
    fn plan(&mut self, state: &State, instance: &Instance) -> Result<Movement, PlanError>;
}

/// Turns a planned movement into the movement that actually happens.
pub trait Actuator {
    fn actuate(&mut self, planned: &Movement, state: &State) -> Movement;
}

/// Executes exactly what was planned.
pub struct PerfectActuator;

impl Actuator for PerfectActuator {
    fn actuate(&mut self, planned: &Movement, _state: &State) -> Movement {
        planned.clone()
    }
}

pub fn perfect_actuate(planned: &Movement) -> Movement {
    planned.clone()
}

/// Who is waiting for whom: an edge `i -> j` when agent `i` plans to move
/// onto the vertex agent `j` currently occupies. Out-degree is at most one
/// because positions are distinct.
#[derive(Clone, Debug)]
pub struct DependencyGraph {
    out: Vec<Option<AgentId>>,
}

impl DependencyGraph {
    pub fn successor(&self, a: AgentId) -> Option<AgentId> {
        self.out[a]
    }
}

pub fn build_dependency_graph(planned: &Movement, state: &State) -> DependencyGraph {
    let occupancy = state.occupancy();
    let out = (0..planned.len())
        .map(|a| {
            if planned.is_wait(a) {
                return None;
            }
            occupancy.get(&planned.to(a)).copied().filter(|&j| j != a)
        })
        .collect();
    DependencyGraph { out }
}

/// Agents that must hold still given the primary delay set: an agent is
/// stationary iff some chain of dependencies leads from it to a delayed
/// agent (delayed agents themselves included). A rotation cycle that
/// contains a delayed member therefore freezes whole; one that does not
/// keeps turning.
pub fn stationary_set(dep: &DependencyGraph, delayed: &[bool]) -> Vec<bool> {
    let n = delayed.len();
    let mut reverse: Vec<Vec<AgentId>> = vec![Vec::new(); n];
    for i in 0..n {
        if let Some(j) = dep.successor(i) {
            reverse[j].push(i);
        }
    }
    let mut stationary = delayed.to_vec();
    let mut queue: VecDeque<AgentId> = (0..n).filter(|&a| delayed[a]).collect();
    while let Some(j) = queue.pop_front() {
        for &i in &reverse[j] {
            if !stationary[i] {
                stationary[i] = true;
                queue.push_back(i);
            }
        }
    }
    stationary
}

/// Replaces the moves of all stationary agents by waits.
pub fn delayed_execution(planned: &Movement, state: &State, delayed: &[bool]) -> Movement {
    let dep = build_dependency_graph(planned, state);
    let stationary = stationary_set(&dep, delayed);
    Movement::new(
        (0..planned.len())
            .map(|a| {
                let from = planned.from(a);
                if stationary[a] {
                    (from, from)
                } else {
                    (from, planned.to(a))
                }
            })
            .collect(),
    )
}

/// Samples an independent Bernoulli delay per agent and freezes every agent
/// whose plan transitively depends on a delayed one. If the planned movement
/// was conflict-free, the perturbed one still is.
pub struct DelayActuator {
    p_delay: f64,
    rng: ChaCha8Rng,
}

impl DelayActuator {
    pub fn new(p_delay: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&p_delay));
        DelayActuator { p_delay, rng: rng::component(seed, Domain::Actuator) }
    }
}

impl Actuator for DelayActuator {
    fn actuate(&mut self, planned: &Movement, state: &State) -> Movement {
        let delayed: Vec<bool> =
            (0..planned.len()).map(|_| self.rng.random_bool(self.p_delay)).collect();
        delayed_execution(planned, state, &delayed)
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("agent {0}: goal queue exhausted at t={1}")]
    GoalStreamExhausted(AgentId, usize),
}

/// What the environment reports back after a step.
#[derive(Clone, Debug, Default)]
pub struct StepOutcome {
    /// Agents that entered their goal on this step.
    pub arrivals: Vec<AgentId>,
    /// Agent id appended this step, if any.
    pub added: Option<AgentId>,
}

/// Applies executed movements to the world: advances positions and time,
/// detects goal arrivals, feeds goal streams, and (optionally) spawns new
/// agents with probability `p_add` per step.
pub struct Environment {
    p_add: f64,
    rng: ChaCha8Rng,
    spawn_pool: Option<Arc<Vec<Vertex>>>,
}

impl Environment {
    pub fn new() -> Self {
        Environment { p_add: 0.0, rng: rng::component(0, Domain::Environment), spawn_pool: None }
    }

    /// Enables stochastic agent addition.
    pub fn with_additions(mut self, p_add: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&p_add));
        self.p_add = p_add;
        self.rng = rng::component(seed, Domain::Environment);
        self
    }

    pub fn step(
        &mut self,
        executed: &Movement,
        state: &mut State,
        instance: &mut Instance,
    ) -> Result<StepOutcome, EnvError> {
        assert_eq!(executed.len(), state.len());
        let mut outcome = StepOutcome::default();

        *state = executed.destination_state();
        instance.t += 1;

        for a in 0..executed.len() {
            if executed.to(a) == instance.goals[a] && executed.from(a) != instance.goals[a] {
                instance.goals_reached[a] += 1;
                outcome.arrivals.push(a);
                self.advance_stream(a, state, instance)?;
            }
        }

        if self.p_add > 0.0 && self.rng.random_bool(self.p_add) {
            let a = self.spawn_agent(state, instance);
            outcome.added = a;
        }

        Ok(outcome)
    }

    fn advance_stream(
        &mut self,
        a: AgentId,
        state: &State,
        instance: &mut Instance,
    ) -> Result<(), EnvError> {
        let pos = state.position(a);
        match &mut instance.streams[a] {
            GoalStream::Fixed => {}
            GoalStream::Random { rng, pool } => {
                let next = loop {
                    let v = pool[rng.random_range(0..pool.len())];
                    if v != pos {
                        break v;
                    }
                };
                instance.goals[a] = next;
            }
            GoalStream::Queue { goals, policy } => loop {
                match goals.pop_front() {
                    Some(v) if v != pos => {
                        instance.goals[a] = v;
                        break;
                    }
                    Some(_) => continue,
                    None => match policy {
                        ExhaustPolicy::Hold => break,
                        ExhaustPolicy::Error => {
                            return Err(EnvError::GoalStreamExhausted(a, instance.t))
                        }
                    },
                }
            },
        }
        Ok(())
    }

    /// Adds one agent on a free cell of the largest component. Skipped when
    /// every pool cell is occupied.
    fn spawn_agent(&mut self, state: &mut State, instance: &mut Instance) -> Option<AgentId> {
        let pool = self
            .spawn_pool
            .get_or_insert_with(|| Arc::new(largest_component(&instance.graph)))
            .clone();
        let occupied: std::collections::HashSet<Vertex> = state.positions().iter().copied().collect();
        if occupied.len() >= pool.len() {
            return None;
        }
        let start = loop {
            let v = pool[self.rng.random_range(0..pool.len())];
            if !occupied.contains(&v) {
                break v;
            }
        };
        let goal = loop {
            let v = pool[self.rng.random_range(0..pool.len())];
            if v != start {
                break v;
            }
        };
        let a = instance.starts.len();
        instance.starts.push(start);
        instance.goals.push(goal);
        instance.goals_reached.push(0);
        let stream_seed: u64 = self.rng.random();
        let stream = match instance.streams.first() {
            Some(GoalStream::Fixed) | None => GoalStream::Fixed,
            _ => GoalStream::Random {
                rng: rng::stream(stream_seed, 0, Domain::GoalStream, 0, a as u64),
                pool: pool.clone(),
            },
        };
        instance.streams.push(stream);
        state.push(start);
        Some(a)
    }
}

impl Default for Environment {
    fn default() -> Self {
        Self::new()
    }
}
