//! Conflict detection over planned trajectories and the reachability
//! analysis that splits conflicting agents into independent groups.
//!
//! Two plans conflict when they occupy the same vertex at the same step or
//! traverse the same edge in opposite directions. Detection hashes every
//! (vertex, step) occupancy once, so cost scales with plan volume, not with
//! agent pairs.
//!
//! For replanning, each conflicting agent gets a space-time region: every
//! (vertex, step) it could occupy within the horizon while respecting the
//! already-finalized conflict-free plans. Agents whose regions overlap can
//! possibly interact and land in one group; agents of different groups
//! provably cannot, so groups replan independently (and in parallel).

use std::collections::{HashMap, HashSet, VecDeque};

use smallvec::SmallVec;

use crate::grid::{GridGraph, Vertex};
use crate::system::{AgentId, State};

/// Planned trajectories, one `Vec<Vertex>` of length `horizon + 1` per
/// agent, indexed by agent id.
pub type PlanSet = Vec<Vec<Vertex>>;

/// Result of conflict detection: both lists sorted ascending, disjoint, and
/// together covering every agent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub conflict_free: Vec<AgentId>,
    pub conflicting: Vec<AgentId>,
}

/// Per-step vertex occupancy of a plan set.
pub struct SpaceTimeHash {
    steps: Vec<HashMap<Vertex, SmallVec<[AgentId; 2]>>>,
}

impl SpaceTimeHash {
    pub fn build(plans: &PlanSet) -> Self {
        let horizon = plans.first().map_or(0, |p| p.len() - 1);
        let mut steps = vec![HashMap::new(); horizon + 1];
        for (a, plan) in plans.iter().enumerate() {
            debug_assert_eq!(plan.len(), horizon + 1);
            for (tau, &v) in plan.iter().enumerate() {
                steps[tau].entry(v).or_insert_with(SmallVec::new).push(a);
            }
        }
        SpaceTimeHash { steps }
    }

    pub fn occupants(&self, v: Vertex, tau: usize) -> &[AgentId] {
        self.steps.get(tau).and_then(|m| m.get(&v)).map_or(&[], |s| s.as_slice())
    }

    pub fn horizon(&self) -> usize {
        self.steps.len() - 1
    }
}

/// Splits agents into conflict-free and conflicting sets. Agents listed in
/// `forced` are treated as conflicting regardless of their plans (used when
/// congestion resolution re-labels agents).
pub fn detect_conflicts(plans: &PlanSet, forced: &[bool]) -> Partition {
    let n = plans.len();
    debug_assert_eq!(forced.len(), n);
    let hash = SpaceTimeHash::build(plans);
    let mut conflicting = vec![false; n];

    for (tau, step) in hash.steps.iter().enumerate() {
        for occupants in step.values() {
            if occupants.len() > 1 {
                for &a in occupants {
                    conflicting[a] = true;
                }
            }
        }
        if tau + 1 > hash.horizon() {
            continue;
        }
        for (a, plan) in plans.iter().enumerate() {
            let (from, to) = (plan[tau], plan[tau + 1]);
            if from == to {
                continue;
            }
            for &b in hash.occupants(to, tau) {
                if b != a && plans[b][tau + 1] == from {
                    conflicting[a] = true;
                    conflicting[b] = true;
                }
            }
        }
    }

    for (a, &f) in forced.iter().enumerate() {
        if f {
            conflicting[a] = true;
        }
    }

    let mut partition =
        Partition { conflict_free: Vec::new(), conflicting: Vec::new() };
    for (a, &c) in conflicting.iter().enumerate() {
        if c {
            partition.conflicting.push(a);
        } else {
            partition.conflict_free.push(a);
        }
    }
    partition
}

/// The finalized conflict-free plans, viewed as movement constraints: their
/// vertices are blocked per step and their traversed edges cannot be crossed
/// in the opposite direction.
pub struct FinalizedPlans {
    plans: HashMap<AgentId, Vec<Vertex>>,
    occupancy: Vec<HashMap<Vertex, AgentId>>,
    horizon: usize,
}

impl FinalizedPlans {
    pub fn new(plans: &PlanSet, conflict_free: &[AgentId]) -> Self {
        let horizon = plans.first().map_or(0, |p| p.len() - 1);
        let mut own = HashMap::with_capacity(conflict_free.len());
        let mut occupancy = vec![HashMap::new(); horizon + 1];
        for &a in conflict_free {
            for (tau, &v) in plans[a].iter().enumerate() {
                let prev = occupancy[tau].insert(v, a);
                debug_assert!(prev.is_none(), "finalized plans must be mutually conflict-free");
            }
            own.insert(a, plans[a].clone());
        }
        FinalizedPlans { plans: own, occupancy, horizon }
    }

    /// No constraints at all (global replanning).
    pub fn empty(horizon: usize) -> Self {
        FinalizedPlans {
            plans: HashMap::new(),
            occupancy: vec![HashMap::new(); horizon + 1],
            horizon,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub fn occupant(&self, v: Vertex, tau: usize) -> Option<AgentId> {
        self.occupancy.get(tau).and_then(|m| m.get(&v)).copied()
    }

    /// Would an agent moving `from -> to` over step `tau -> tau + 1` swap
    /// with a finalized agent?
    pub fn swap_blocked(&self, from: Vertex, to: Vertex, tau: usize) -> bool {
        match self.occupant(to, tau) {
            Some(b) => self.plans[&b].get(tau + 1) == Some(&from),
            None => false,
        }
    }

    /// Position of finalized agent `b` at step `tau`.
    pub fn position(&self, b: AgentId, tau: usize) -> Option<Vertex> {
        self.plans.get(&b).and_then(|p| p.get(tau)).copied()
    }
}

/// Space-time cells one agent can reach within the horizon while respecting
/// the finalized plans.
#[derive(Clone, Debug)]
pub struct ReachableRegion {
    pub agent: AgentId,
    cells: HashSet<(Vertex, u8)>,
}

impl ReachableRegion {
    pub fn contains(&self, v: Vertex, tau: usize) -> bool {
        self.cells.contains(&(v, tau as u8))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vertex, u8)> + '_ {
        self.cells.iter().copied()
    }
}

/// Breadth-first space-time reachability from each agent's current position.
/// A step into `(u, tau + 1)` is legal when `u` is the current vertex or a
/// neighbor, `u` is not finalized-occupied at `tau + 1`, and the move does
/// not swap with a finalized agent.
pub fn compute_reachable_sets(
    graph: &GridGraph,
    agents: &[AgentId],
    state: &State,
    horizon: usize,
    finalized: &FinalizedPlans,
) -> Vec<ReachableRegion> {
    agents
        .iter()
        .map(|&a| {
            let start = state.position(a);
            let mut cells = HashSet::new();
            cells.insert((start, 0u8));
            let mut queue = VecDeque::from([(start, 0u8)]);
            while let Some((v, tau)) = queue.pop_front() {
                if tau as usize >= horizon {
                    continue;
                }
                let next_tau = tau + 1;
                let mut try_step = |u: Vertex| {
                    if finalized.occupant(u, next_tau as usize).is_some() {
                        return;
                    }
                    if u != v && finalized.swap_blocked(v, u, tau as usize) {
                        return;
                    }
                    if cells.insert((u, next_tau)) {
                        queue.push_back((u, next_tau));
                    }
                };
                try_step(v);
                for &u in graph.neighbors(v) {
                    try_step(u);
                }
            }
            ReachableRegion { agent: a, cells }
        })
        .collect()
}

/// Union-find over `0..n` with path compression and union by rank. `ops()`
/// counts public `find`/`union` calls (a `union` counts once).
pub struct DisjointSetUnion {
    parent: Vec<usize>,
    rank: Vec<u8>,
    ops: u64,
}

impl DisjointSetUnion {
    pub fn new(n: usize) -> Self {
        DisjointSetUnion { parent: (0..n).collect(), rank: vec![0; n], ops: 0 }
    }

    pub fn find(&mut self, x: usize) -> usize {
        self.ops += 1;
        self.find_quiet(x)
    }

    fn find_quiet(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns `true` when two previously separate sets were joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        self.ops += 1;
        let (ra, rb) = (self.find_quiet(a), self.find_quiet(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }

    pub fn ops(&self) -> u64 {
        self.ops
    }
}

/// Groups agents whose reachable regions overlap (transitively). Output
/// groups are sorted by their smallest member and members sorted ascending,
/// so grouping is deterministic regardless of hash iteration order.
pub fn group_by_reachability(regions: &[ReachableRegion]) -> Vec<Vec<AgentId>> {
    let mut dsu = DisjointSetUnion::new(regions.len());
    let mut owner: HashMap<(Vertex, u8), usize> = HashMap::new();
    for (i, region) in regions.iter().enumerate() {
        for cell in region.iter() {
            match owner.get(&cell) {
                Some(&j) => {
                    dsu.union(i, j);
                }
                None => {
                    owner.insert(cell, i);
                }
            }
        }
    }

    let mut by_root: HashMap<usize, Vec<AgentId>> = HashMap::new();
    for i in 0..regions.len() {
        by_root.entry(dsu.find(i)).or_default().push(regions[i].agent);
    }
    let mut groups: Vec<Vec<AgentId>> = by_root.into_values().collect();
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort_by_key(|g| g[0]);
    groups
}
