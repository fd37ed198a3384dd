//! Lazy per-goal distance and optimal-path-count tables.
//!
//! A [`GoalContext`] answers three questions about one goal vertex:
//!
//! * `distance(v)`: length of a shortest path from `v` to the goal,
//! * `path_count(v)`: how many distinct shortest paths leave `v`,
//! * `candidates(v)`: the neighbors of `v` that lie on a shortest path.
//!
//! Both tables are filled lazily by a backward search that stops as soon as
//! the queried vertex settles, so an agent close to its goal never pays for
//! the rest of the map. Settled entries are final; repeated queries are
//! plain lookups.
//!
//! Path counts are kept as `f64`. Counts grow combinatorially and only their
//! ratios matter for sampling, so the wide dynamic range of a float is worth
//! more than exactness; integer-exact behavior is still guaranteed (and
//! tested) below 2^53.
//!
//! [`sample_balanced`](GoalContext::sample_balanced) draws a successor with
//! probability proportional to its path count, which makes a greedy rollout
//! select uniformly among *all* shortest paths instead of favoring whichever
//! neighbor happens to sort first.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use rand::Rng;
use smallvec::SmallVec;

use crate::grid::{GridGraph, Vertex};

const UNKNOWN: u32 = u32::MAX;

/// Per-goal lazy tables. Exclusive access is required while extending
/// (methods take `&mut self`); see [`HeuristicStore`] for sharing.
pub struct GoalContext {
    goal: Vertex,
    dist: Vec<u32>,
    frontier: VecDeque<Vertex>,
    /// Highest distance layer fully dequeued; every vertex at distance
    /// `<= popped_layer + 1` already has its final label.
    popped_layer: u32,
    exhausted: bool,
    expansions: u64,
    counts: Vec<f64>,
    count_heap: BinaryHeap<Reverse<(u32, u32)>>,
    count_enqueued: Vec<bool>,
}

impl GoalContext {
    pub fn new(graph: &GridGraph, goal: Vertex) -> Self {
        let n = graph.num_vertices();
        let mut dist = vec![UNKNOWN; n];
        dist[goal.index()] = 0;
        let mut count_heap = BinaryHeap::new();
        count_heap.push(Reverse((0, goal.0)));
        let mut count_enqueued = vec![false; n];
        count_enqueued[goal.index()] = true;
        GoalContext {
            goal,
            dist,
            frontier: VecDeque::from([goal]),
            popped_layer: 0,
            exhausted: false,
            expansions: 0,
            counts: vec![0.0; n],
            count_heap,
            count_enqueued,
        }
    }

    pub fn goal(&self) -> Vertex {
        self.goal
    }

    /// Number of vertices dequeued by the backward search so far.
    pub fn expansions(&self) -> u64 {
        self.expansions
    }

    /// Shortest-path distance from `v` to the goal, or `None` if the goal is
    /// unreachable from `v`.
    pub fn distance(&mut self, graph: &GridGraph, v: Vertex) -> Option<u32> {
        while self.dist[v.index()] == UNKNOWN && !self.exhausted {
            self.expand(graph);
        }
        match self.dist[v.index()] {
            UNKNOWN => None,
            d => Some(d),
        }
    }

    fn expand(&mut self, graph: &GridGraph) {
        match self.frontier.pop_front() {
            None => self.exhausted = true,
            Some(v) => {
                self.expansions += 1;
                let d = self.dist[v.index()];
                self.popped_layer = d;
                for &u in graph.neighbors(v) {
                    if self.dist[u.index()] == UNKNOWN {
                        self.dist[u.index()] = d + 1;
                        self.frontier.push_back(u);
                    }
                }
            }
        }
    }

    /// Advances the search until every vertex at distance `<= layer` carries
    /// its final label (or the component is exhausted).
    fn settle_layer(&mut self, graph: &GridGraph, layer: u32) {
        while !self.exhausted && self.popped_layer < layer {
            self.expand(graph);
        }
    }

    /// Neighbors of `v` whose distance is exactly one less, in vertex-id
    /// order. Empty at the goal and for vertices that cannot reach it.
    pub fn candidates(&mut self, graph: &GridGraph, v: Vertex) -> SmallVec<[Vertex; 4]> {
        let mut out = SmallVec::new();
        let Some(d) = self.distance(graph, v) else {
            return out;
        };
        if d == 0 {
            return out;
        }
        // Neighbors sit at distance d - 1 at best; their labels are final
        // once layer d has been dequeued, which settling v already did
        // unless v was labeled by the frontier without being popped yet.
        self.settle_layer(graph, d.saturating_sub(1));
        for &u in graph.neighbors(v) {
            if self.dist[u.index()] == d - 1 {
                out.push(u);
            }
        }
        out
    }

    /// Number of distinct shortest paths from `v` to the goal; `None` when
    /// unreachable. `path_count(goal) == 1` (the empty path).
    pub fn path_count(&mut self, graph: &GridGraph, v: Vertex) -> Option<f64> {
        let d = self.distance(graph, v)?;
        while self.counts[v.index()] == 0.0 {
            self.count_step(graph);
        }
        debug_assert!(self.dist[v.index()] == d);
        Some(self.counts[v.index()])
    }

    /// Settles the count of the nearest unsettled vertex. Vertices are
    /// processed in ascending distance order, so every candidate successor is
    /// already settled when its predecessors sum it up.
    fn count_step(&mut self, graph: &GridGraph) {
        let Reverse((d, raw)) = self.count_heap.pop().expect("count heap underrun");
        let v = Vertex(raw);
        // Comparing neighbor distances against d + 1 requires those labels
        // to be final.
        self.settle_layer(graph, d + 1);
        if d == 0 {
            self.counts[v.index()] = 1.0;
        } else {
            let mut total = 0.0;
            for &u in graph.neighbors(v) {
                if self.dist[u.index()] == d - 1 {
                    total += self.counts[u.index()];
                }
            }
            debug_assert!(total > 0.0);
            self.counts[v.index()] = total;
        }
        for &u in graph.neighbors(v) {
            if self.dist[u.index()] == d + 1 && !self.count_enqueued[u.index()] {
                self.count_enqueued[u.index()] = true;
                self.count_heap.push(Reverse((d + 1, u.0)));
            }
        }
    }

    /// Draws a successor of `v` with probability proportional to its path
    /// count, i.e. uniformly over all shortest paths through `v`. At the
    /// goal (or when the goal is unreachable) returns `v` itself: waiting.
    pub fn sample_balanced(&mut self, graph: &GridGraph, v: Vertex, rng: &mut impl Rng) -> Vertex {
        let cands = self.candidates(graph, v);
        if cands.is_empty() {
            return v;
        }
        let mut total = 0.0;
        for &u in &cands {
            total += self.path_count(graph, u).expect("candidate must reach goal");
        }
        let x: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for &u in &cands {
            acc += self.counts[u.index()];
            if x < acc {
                return u;
            }
        }
        *cands.last().unwrap()
    }

    /// Like [`sample_balanced`](Self::sample_balanced) but uniform over the
    /// candidate set: the naive tie-breaker the balanced one is compared
    /// against.
    pub fn sample_uniform(&mut self, graph: &GridGraph, v: Vertex, rng: &mut impl Rng) -> Vertex {
        let cands = self.candidates(graph, v);
        if cands.is_empty() {
            return v;
        }
        cands[rng.random_range(0..cands.len())]
    }
}

/// Shared pool of goal contexts. Agents with the same goal share one context
/// behind a mutex; a context is only ever mutated under that lock, and the
/// values it settles on are schedule-independent, so concurrent planners see
/// identical answers regardless of interleaving.
pub struct HeuristicStore {
    graph: Arc<GridGraph>,
    contexts: Mutex<HashMap<Vertex, Arc<Mutex<GoalContext>>>>,
}

impl HeuristicStore {
    pub fn new(graph: Arc<GridGraph>) -> Self {
        HeuristicStore { graph, contexts: Mutex::new(HashMap::new()) }
    }

    pub fn graph(&self) -> &GridGraph {
        &self.graph
    }

    pub fn context(&self, goal: Vertex) -> Arc<Mutex<GoalContext>> {
        let mut map = self.contexts.lock().unwrap();
        map.entry(goal)
            .or_insert_with(|| Arc::new(Mutex::new(GoalContext::new(&self.graph, goal))))
            .clone()
    }

    pub fn distance(&self, v: Vertex, goal: Vertex) -> Option<u32> {
        self.context(goal).lock().unwrap().distance(&self.graph, v)
    }

    /// Drops contexts for goals no longer in use (stale lifelong goals).
    pub fn retain_goals(&self, keep: impl Fn(Vertex) -> bool) {
        self.contexts.lock().unwrap().retain(|&g, _| keep(g));
    }

    pub fn len(&self) -> usize {
        self.contexts.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridMap;
    use crate::rng;

    fn open3() -> GridGraph {
        GridGraph::build(&GridMap::parse("type octile\nheight 3\nwidth 3\nmap\n...\n...\n...\n").unwrap())
    }

    fn ring3() -> GridGraph {
        GridGraph::build(&GridMap::parse("type octile\nheight 3\nwidth 3\nmap\n...\n.@.\n...\n").unwrap())
    }

    #[test]
    fn distances_on_open_grid() {
        let g = open3();
        let goal = g.vertex_at(2, 2).unwrap();
        let mut ctx = GoalContext::new(&g, goal);
        assert_eq!(ctx.distance(&g, g.vertex_at(0, 0).unwrap()), Some(4));
        assert_eq!(ctx.distance(&g, g.vertex_at(2, 0).unwrap()), Some(2));
        assert_eq!(ctx.distance(&g, goal), Some(0));
    }

    #[test]
    fn distance_routes_around_obstacles() {
        let g = ring3();
        let goal = g.vertex_at(2, 2).unwrap();
        let mut ctx = GoalContext::new(&g, goal);
        assert_eq!(ctx.distance(&g, g.vertex_at(0, 0).unwrap()), Some(4));
    }

    #[test]
    fn unreachable_vertices_report_none() {
        // 0-1 joined, 2 isolated.
        let g = GridGraph::from_lists(vec![vec![1], vec![0], vec![]]);
        let mut ctx = GoalContext::new(&g, Vertex(0));
        assert_eq!(ctx.distance(&g, Vertex(2)), None);
        assert_eq!(ctx.path_count(&g, Vertex(2)), None);
        assert!(ctx.candidates(&g, Vertex(2)).is_empty());
    }

    #[test]
    fn path_counts_on_open_grid() {
        let g = open3();
        let goal = g.vertex_at(2, 2).unwrap();
        let mut ctx = GoalContext::new(&g, goal);
        assert_eq!(ctx.path_count(&g, g.vertex_at(0, 0).unwrap()), Some(6.0));
        assert_eq!(ctx.path_count(&g, goal), Some(1.0));
    }

    #[test]
    fn corridor_has_one_path_and_ring_has_two() {
        let corridor = GridGraph::build(
            &GridMap::parse("type octile\nheight 1\nwidth 5\nmap\n.....\n").unwrap(),
        );
        let mut ctx = GoalContext::new(&corridor, Vertex(4));
        assert_eq!(ctx.path_count(&corridor, Vertex(0)), Some(1.0));

        let g = ring3();
        let goal = g.vertex_at(2, 2).unwrap();
        let mut ctx = GoalContext::new(&g, goal);
        assert_eq!(ctx.path_count(&g, g.vertex_at(0, 0).unwrap()), Some(2.0));
    }

    #[test]
    fn candidate_sets() {
        let g = open3();
        let goal = g.vertex_at(2, 2).unwrap();
        let mut ctx = GoalContext::new(&g, goal);
        let c = ctx.candidates(&g, g.vertex_at(0, 0).unwrap());
        assert_eq!(c.as_slice(), [g.vertex_at(1, 0).unwrap(), g.vertex_at(0, 1).unwrap()]);
        assert!(ctx.candidates(&g, goal).is_empty());

        let g = ring3();
        let goal = g.vertex_at(2, 2).unwrap();
        let mut ctx = GoalContext::new(&g, goal);
        let c = ctx.candidates(&g, g.vertex_at(0, 1).unwrap());
        assert_eq!(c.as_slice(), [g.vertex_at(0, 2).unwrap()]);
    }

    #[test]
    fn balanced_sampling_weights_follow_counts() {
        let g = open3();
        let goal = g.vertex_at(2, 2).unwrap();
        let mut ctx = GoalContext::new(&g, goal);
        let v = g.vertex_at(1, 0).unwrap();
        // Successors: (2,0) carries 1 path, (1,1) carries 2.
        assert_eq!(ctx.path_count(&g, g.vertex_at(2, 0).unwrap()), Some(1.0));
        assert_eq!(ctx.path_count(&g, g.vertex_at(1, 1).unwrap()), Some(2.0));
        let mut r = rng::stream(1, 0, rng::Domain::Proposal, 0, 0);
        let n = 30_000;
        let hits = (0..n)
            .filter(|_| ctx.sample_balanced(&g, v, &mut r) == g.vertex_at(2, 0).unwrap())
            .count();
        let frac = hits as f64 / n as f64;
        assert!((frac - 1.0 / 3.0).abs() < 0.02, "got {frac}");
    }

    #[test]
    fn sampling_at_goal_waits() {
        let g = open3();
        let goal = g.vertex_at(2, 2).unwrap();
        let mut ctx = GoalContext::new(&g, goal);
        let mut r = rng::stream(1, 0, rng::Domain::Proposal, 0, 0);
        assert_eq!(ctx.sample_balanced(&g, goal, &mut r), goal);
        assert_eq!(ctx.sample_uniform(&g, goal, &mut r), goal);
    }

    #[test]
    fn search_stops_at_the_settlement_layer() {
        let map = GridMap::parse(&format!(
            "type octile\nheight 9\nwidth 9\nmap\n{}",
            ".........\n".repeat(9)
        ))
        .unwrap();
        let g = GridGraph::build(&map);
        let goal = g.vertex_at(4, 4).unwrap();
        let mut ctx = GoalContext::new(&g, goal);
        ctx.distance(&g, g.vertex_at(4, 3).unwrap());
        // Vertices within distance 1 of the goal: the goal plus 4 neighbors.
        assert!(ctx.expansions() <= 5, "expanded {}", ctx.expansions());
        let before = ctx.expansions();
        ctx.distance(&g, g.vertex_at(4, 3).unwrap());
        assert_eq!(ctx.expansions(), before);
    }

    #[test]
    fn store_shares_contexts_per_goal() {
        let g = Arc::new(open3());
        let store = HeuristicStore::new(g.clone());
        let goal = g.vertex_at(2, 2).unwrap();
        let a = store.context(goal);
        let b = store.context(goal);
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(store.distance(g.vertex_at(0, 0).unwrap(), goal), Some(4));
        store.retain_goals(|_| false);
        assert!(store.is_empty());
    }
}
