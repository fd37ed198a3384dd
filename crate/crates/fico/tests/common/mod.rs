//! Independent oracles shared by the integration tests. Everything here is
//! written the slow, obvious way on purpose: plain breadth-first searches,
//! pairwise scans and brute-force enumeration, so the optimized library code
//! has something dumber to be checked against.
//!
//! Each test binary pulls in a different subset, hence the blanket allow.
#![allow(dead_code)]

use std::collections::{HashSet, VecDeque};
use std::sync::Arc;

use fico::conflict::FinalizedPlans;
use fico::grid::{GridGraph, GridMap, Vertex};
use fico::system::AgentId;
use rand::Rng;

/// Builds a random obstacle grid. The returned graph may be disconnected;
/// instance builders that need connectivity pick the largest component.
pub fn random_obstacle_graph(rng: &mut impl Rng, w: u32, h: u32, p_block: f64) -> Arc<GridGraph> {
    let mut rows = Vec::new();
    for _ in 0..h {
        let row: String =
            (0..w).map(|_| if rng.random_bool(p_block) { '@' } else { '.' }).collect();
        rows.push(row);
    }
    let text = format!("type octile\nheight {}\nwidth {}\nmap\n{}\n", h, w, rows.join("\n"));
    Arc::new(GridGraph::build(&GridMap::parse(&text).unwrap()))
}

/// Plain breadth-first shortest-path distance.
pub fn bfs_distance(graph: &GridGraph, from: Vertex, to: Vertex) -> Option<u32> {
    if from == to {
        return Some(0);
    }
    let mut dist = vec![u32::MAX; graph.num_vertices()];
    dist[from.index()] = 0;
    let mut queue = VecDeque::from([from]);
    while let Some(v) = queue.pop_front() {
        for &u in graph.neighbors(v) {
            if dist[u.index()] == u32::MAX {
                dist[u.index()] = dist[v.index()] + 1;
                if u == to {
                    return Some(dist[u.index()]);
                }
                queue.push_back(u);
            }
        }
    }
    None
}

/// Pairwise conflict detection straight from the definitions: two plans
/// conflict when they share a vertex at the same step or traverse the same
/// edge in opposite directions. Returns (conflict_free, conflicting), both
/// sorted, with `forced` agents always conflicting.
pub fn naive_partition(
    plans: &[Vec<Vertex>],
    forced: &[bool],
) -> (Vec<AgentId>, Vec<AgentId>) {
    let n = plans.len();
    let mut conflicting = forced.to_vec();
    for a in 0..n {
        for b in (a + 1)..n {
            let steps = plans[a].len().min(plans[b].len());
            let mut hit = false;
            for tau in 0..steps {
                if plans[a][tau] == plans[b][tau] {
                    hit = true;
                }
                if tau + 1 < steps
                    && plans[a][tau] != plans[b][tau]
                    && plans[a][tau + 1] == plans[b][tau]
                    && plans[b][tau + 1] == plans[a][tau]
                {
                    hit = true;
                }
            }
            if hit {
                conflicting[a] = true;
                conflicting[b] = true;
            }
        }
    }
    let cf = (0..n).filter(|&a| !conflicting[a]).collect();
    let c = (0..n).filter(|&a| conflicting[a]).collect();
    (cf, c)
}

/// Every legal `horizon`-step trajectory from `start`: stay or move to a
/// neighbor each step, never entering a finalized-occupied cell and never
/// swapping with a finalized agent. Brute force by construction.
pub fn enumerate_trajectories(
    graph: &GridGraph,
    start: Vertex,
    horizon: usize,
    finalized: &FinalizedPlans,
) -> Vec<Vec<Vertex>> {
    let mut done = Vec::new();
    let mut stack = vec![vec![start]];
    while let Some(prefix) = stack.pop() {
        if prefix.len() == horizon + 1 {
            done.push(prefix);
            continue;
        }
        let tau = prefix.len() - 1;
        let v = *prefix.last().unwrap();
        for u in graph.neighbors(v).iter().copied().chain(std::iter::once(v)) {
            if finalized.occupant(u, tau + 1).is_some() {
                continue;
            }
            if u != v && finalized.swap_blocked(v, u, tau) {
                continue;
            }
            let mut next = prefix.clone();
            next.push(u);
            stack.push(next);
        }
    }
    done
}

/// Whether two equally long trajectories collide (shared vertex at any step,
/// or a swap).
pub fn trajectories_conflict(a: &[Vertex], b: &[Vertex]) -> bool {
    for tau in 0..a.len() {
        if a[tau] == b[tau] {
            return true;
        }
        if tau + 1 < a.len() && a[tau] != b[tau] && a[tau + 1] == b[tau] && b[tau + 1] == a[tau] {
            return true;
        }
    }
    false
}

/// Distinct vertices of the largest connected component, ascending.
pub fn largest_component_vertices(graph: &GridGraph) -> Vec<Vertex> {
    let mut counts = std::collections::HashMap::new();
    for v in 0..graph.num_vertices() {
        *counts.entry(graph.component(Vertex(v as u32))).or_insert(0usize) += 1;
    }
    let best = counts
        .iter()
        .max_by_key(|&(comp, count)| (*count, std::cmp::Reverse(*comp)))
        .map(|(&comp, _)| comp)
        .unwrap();
    (0..graph.num_vertices())
        .map(|v| Vertex(v as u32))
        .filter(|&v| graph.component(v) == best)
        .collect()
}

/// Samples `n` distinct starts and distinct goals from the largest
/// component. Goals are distinct from each other but may equal someone
/// else's start.
pub fn random_endpoints(
    graph: &GridGraph,
    n: usize,
    rng: &mut impl Rng,
) -> Option<(Vec<Vertex>, Vec<Vertex>)> {
    let pool = largest_component_vertices(graph);
    if pool.len() < n {
        return None;
    }
    let mut sets = Vec::new();
    for _ in 0..2 {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let v = pool[rng.random_range(0..pool.len())];
            if seen.insert(v) {
                out.push(v);
            }
        }
        sets.push(out);
    }
    let goals = sets.pop().unwrap();
    let starts = sets.pop().unwrap();
    Some((starts, goals))
}
