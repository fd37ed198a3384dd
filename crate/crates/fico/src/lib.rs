//! Closed-loop multi-agent path finding on 4-connected grids.
//!
//! The crate separates the *system* (states, actuators, environments) from
//! the *planners* that drive it. Each simulated step, a controller proposes
//! one synchronous movement, an actuator perturbs it (or not), and the
//! environment applies it, hands out new goals, and possibly adds agents.
//!
//! Two controllers are provided:
//!
//! * [`planner::PibtController`]: single-step priority-inheritance planning
//!   with backtracking, the classic baseline.
//! * [`planner::FicoController`]: plans over a short horizon, finalizes all
//!   agents whose individually optimal plans are mutually conflict-free, and
//!   replans only the rest in provably independent groups.
//!
//! ```
//! use std::sync::Arc;
//! use fico::grid::{GridGraph, GridMap};
//! use fico::planner::{FicoController, PlannerConfig};
//! use fico::sim::{run_closed_loop, Termination};
//! use fico::system::{Environment, Instance, PerfectActuator};
//!
//! let map = GridMap::parse("type octile\nheight 8\nwidth 8\nmap\n........\n........\n........\n........\n........\n........\n........\n........\n").unwrap();
//! let graph = Arc::new(GridGraph::build(&map));
//! let instance = Instance::synthetic(graph.clone(), 6, 7).unwrap();
//! let controller = FicoController::new(graph.clone(), PlannerConfig { seed: 7, ..Default::default() });
//! let termination = Termination::all_at_goal(&graph, 6);
//! let (trace, _) = run_closed_loop(
//!     Box::new(controller),
//!     Box::new(PerfectActuator),
//!     Environment::new(),
//!     instance,
//!     termination,
//! ).unwrap();
//! assert!(trace.complete);
//! ```

pub mod conflict;
pub mod grid;
pub mod heuristics;
pub mod planner;
pub mod rng;
pub mod sim;
pub mod system;

/// Runs every Rust snippet in the guide under `book/` as a doc-test, so the
/// book cannot drift from the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/closed-loop.md")]
    struct ClosedLoop;
    #[doc = include_str!("../../../book/src/maps-and-instances.md")]
    struct MapsAndInstances;
    #[doc = include_str!("../../../book/src/distances-and-ties.md")]
    struct DistancesAndTies;
    #[doc = include_str!("../../../book/src/detection-and-grouping.md")]
    struct DetectionAndGrouping;
    #[doc = include_str!("../../../book/src/planners.md")]
    struct Planners;
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    struct Benchmarks;
    #[doc = include_str!("../../../book/src/determinism.md")]
    struct Determinism;
}
