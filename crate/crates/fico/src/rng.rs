//! Deterministic random-stream derivation.
//!
//! Every source of randomness in a run is a ChaCha8 stream keyed by the run
//! seed plus a structural address (timestep, domain, sub-index, agent). Two
//! consumers never share a stream, so results cannot depend on scheduling or
//! thread budget: any interleaving of stream draws yields the same values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Keeping them distinct means e.g. proposal sampling can
/// never consume draws that step ordering inside a group replan relies on.
#[derive(Clone, Copy, Debug)]
#[repr(u32)]
pub enum Domain {
    /// Per-agent individual proposal rollouts.
    Proposal = 1,
    /// Per-agent tie-breaking inside a single planning transition.
    TieBreak = 2,
    /// Actuator delay sampling.
    Actuator = 3,
    /// Environment dynamics (agent addition).
    Environment = 4,
    /// Per-agent lifelong goal streams.
    GoalStream = 5,
    /// Synthetic instance generation.
    Instance = 6,
}

/// Derives the stream at address `(seed, t, domain, sub, agent)`.
pub fn stream(seed: u64, t: u64, domain: Domain, sub: u32, agent: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&t.to_le_bytes());
    key[16..20].copy_from_slice(&(domain as u32).to_le_bytes());
    key[20..24].copy_from_slice(&sub.to_le_bytes());
    key[24..32].copy_from_slice(&agent.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Stream for a component that lives across the whole run (actuator,
/// environment), rather than being re-derived per step.
pub fn component(seed: u64, domain: Domain) -> ChaCha8Rng {
    stream(seed, u64::MAX, domain, 0, 0)
}
