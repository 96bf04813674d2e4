use std::collections::VecDeque;

use super::{DagEnv, StateId};
use crate::error::{invalid, GfnError, Result};

/// Environments with more states than this are handled by sampling only.
pub const DEFAULT_STATE_CAP: usize = 2_000_000;

fn guard(env: &dyn DagEnv, cap: usize) -> Result<()> {
    if env.num_states() > cap {
        return Err(GfnError::CapExceeded {
            what: "environment",
            count: env.num_states(),
            cap,
        });
    }
    Ok(())
}

/// Kahn's algorithm over the forward edges. Fails if the graph has a cycle.
pub fn topological_order(env: &dyn DagEnv, cap: usize) -> Result<Vec<StateId>> {
    guard(env, cap)?;
    let n = env.num_states();
    let mut indegree = vec![0usize; n];
    for s in 0..n {
        for c in env.children(StateId(s)) {
            indegree[c.0] += 1;
        }
    }
    let mut queue: VecDeque<StateId> = (0..n).filter(|&s| indegree[s] == 0).map(StateId).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(s) = queue.pop_front() {
        order.push(s);
        for c in env.children(s) {
            indegree[c.0] -= 1;
            if indegree[c.0] == 0 {
                queue.push_back(c);
            }
        }
    }
    if order.len() != n {
        return Err(invalid("environment graph contains a cycle"));
    }
    Ok(order)
}

/// All terminating states paired with their rewards.
pub fn enumerate_terminating(env: &dyn DagEnv, cap: usize) -> Result<Vec<(StateId, f64)>> {
    guard(env, cap)?;
    Ok(env
        .terminating_states()
        .into_iter()
        .map(|s| (s, env.reward(s)))
        .collect())
}

/// Exhaustive structural check: acyclicity, parent/child symmetry, source and
/// sink shape, and reward positivity on the terminating set.
pub fn check_structure(env: &dyn DagEnv, cap: usize) -> Result<()> {
    topological_order(env, cap)?;
    let n = env.num_states();
    let s0 = env.initial_state();
    let sink = env.sink();
    if !env.parents(s0).is_empty() {
        return Err(invalid("initial state has parents"));
    }
    if !env.children(sink).is_empty() {
        return Err(invalid("sink has children"));
    }
    for s in (0..n).map(StateId) {
        let children = env.children(s);
        for &c in &children {
            if !env.parents(c).contains(&s) {
                return Err(GfnError::InvalidEdge { from: s.0, to: c.0 });
            }
        }
        for p in env.parents(s) {
            if !env.children(p).contains(&s) {
                return Err(GfnError::InvalidEdge { from: p.0, to: s.0 });
            }
        }
        let exits = children.contains(&sink);
        if env.is_terminating(s) != exits {
            return Err(invalid(format!("state {s}: terminating flag disagrees with exit edge")));
        }
        let r = env.reward(s);
        if env.is_terminating(s) {
            if !(r > 0.0 && r.is_finite()) {
                return Err(GfnError::NonPositiveReward(r));
            }
        } else if r != 0.0 {
            return Err(invalid(format!("non-terminating state {s} carries reward")));
        }
        if s != sink && s != s0 && env.parents(s).is_empty() {
            return Err(invalid(format!("state {s} is unreachable")));
        }
    }
    Ok(())
}

/// Number of distinct terminating states reachable from each state.
#[derive(Clone, Debug)]
pub struct ReachableCounts {
    counts: Vec<u64>,
}

impl ReachableCounts {
    pub fn get(&self, s: StateId) -> u64 {
        self.counts[s.0]
    }

    /// Count reachable from the edge `from -> to`; the exit edge reaches one.
    pub fn edge(&self, to: StateId, sink: StateId) -> u64 {
        if to == sink {
            1
        } else {
            self.counts[to.0]
        }
    }
}

/// Uses the environment's closed form when it has one, otherwise a reverse
/// topological sweep over reachability bitsets.
pub fn reachable_terminal_counts(env: &dyn DagEnv, cap: usize) -> Result<ReachableCounts> {
    guard(env, cap)?;
    let n = env.num_states();
    let closed: Option<Vec<u64>> = (0..n).map(|s| env.reachable_terminals(StateId(s))).collect();
    if let Some(counts) = closed {
        return Ok(ReachableCounts { counts });
    }
    let order = topological_order(env, cap)?;
    let terminals = env.terminating_states();
    let words = terminals.len().div_ceil(64);
    if n.saturating_mul(words) > cap.saturating_mul(8) {
        return Err(GfnError::CapExceeded {
            what: "reachability table",
            count: n * words,
            cap: cap * 8,
        });
    }
    let mut slot = vec![usize::MAX; n];
    for (i, t) in terminals.iter().enumerate() {
        slot[t.0] = i;
    }
    let mut bits = vec![0u64; n * words];
    for &s in order.iter().rev() {
        let mut acc = vec![0u64; words];
        if slot[s.0] != usize::MAX {
            acc[slot[s.0] / 64] |= 1 << (slot[s.0] % 64);
        }
        for c in env.children(s) {
            for (a, b) in acc.iter_mut().zip(&bits[c.0 * words..(c.0 + 1) * words]) {
                *a |= b;
            }
        }
        bits[s.0 * words..(s.0 + 1) * words].copy_from_slice(&acc);
    }
    let counts = (0..n)
        .map(|s| {
            bits[s * words..(s + 1) * words]
                .iter()
                .map(|w| w.count_ones() as u64)
                .sum()
        })
        .collect();
    Ok(ReachableCounts { counts })
}
