//! Finite DAG environments.
//!
//! Every environment numbers its states densely. Index 0 is the initial
//! state and a distinguished index (usually the last) is the sink. The exit
//! edge `x -> sink` marks `x` as terminating; rewards live on terminating
//! states only.

mod enumerate;
mod hypergrid;
mod one_more_mode;
mod tree;

use serde::{Deserialize, Serialize};

pub use enumerate::{
    check_structure, enumerate_terminating, reachable_terminal_counts, topological_order, ReachableCounts,
    DEFAULT_STATE_CAP,
};
pub use hypergrid::{hypergrid_default_r0, hypergrid_reward, Hypergrid};
pub use one_more_mode::{one_more_mode_tree, OneMoreMode};
pub use tree::RegularTree;

/// Dense index into an environment's state table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub usize);

impl StateId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for StateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One outgoing (or incoming) edge together with the action slot that
/// produces it in the policy's fixed action space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transition {
    pub action: usize,
    pub state: StateId,
}

/// A finite directed acyclic graph with rewards on terminating states.
///
/// `forward_transitions` enumerates children in action order, including the
/// exit edge to the sink for terminating states. `backward_transitions`
/// enumerates parents of a non-sink state; the sink's parents are the
/// terminating states and are not policy-driven.
pub trait DagEnv: Send + Sync {
    fn num_states(&self) -> usize;

    fn initial_state(&self) -> StateId {
        StateId(0)
    }

    fn sink(&self) -> StateId;

    /// Size of the forward action space (policy output width).
    fn num_forward_actions(&self) -> usize;

    /// Size of the backward action space.
    fn num_backward_actions(&self) -> usize;

    fn forward_transitions(&self, s: StateId) -> Vec<Transition>;

    fn backward_transitions(&self, s: StateId) -> Vec<Transition>;

    fn is_terminating(&self, s: StateId) -> bool;

    /// Positive for terminating states, zero elsewhere.
    fn reward(&self, s: StateId) -> f64;

    fn feature_dim(&self) -> usize;

    /// Writes the approximator features of `s` into `out` (length `feature_dim`).
    fn encode(&self, s: StateId, out: &mut [f64]);

    /// Maximum number of edges on a complete trajectory, exit edge included.
    fn max_trajectory_len(&self) -> usize;

    /// All terminating states in index order.
    fn terminating_states(&self) -> Vec<StateId> {
        (0..self.num_states())
            .map(StateId)
            .filter(|&s| self.is_terminating(s))
            .collect()
    }

    /// Mode predicate used for mode counting. Defaults to "no modes".
    fn is_mode(&self, _s: StateId) -> bool {
        false
    }

    /// Region label of a mode state, for counting distinct mode regions.
    /// Defaults to one region per mode state.
    fn mode_region(&self, s: StateId) -> Option<usize> {
        self.is_mode(s).then_some(s.0)
    }

    /// Distinct terminating states reachable from `s` (itself included), when
    /// a closed form is known.
    fn reachable_terminals(&self, _s: StateId) -> Option<u64> {
        None
    }

    fn describe(&self) -> String;

    fn children(&self, s: StateId) -> Vec<StateId> {
        self.forward_transitions(s).into_iter().map(|t| t.state).collect()
    }

    fn parents(&self, s: StateId) -> Vec<StateId> {
        if s == self.sink() {
            self.terminating_states()
        } else {
            self.backward_transitions(s).into_iter().map(|t| t.state).collect()
        }
    }

    /// Terminating state whose only child is the sink. Its state flow is
    /// pinned to the reward.
    fn is_pure_terminal(&self, s: StateId) -> bool {
        if !self.is_terminating(s) {
            return false;
        }
        let children = self.forward_transitions(s);
        children.len() == 1 && children[0].state == self.sink()
    }

    fn encode_vec(&self, s: StateId) -> Vec<f64> {
        let mut out = vec![0.0; self.feature_dim()];
        self.encode(s, &mut out);
        out
    }
}
