use std::collections::BTreeMap;
use std::sync::Arc;

use super::{DagEnv, RegularTree, StateId, Transition};
use crate::error::{invalid, Result};

/// Base environment with extra reward `R'(x) >= 0` on a subset of terminating
/// states: `R_new(x) = R_base(x) + R'(x)`.
#[derive(Clone)]
pub struct OneMoreMode {
    base: Arc<dyn DagEnv>,
    added: BTreeMap<StateId, f64>,
}

impl std::fmt::Debug for OneMoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OneMoreMode")
            .field("base", &self.base.describe())
            .field("added", &self.added)
            .finish()
    }
}

impl OneMoreMode {
    pub fn new(base: Arc<dyn DagEnv>, added: BTreeMap<StateId, f64>) -> Result<Self> {
        for (&s, &r) in &added {
            if !base.is_terminating(s) {
                return Err(crate::GfnError::NotTerminating(s.0));
            }
            if !(r >= 0.0 && r.is_finite()) {
                return Err(invalid(format!("added reward at {s} must be nonnegative")));
            }
        }
        Ok(Self { base, added })
    }

    pub fn base(&self) -> &Arc<dyn DagEnv> {
        &self.base
    }

    /// `R'` restricted to its support.
    pub fn added(&self) -> &BTreeMap<StateId, f64> {
        &self.added
    }
}

/// The one-more-mode pair on a `g`-ary tree of depth `h`: the last leaf starts
/// at reward `epsilon` and is promoted to reward 1.
pub fn one_more_mode_tree(branching: usize, depth: usize, epsilon: f64) -> Result<(RegularTree, OneMoreMode)> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(invalid("epsilon must lie in (0, 1]"));
    }
    let unit = RegularTree::new(branching, depth)?;
    let mut rewards = unit.leaf_rewards().to_vec();
    let last = rewards.len() - 1;
    rewards[last] = epsilon;
    let prev = RegularTree::with_rewards(branching, depth, rewards)?;
    let promoted = prev.leaf(last);
    let mut added = BTreeMap::new();
    if epsilon < 1.0 {
        added.insert(promoted, 1.0 - epsilon);
    }
    let new = OneMoreMode::new(Arc::new(prev.clone()), added)?;
    Ok((prev, new))
}

impl DagEnv for OneMoreMode {
    fn num_states(&self) -> usize {
        self.base.num_states()
    }

    fn initial_state(&self) -> StateId {
        self.base.initial_state()
    }

    fn sink(&self) -> StateId {
        self.base.sink()
    }

    fn num_forward_actions(&self) -> usize {
        self.base.num_forward_actions()
    }

    fn num_backward_actions(&self) -> usize {
        self.base.num_backward_actions()
    }

    fn forward_transitions(&self, s: StateId) -> Vec<Transition> {
        self.base.forward_transitions(s)
    }

    fn backward_transitions(&self, s: StateId) -> Vec<Transition> {
        self.base.backward_transitions(s)
    }

    fn is_terminating(&self, s: StateId) -> bool {
        self.base.is_terminating(s)
    }

    fn reward(&self, s: StateId) -> f64 {
        self.base.reward(s) + self.added.get(&s).copied().unwrap_or(0.0)
    }

    fn feature_dim(&self) -> usize {
        self.base.feature_dim()
    }

    fn encode(&self, s: StateId, out: &mut [f64]) {
        self.base.encode(s, out)
    }

    fn max_trajectory_len(&self) -> usize {
        self.base.max_trajectory_len()
    }

    fn terminating_states(&self) -> Vec<StateId> {
        self.base.terminating_states()
    }

    fn is_mode(&self, s: StateId) -> bool {
        self.base.is_mode(s) || self.added.get(&s).is_some_and(|&r| r > 0.0)
    }

    fn reachable_terminals(&self, s: StateId) -> Option<u64> {
        self.base.reachable_terminals(s)
    }

    fn describe(&self) -> String {
        format!("one_more_mode({}, |X_sub|={})", self.base.describe(), self.added.len())
    }

    fn is_pure_terminal(&self, s: StateId) -> bool {
        self.base.is_pure_terminal(s)
    }
}
