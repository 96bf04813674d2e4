use super::{DagEnv, StateId, Transition};
use crate::error::{invalid, Result};

/// Complete `g`-ary tree of depth `h`. Nodes are numbered breadth first, the
/// leaves are the terminating states and the sink follows the last leaf.
#[derive(Clone, Debug)]
pub struct RegularTree {
    branching: usize,
    depth: usize,
    level_offsets: Vec<usize>,
    leaf_rewards: Vec<f64>,
    max_reward: f64,
}

impl RegularTree {
    /// Tree with unit reward on every leaf.
    pub fn new(branching: usize, depth: usize) -> Result<Self> {
        let leaves = leaf_count(branching, depth)?;
        Self::with_rewards(branching, depth, vec![1.0; leaves])
    }

    pub fn with_rewards(branching: usize, depth: usize, leaf_rewards: Vec<f64>) -> Result<Self> {
        let leaves = leaf_count(branching, depth)?;
        if leaf_rewards.len() != leaves {
            return Err(invalid(format!(
                "expected {leaves} leaf rewards, got {}",
                leaf_rewards.len()
            )));
        }
        if let Some(&r) = leaf_rewards.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(crate::GfnError::NonPositiveReward(r));
        }
        let mut level_offsets = Vec::with_capacity(depth + 2);
        let mut offset = 0usize;
        let mut width = 1usize;
        for _ in 0..=depth {
            level_offsets.push(offset);
            offset += width;
            width *= branching;
        }
        level_offsets.push(offset);
        let max_reward = leaf_rewards.iter().copied().fold(f64::MIN, f64::max);
        Ok(Self {
            branching,
            depth,
            level_offsets,
            leaf_rewards,
            max_reward,
        })
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_rewards.len()
    }

    pub fn leaf_rewards(&self) -> &[f64] {
        &self.leaf_rewards
    }

    /// State id of the `i`-th leaf, left to right.
    pub fn leaf(&self, i: usize) -> StateId {
        StateId(self.level_offsets[self.depth] + i)
    }

    fn level_of(&self, s: StateId) -> usize {
        // offsets are increasing; the level is the last offset <= s
        self.level_offsets.partition_point(|&o| o <= s.0) - 1
    }

    fn leaf_index(&self, s: StateId) -> Option<usize> {
        let first = self.level_offsets[self.depth];
        (s.0 >= first && s.0 < self.level_offsets[self.depth + 1]).then(|| s.0 - first)
    }
}

fn leaf_count(branching: usize, depth: usize) -> Result<usize> {
    if branching < 2 {
        return Err(invalid("tree branching must be at least 2"));
    }
    if depth < 1 {
        return Err(invalid("tree depth must be at least 1"));
    }
    u32::try_from(depth)
        .ok()
        .and_then(|d| branching.checked_pow(d))
        .ok_or_else(|| invalid("tree too large"))
}

impl DagEnv for RegularTree {
    fn num_states(&self) -> usize {
        self.level_offsets[self.depth + 1] + 1
    }

    fn sink(&self) -> StateId {
        StateId(self.level_offsets[self.depth + 1])
    }

    fn num_forward_actions(&self) -> usize {
        self.branching + 1
    }

    fn num_backward_actions(&self) -> usize {
        1
    }

    fn forward_transitions(&self, s: StateId) -> Vec<Transition> {
        if s == self.sink() {
            return Vec::new();
        }
        let level = self.level_of(s);
        if level == self.depth {
            return vec![Transition {
                action: self.branching,
                state: self.sink(),
            }];
        }
        let pos = s.0 - self.level_offsets[level];
        let first = self.level_offsets[level + 1] + pos * self.branching;
        (0..self.branching)
            .map(|j| Transition {
                action: j,
                state: StateId(first + j),
            })
            .collect()
    }

    fn backward_transitions(&self, s: StateId) -> Vec<Transition> {
        if s.0 == 0 || s == self.sink() {
            return Vec::new();
        }
        let level = self.level_of(s);
        let pos = s.0 - self.level_offsets[level];
        vec![Transition {
            action: 0,
            state: StateId(self.level_offsets[level - 1] + pos / self.branching),
        }]
    }

    fn is_terminating(&self, s: StateId) -> bool {
        self.leaf_index(s).is_some()
    }

    fn reward(&self, s: StateId) -> f64 {
        self.leaf_index(s).map_or(0.0, |i| self.leaf_rewards[i])
    }

    fn feature_dim(&self) -> usize {
        self.num_states() - 1
    }

    fn encode(&self, s: StateId, out: &mut [f64]) {
        out.fill(0.0);
        if s != self.sink() {
            out[s.0] = 1.0;
        }
    }

    fn max_trajectory_len(&self) -> usize {
        self.depth + 1
    }

    fn terminating_states(&self) -> Vec<StateId> {
        (0..self.num_leaves()).map(|i| self.leaf(i)).collect()
    }

    fn is_mode(&self, s: StateId) -> bool {
        self.leaf_index(s)
            .is_some_and(|i| self.leaf_rewards[i] >= self.max_reward)
    }

    fn reachable_terminals(&self, s: StateId) -> Option<u64> {
        if s == self.sink() {
            return Some(0);
        }
        let remaining = (self.depth - self.level_of(s)) as u32;
        Some((self.branching as u64).pow(remaining))
    }

    fn describe(&self) -> String {
        format!("tree(g={}, h={})", self.branching, self.depth)
    }

    fn is_pure_terminal(&self, s: StateId) -> bool {
        self.is_terminating(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_of_small_tree() {
        let t = RegularTree::new(3, 2).unwrap();
        assert_eq!(t.num_states(), 1 + 3 + 9 + 1);
        assert_eq!(t.sink(), StateId(13));
        assert_eq!(t.children(StateId(0)), vec![StateId(1), StateId(2), StateId(3)]);
        assert_eq!(t.children(StateId(2)), vec![StateId(7), StateId(8), StateId(9)]);
        assert_eq!(t.parents(StateId(9)), vec![StateId(2)]);
        assert_eq!(t.children(StateId(9)), vec![t.sink()]);
        assert_eq!(t.terminating_states().len(), 9);
        assert_eq!(t.reachable_terminals(StateId(0)), Some(9));
        assert_eq!(t.reachable_terminals(StateId(1)), Some(3));
    }

    #[test]
    fn every_non_root_state_has_one_parent() {
        let t = RegularTree::new(2, 4).unwrap();
        for s in 1..t.num_states() - 1 {
            assert_eq!(t.parents(StateId(s)).len(), 1);
        }
        assert!(t.parents(StateId(0)).is_empty());
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(RegularTree::new(1, 3).is_err());
        assert!(RegularTree::new(2, 0).is_err());
        assert!(RegularTree::with_rewards(2, 1, vec![1.0, 0.0]).is_err());
        assert!(RegularTree::with_rewards(2, 1, vec![1.0]).is_err());
    }
}
