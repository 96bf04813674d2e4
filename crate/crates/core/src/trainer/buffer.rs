use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::envs::StateId;
use crate::error::{invalid, GfnError, Result};
use crate::policy::Trajectory;

/// Highest-reward terminating states seen so far, deduplicated, ordered by
/// reward descending then state index ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKBuffer {
    capacity: usize,
    entries: Vec<(StateId, f64)>,
    members: BTreeSet<StateId>,
}

fn ranks_before(a: (StateId, f64), b: (StateId, f64)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

impl TopKBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("buffer capacity must be positive"));
        }
        Ok(Self {
            capacity,
            entries: Vec::new(),
            members: BTreeSet::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn entries(&self) -> &[(StateId, f64)] {
        &self.entries
    }

    pub fn contains(&self, s: StateId) -> bool {
        self.members.contains(&s)
    }

    pub fn min_reward(&self) -> Option<f64> {
        self.entries.last().map(|e| e.1)
    }

    pub fn total_reward(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    /// Adds `s` unless it is already present or the buffer is full of
    /// states with at least its reward. Returns whether the contents changed.
    pub fn insert(&mut self, s: StateId, reward: f64) -> Result<bool> {
        if !(reward > 0.0) || !reward.is_finite() {
            return Err(GfnError::NonPositiveReward(reward));
        }
        if self.members.contains(&s) {
            return Ok(false);
        }
        if self.is_full() {
            // ties keep the incumbent, so equal-reward states never churn
            if !(reward > self.entries[self.entries.len() - 1].1) {
                return Ok(false);
            }
            let (evicted, _) = self.entries.pop().expect("full buffer is nonempty");
            self.members.remove(&evicted);
        }
        let at = self
            .entries
            .iter()
            .position(|&e| ranks_before((s, reward), e))
            .unwrap_or(self.entries.len());
        self.entries.insert(at, (s, reward));
        self.members.insert(s);
        Ok(true)
    }

    /// Draws a state with probability proportional to its reward.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<StateId> {
        if self.entries.is_empty() {
            return Err(GfnError::Empty("top-k buffer"));
        }
        let dist = WeightedIndex::new(self.entries.iter().map(|e| e.1)).map_err(|e| invalid(e.to_string()))?;
        Ok(self.entries[dist.sample(rng)].0)
    }
}

/// Reward-prioritized trajectory replay.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Trajectory>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("replay capacity must be positive"));
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.items.iter().map(|t| t.reward).collect()
    }

    /// Keeps the highest-reward trajectories: once full, a new trajectory
    /// replaces the lowest-reward one only if its reward is strictly larger.
    pub fn insert(&mut self, traj: Trajectory) -> bool {
        if self.items.len() < self.capacity {
            self.items.push(traj);
            return true;
        }
        let (worst, min) = self
            .items
            .iter()
            .enumerate()
            .map(|(i, t)| (i, t.reward))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("full replay buffer is nonempty");
        if traj.reward > min {
            self.items[worst] = traj;
            true
        } else {
            false
        }
    }

    /// `count` draws with replacement, each with probability proportional to
    /// reward.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Trajectory>> {
        if self.items.is_empty() {
            return Err(GfnError::Empty("replay buffer"));
        }
        let dist = WeightedIndex::new(self.items.iter().map(|t| t.reward)).map_err(|e| invalid(e.to_string()))?;
        Ok((0..count).map(|_| self.items[dist.sample(rng)].clone()).collect())
    }
}
