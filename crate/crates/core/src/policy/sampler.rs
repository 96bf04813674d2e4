use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rayon::prelude::*;

use super::{PolicyModel, Provenance, Trajectory};
use crate::envs::{DagEnv, StateId, Transition};
use crate::error::{GfnError, Result};
use crate::rng;

/// Log-probabilities of every valid forward and backward move at one state.
#[derive(Clone, Debug)]
pub struct StateProbs {
    pub forward: Vec<Transition>,
    pub forward_logp: Vec<f64>,
    pub backward: Vec<Transition>,
    pub backward_logp: Vec<f64>,
}

/// Samples trajectories from a fixed model snapshot, memoizing per-state
/// policy evaluations. One sampler per worker.
pub struct PolicySampler<'a> {
    model: &'a PolicyModel,
    env: &'a dyn DagEnv,
    cache: HashMap<StateId, Rc<StateProbs>>,
}

fn pick<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver of mass past the last bucket
    logp.len() - 1
}

impl<'a> PolicySampler<'a> {
    pub fn new(model: &'a PolicyModel, env: &'a dyn DagEnv) -> Self {
        Self {
            model,
            env,
            cache: HashMap::new(),
        }
    }

    /// Evaluates a batch of states up front.
    pub fn prefetch(&mut self, states: &[StateId]) -> Result<()> {
        let missing: Vec<StateId> = states.iter().copied().filter(|s| !self.cache.contains_key(s)).collect();
        if missing.is_empty() {
            return Ok(());
        }
        let eval = self.model.evaluate(self.env, &missing)?;
        for (row, &s) in missing.iter().enumerate() {
            let forward = eval.forward[row].clone();
            let forward_logp = forward.iter().map(|t| eval.log_pf(row, t.action)).collect();
            let backward = eval.backward[row].clone();
            let backward_logp = backward.iter().map(|t| eval.log_pb(row, t.action)).collect();
            self.cache.insert(
                s,
                Rc::new(StateProbs {
                    forward,
                    forward_logp,
                    backward,
                    backward_logp,
                }),
            );
        }
        Ok(())
    }

    pub fn probs(&mut self, s: StateId) -> Result<Rc<StateProbs>> {
        if !self.cache.contains_key(&s) {
            self.prefetch(&[s])?;
        }
        Ok(Rc::clone(&self.cache[&s]))
    }

    /// Rolls out from the initial state. With probability `epsilon` a step
    /// takes a uniformly random valid action; recorded log-probabilities are
    /// always those of the unmixed policy.
    pub fn sample_forward<R: Rng + ?Sized>(&mut self, rng: &mut R, epsilon: f64) -> Result<Trajectory> {
        if !(0.0..1.0).contains(&epsilon) && epsilon != 1.0 {
            return Err(crate::error::invalid("epsilon must lie in [0, 1]"));
        }
        let sink = self.env.sink();
        let mut s = self.env.initial_state();
        let mut states = vec![s];
        let mut forward_actions = Vec::new();
        let mut log_pf = 0.0;
        while s != sink {
            let p = self.probs(s)?;
            if p.forward.is_empty() {
                return Err(crate::error::invalid(format!("dead end at state {s}")));
            }
            let k = if epsilon > 0.0 && rng.random::<f64>() < epsilon {
                rng.random_range(0..p.forward.len())
            } else {
                pick(&p.forward_logp, rng)
            };
            log_pf += p.forward_logp[k];
            forward_actions.push(p.forward[k].action);
            s = p.forward[k].state;
            states.push(s);
        }
        let mut backward_actions = Vec::with_capacity(states.len() - 2);
        let mut log_pb = 0.0;
        for t in 0..states.len() - 2 {
            let p = self.probs(states[t + 1])?;
            let k = p
                .backward
                .iter()
                .position(|tr| tr.state == states[t])
                .ok_or(GfnError::InvalidEdge {
                    from: states[t + 1].0,
                    to: states[t].0,
                })?;
            backward_actions.push(p.backward[k].action);
            log_pb += p.backward_logp[k];
        }
        let x = states[states.len() - 2];
        Ok(Trajectory {
            reward: self.env.reward(x),
            states,
            forward_actions,
            backward_actions,
            log_pf,
            log_pb,
            provenance: Provenance::ForwardSampled,
        })
    }

    /// Walks from terminating state `x` back to the initial state through
    /// the backward policy; the result is in forward order.
    pub fn sample_backward<R: Rng + ?Sized>(&mut self, x: StateId, rng: &mut R) -> Result<Trajectory> {
        if !self.env.is_terminating(x) {
            return Err(GfnError::NotTerminating(x.0));
        }
        let s0 = self.env.initial_state();
        let mut rev = vec![x];
        let mut rev_actions = Vec::new();
        let mut log_pb = 0.0;
        let mut s = x;
        while s != s0 {
            let p = self.probs(s)?;
            if p.backward.is_empty() {
                return Err(crate::error::invalid(format!("state {s} has no parents")));
            }
            let k = pick(&p.backward_logp, rng);
            log_pb += p.backward_logp[k];
            rev_actions.push(p.backward[k].action);
            s = p.backward[k].state;
            rev.push(s);
        }
        rev.reverse();
        rev_actions.reverse();
        let mut states = rev;
        states.push(self.env.sink());
        let (forward_actions, log_pf) = self.forward_log_prob(&states)?;
        Ok(Trajectory {
            reward: self.env.reward(x),
            states,
            forward_actions,
            backward_actions: rev_actions,
            log_pf,
            log_pb,
            provenance: Provenance::BackwardSampled,
        })
    }

    fn forward_log_prob(&mut self, states: &[StateId]) -> Result<(Vec<usize>, f64)> {
        let mut actions = Vec::with_capacity(states.len() - 1);
        let mut total = 0.0;
        for w in states.windows(2) {
            let p = self.probs(w[0])?;
            let k = p
                .forward
                .iter()
                .position(|t| t.state == w[1])
                .ok_or(GfnError::InvalidEdge {
                    from: w[0].0,
                    to: w[1].0,
                })?;
            actions.push(p.forward[k].action);
            total += p.forward_logp[k];
        }
        Ok((actions, total))
    }

    /// Recomputes `(log P_F(tau), log P_B(tau | x))` edge by edge.
    pub fn log_probs(&mut self, traj: &Trajectory) -> Result<(f64, f64)> {
        let (_, log_pf) = self.forward_log_prob(&traj.states)?;
        let mut log_pb = 0.0;
        for t in 0..traj.states.len() - 2 {
            let p = self.probs(traj.states[t + 1])?;
            let k = p
                .backward
                .iter()
                .position(|tr| tr.state == traj.states[t])
                .ok_or(GfnError::InvalidEdge {
                    from: traj.states[t + 1].0,
                    to: traj.states[t].0,
                })?;
            log_pb += p.backward_logp[k];
        }
        Ok((log_pf, log_pb))
    }

    /// Rebuilds a trajectory through `states` with log-probabilities from
    /// this model.
    pub fn trajectory_from_states(&mut self, states: Vec<StateId>, provenance: Provenance) -> Result<Trajectory> {
        let (forward_actions, log_pf) = self.forward_log_prob(&states)?;
        let mut backward_actions = Vec::with_capacity(states.len().saturating_sub(2));
        let mut log_pb = 0.0;
        for t in 0..states.len() - 2 {
            let p = self.probs(states[t + 1])?;
            let k = p
                .backward
                .iter()
                .position(|tr| tr.state == states[t])
                .ok_or(GfnError::InvalidEdge {
                    from: states[t + 1].0,
                    to: states[t].0,
                })?;
            backward_actions.push(p.backward[k].action);
            log_pb += p.backward_logp[k];
        }
        let x = states[states.len() - 2];
        let traj = Trajectory {
            reward: self.env.reward(x),
            states,
            forward_actions,
            backward_actions,
            log_pf,
            log_pb,
            provenance,
        };
        traj.validate(self.env)?;
        Ok(traj)
    }
}

pub fn sample_forward<R: Rng + ?Sized>(
    model: &PolicyModel,
    env: &dyn DagEnv,
    rng: &mut R,
    epsilon: f64,
) -> Result<Trajectory> {
    PolicySampler::new(model, env).sample_forward(rng, epsilon)
}

pub fn sample_backward<R: Rng + ?Sized>(
    model: &PolicyModel,
    env: &dyn DagEnv,
    x: StateId,
    rng: &mut R,
) -> Result<Trajectory> {
    PolicySampler::new(model, env).sample_backward(x, rng)
}

/// Terminating states of `count` forward rollouts (no exploration), split
/// across `workers` fixed chunks with one RNG stream each so the result
/// does not depend on thread scheduling.
pub fn sample_terminals_parallel(
    model: &PolicyModel,
    env: &dyn DagEnv,
    count: usize,
    seed: u64,
    label: &str,
    workers: usize,
) -> Result<Vec<StateId>> {
    let workers = workers.max(1);
    let chunks: Vec<(usize, usize)> = (0..workers)
        .map(|w| (w, count / workers + usize::from(w < count % workers)))
        .collect();
    let parts: Vec<Result<Vec<StateId>>> = chunks
        .into_par_iter()
        .map(|(w, n)| {
            let mut r = rng::worker_stream(seed, label, w as u64);
            let mut sampler = PolicySampler::new(model, env);
            (0..n)
                .map(|_| sampler.sample_forward(&mut r, 0.0).map(|t| t.terminal()))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Hypergrid, RegularTree};
    use crate::policy::{BackwardKind, ModelSpec, TabularHead};

    fn tabular(env: &dyn DagEnv, backward: BackwardKind) -> PolicyModel {
        let mut r = rng::stream(0, "init");
        PolicyModel::new(env, ModelSpec::Tabular, backward, 100.0, &mut r).unwrap()
    }

    #[test]
    fn uniform_binary_tree_leaf_probability() {
        let t = RegularTree::new(2, 1).unwrap();
        let m = tabular(&t, BackwardKind::Learned);
        let mut r = rng::stream(1, "s");
        for _ in 0..10 {
            let traj = sample_forward(&m, &t, &mut r, 0.0).unwrap();
            assert!((traj.log_pf - 0.5f64.ln()).abs() < 1e-15);
            assert_eq!(traj.log_pb, 0.0);
            traj.validate(&t).unwrap();
        }
    }

    #[test]
    fn full_exploration_is_uniform() {
        let t = RegularTree::new(3, 1).unwrap();
        let mut m = tabular(&t, BackwardKind::Learned);
        // a strongly peaked policy must not matter at epsilon = 1
        m.set_tabular(TabularHead::Forward, StateId(0), 0, 8.0).unwrap();
        let mut r = rng::stream(2, "explore");
        let mut sampler = PolicySampler::new(&m, &t);
        let mut counts = [0usize; 3];
        let n = 30_000;
        for _ in 0..n {
            let traj = sampler.sample_forward(&mut r, 1.0).unwrap();
            counts[traj.terminal().0 - 1] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn peaked_policy_is_deterministic() {
        let t = RegularTree::new(3, 2).unwrap();
        let mut m = tabular(&t, BackwardKind::Learned);
        m.set_tabular(TabularHead::Forward, StateId(0), 2, 50.0).unwrap();
        m.set_tabular(TabularHead::Forward, StateId(3), 1, 50.0).unwrap();
        let mut r = rng::stream(3, "peaked");
        let first = sample_forward(&m, &t, &mut r, 0.0).unwrap();
        for _ in 0..200 {
            assert_eq!(sample_forward(&m, &t, &mut r, 0.0).unwrap().states, first.states);
        }
    }

    #[test]
    fn backward_tree_paths_are_certain() {
        let t = RegularTree::new(3, 2).unwrap();
        let m = tabular(&t, BackwardKind::Learned);
        let mut r = rng::stream(4, "b");
        let traj = sample_backward(&m, &t, t.leaf(5), &mut r).unwrap();
        assert_eq!(traj.log_pb, 0.0);
        assert_eq!(traj.terminal(), t.leaf(5));
        traj.validate(&t).unwrap();
        assert!(sample_backward(&m, &t, StateId(1), &mut r).is_err());
    }

    #[test]
    fn backward_lattice_paths_split_evenly() {
        let g = Hypergrid::new(2, 4, 0.1, 0.5, 2.0).unwrap();
        let m = tabular(&g, BackwardKind::Uniform);
        let x = g.state_of(&[1, 1]);
        let mut r = rng::stream(5, "lattice");
        let mut sampler = PolicySampler::new(&m, &g);
        let mut via_x_first = 0usize;
        let n = 20_000;
        for _ in 0..n {
            let traj = sampler.sample_backward(x, &mut r).unwrap();
            assert!((traj.log_pb - 0.5f64.ln()).abs() < 1e-15);
            if traj.states[1] == g.state_of(&[1, 0]) {
                via_x_first += 1;
            }
        }
        assert!((via_x_first as f64 / n as f64 - 0.5).abs() < 0.015);
    }

    #[test]
    fn origin_exit_is_single_edge() {
        let g = Hypergrid::new(2, 4, 0.1, 0.5, 2.0).unwrap();
        let m = tabular(&g, BackwardKind::Learned);
        let mut r = rng::stream(6, "o");
        let traj = sample_backward(&m, &g, g.initial_state(), &mut r).unwrap();
        assert_eq!(traj.states, vec![g.initial_state(), g.sink()]);
        assert_eq!(traj.num_edges(), 1);
    }

    #[test]
    fn cached_log_probs_match_recomputation() {
        let g = Hypergrid::new(2, 5, 0.1, 0.5, 2.0).unwrap();
        let mut r = rng::stream(7, "init");
        let m = PolicyModel::new(
            &g,
            ModelSpec::Mlp { hidden: vec![8, 8] },
            BackwardKind::Learned,
            100.0,
            &mut r,
        )
        .unwrap();
        let mut s = PolicySampler::new(&m, &g);
        for i in 0..50 {
            let traj = if i % 2 == 0 {
                s.sample_forward(&mut r, 0.05).unwrap()
            } else {
                s.sample_backward(StateId(i % 25), &mut r).unwrap()
            };
            traj.validate(&g).unwrap();
            let mut fresh = PolicySampler::new(&m, &g);
            let (pf, pb) = fresh.log_probs(&traj).unwrap();
            assert_eq!(pf, traj.log_pf);
            // backward sums run in the opposite order
            assert!((pb - traj.log_pb).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_sampling_is_schedule_independent() {
        let t = RegularTree::new(3, 2).unwrap();
        let m = tabular(&t, BackwardKind::Learned);
        let a = sample_terminals_parallel(&m, &t, 1000, 9, "eval", 4).unwrap();
        let b = sample_terminals_parallel(&m, &t, 1000, 9, "eval", 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
    }
}
