//! Exact ground truth on enumerable environments: target and policy
//! terminal distributions, TV and total-L1 errors, mode counts, exact flows,
//! trajectory enumeration and the balanced tabular model.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{enumerate_terminating, topological_order, DagEnv, StateId};
use crate::error::{invalid, GfnError, Result};
use crate::policy::{
    exact_terminal_distribution, sample_terminals_parallel, BackwardKind, ModelSpec, PolicyModel, PolicySampler,
    Provenance, Trajectory, LOGIT_CLAMP,
};

/// Default cap on enumerated trajectories.
pub const DEFAULT_TRAJECTORY_CAP: usize = 5_000_000;

/// `R(x) / Z*` over every terminating state.
pub fn target_distribution(env: &dyn DagEnv, cap: usize) -> Result<BTreeMap<StateId, f64>> {
    let terms = enumerate_terminating(env, cap)?;
    let z: f64 = terms.iter().map(|t| t.1).sum();
    Ok(terms.into_iter().map(|(s, r)| (s, r / z)).collect())
}

/// Exact categorical draws of terminating states with probability
/// `R(x) / Z*`, in state-index order.
#[derive(Clone, Debug)]
pub struct TargetSampler {
    states: Vec<StateId>,
    dist: WeightedIndex<f64>,
}

impl TargetSampler {
    pub fn new(env: &dyn DagEnv, cap: usize) -> Result<Self> {
        let terms = enumerate_terminating(env, cap)?;
        let dist = WeightedIndex::new(terms.iter().map(|t| t.1)).map_err(|e| invalid(e.to_string()))?;
        Ok(Self {
            states: terms.into_iter().map(|t| t.0).collect(),
            dist,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> StateId {
        self.states[self.dist.sample(rng)]
    }
}

/// `count` trajectories from the target trajectory distribution: `x`
/// proportional to reward, then the model's backward policy.
pub fn sample_target_trajectories<R: Rng + ?Sized>(
    model: &PolicyModel,
    env: &dyn DagEnv,
    target: &TargetSampler,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    let mut sampler = PolicySampler::new(model, env);
    (0..count)
        .map(|_| {
            let x = target.sample(rng);
            sampler.sample_backward(x, rng)
        })
        .collect()
}

/// `sum_x |p(x) - q(x)|` over the union of supports.
pub fn total_l1(p: &BTreeMap<StateId, f64>, q: &BTreeMap<StateId, f64>) -> f64 {
    let keys: BTreeSet<StateId> = p.keys().chain(q.keys()).copied().collect();
    keys.iter()
        .map(|k| (p.get(k).copied().unwrap_or(0.0) - q.get(k).copied().unwrap_or(0.0)).abs())
        .sum()
}

/// Total variation between the model's terminal distribution and the target.
pub fn exact_tv(model: &PolicyModel, env: &dyn DagEnv, cap: usize) -> Result<f64> {
    let p = exact_terminal_distribution(model, env, cap)?;
    let q = target_distribution(env, cap)?;
    Ok(0.5 * total_l1(&p, &q))
}

/// `sum_x |freq(x) - target(x)|`; never-sampled states contribute their
/// full target mass.
pub fn empirical_total_l1(samples: &[StateId], target: &BTreeMap<StateId, f64>) -> Result<f64> {
    if samples.is_empty() {
        return Err(GfnError::Empty("terminal samples"));
    }
    let n = samples.len() as f64;
    let mut freq: BTreeMap<StateId, f64> = BTreeMap::new();
    for &s in samples {
        *freq.entry(s).or_insert(0.0) += 1.0 / n;
    }
    Ok(total_l1(&freq, target))
}

/// Number of distinct mode states among the samples.
pub fn count_modes(samples: &[StateId], env: &dyn DagEnv) -> usize {
    samples
        .iter()
        .filter(|&&s| env.is_mode(s))
        .collect::<BTreeSet<_>>()
        .len()
}

/// Number of mode states in the whole environment.
pub fn total_modes(env: &dyn DagEnv) -> usize {
    env.terminating_states().into_iter().filter(|&s| env.is_mode(s)).count()
}

/// Number of distinct mode regions among the samples.
pub fn count_mode_regions(samples: &[StateId], env: &dyn DagEnv) -> usize {
    samples
        .iter()
        .filter_map(|&s| env.mode_region(s))
        .collect::<BTreeSet<_>>()
        .len()
}

/// Number of mode regions in the whole environment.
pub fn total_mode_regions(env: &dyn DagEnv) -> usize {
    count_mode_regions(&env.terminating_states(), env)
}

/// Test-time evaluation of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub exact_tv: Option<f64>,
    pub total_l1: Option<f64>,
    pub modes: usize,
    pub total_modes: usize,
    pub mode_regions: usize,
    pub total_mode_regions: usize,
    pub samples: usize,
}

/// Draws `samples` terminal states, and computes the exact TV and the
/// empirical total L1 when the environment fits under `cap`.
pub fn evaluate_model(
    model: &PolicyModel,
    env: &dyn DagEnv,
    samples: usize,
    seed: u64,
    workers: usize,
    cap: usize,
) -> Result<EvalReport> {
    let drawn = if samples > 0 {
        sample_terminals_parallel(model, env, samples, seed, "evaluate", workers)?
    } else {
        Vec::new()
    };
    let enumerable = env.num_states() <= cap;
    let (tv, l1) = if enumerable {
        let target = target_distribution(env, cap)?;
        let p = exact_terminal_distribution(model, env, cap)?;
        let l1 = if drawn.is_empty() {
            None
        } else {
            Some(empirical_total_l1(&drawn, &target)?)
        };
        (Some(0.5 * total_l1(&p, &target)), l1)
    } else {
        (None, None)
    };
    Ok(EvalReport {
        exact_tv: tv,
        total_l1: l1,
        modes: count_modes(&drawn, env),
        total_modes: total_modes(env),
        mode_regions: count_mode_regions(&drawn, env),
        total_mode_regions: total_mode_regions(env),
        samples: drawn.len(),
    })
}

/// Flows of the reward-proportional solution with a uniform backward split.
#[derive(Clone, Debug)]
pub struct ExactFlows {
    pub z_star: f64,
    /// `F(s)` per state index; the sink carries `Z*`.
    pub state: Vec<f64>,
    /// `F(s -> s')` per state, aligned with `forward_transitions(s)`.
    pub edge: Vec<Vec<f64>>,
}

impl ExactFlows {
    pub fn compute(env: &dyn DagEnv, cap: usize) -> Result<Self> {
        let order = topological_order(env, cap)?;
        let n = env.num_states();
        let sink = env.sink();
        let mut state = vec![0.0; n];
        let mut edge: Vec<Vec<f64>> = vec![Vec::new(); n];
        for &s in order.iter().rev() {
            if s == sink {
                continue;
            }
            let ts = env.forward_transitions(s);
            let flows: Vec<f64> = ts
                .iter()
                .map(|t| {
                    if t.state == sink {
                        env.reward(s)
                    } else {
                        state[t.state.0] / env.parents(t.state).len() as f64
                    }
                })
                .collect();
            state[s.0] = flows.iter().sum();
            edge[s.0] = flows;
        }
        let z_star = state[env.initial_state().0];
        state[sink.0] = z_star;
        Ok(Self { z_star, state, edge })
    }

    pub fn edge_flow(&self, env: &dyn DagEnv, from: StateId, to: StateId) -> Option<f64> {
        env.forward_transitions(from)
            .iter()
            .position(|t| t.state == to)
            .map(|k| self.edge[from.0][k])
    }
}

/// Tabular model at the reward-proportional solution: forward logits are
/// the log edge flows, backward policies are uniform, state flows are exact
/// and `log Z = ln Z*`. Every loss is zero at this model.
pub fn balanced_tabular_model(env: &dyn DagEnv, cap: usize) -> Result<PolicyModel> {
    let flows = ExactFlows::compute(env, cap)?;
    let mut r = crate::rng::stream(0, "balanced");
    let mut model = PolicyModel::new(env, ModelSpec::Tabular, BackwardKind::Learned, 1.0, &mut r)?;
    let sink = env.sink();
    let mut values = model.params().values().to_vec();
    let layout: BTreeMap<String, usize> = model
        .params()
        .slices()
        .iter()
        .map(|s| (s.name.clone(), s.start))
        .collect();
    let fa = env.num_forward_actions();
    let check = |v: f64| {
        if v.abs() > LOGIT_CLAMP || !v.is_finite() {
            Err(invalid(format!("balanced log-flow {v} falls outside the logit clamp")))
        } else {
            Ok(v)
        }
    };
    for s in (0..env.num_states()).map(StateId) {
        if s == sink {
            continue;
        }
        for (t, f) in env.forward_transitions(s).iter().zip(&flows.edge[s.0]) {
            values[layout["forward"] + s.0 * fa + t.action] = check(f.ln())?;
        }
        values[layout["flow"] + s.0] = check(flows.state[s.0].ln())?;
    }
    values[layout["log_z"]] = flows.z_star.ln();
    // backward logits stay at zero: uniform over parents
    model.params_mut().assign(&values)?;
    Ok(model)
}

/// Every complete trajectory, with log-probabilities under `model`.
pub fn enumerate_trajectories(model: &PolicyModel, env: &dyn DagEnv, cap: usize) -> Result<Vec<Trajectory>> {
    let sink = env.sink();
    let mut sampler = PolicySampler::new(model, env);
    let mut out = Vec::new();
    let mut stack = vec![vec![env.initial_state()]];
    while let Some(path) = stack.pop() {
        let last = *path.last().expect("nonempty path");
        for t in env.forward_transitions(last).into_iter().rev() {
            let mut next = path.clone();
            next.push(t.state);
            if t.state == sink {
                if out.len() >= cap {
                    return Err(GfnError::CapExceeded {
                        what: "trajectories",
                        count: out.len() + 1,
                        cap,
                    });
                }
                out.push(sampler.trajectory_from_states(next, Provenance::Enumerated)?);
            } else {
                stack.push(next);
            }
        }
    }
    Ok(out)
}

/// `pi_hat(tau) = R(x) P_B(tau | x) / Z*`.
pub fn target_trajectory_probability(traj: &Trajectory, z_star: f64) -> f64 {
    (traj.log_target_flow() - z_star.ln()).exp()
}
