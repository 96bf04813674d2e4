//! Bounds on how far a policy that matched the old target lies from the new
//! one after nonnegative reward is added on a subgraph.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::envs::StateId;
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetContrast {
    pub states: Vec<StateId>,
    /// Old reward mass of the subset.
    pub z_star: f64,
    /// `Z*_Y / (Z*_Y + Z'_Y)`.
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastSummary {
    pub subsets: Vec<SubsetContrast>,
    pub z_star: f64,
    pub lambda_x: f64,
    /// Smallest single-state contrast `R(x) / (R(x) + R'(x))`.
    pub min_singleton: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sandwich {
    pub lower: f64,
    pub upper: f64,
    /// TV between the old and new targets.
    pub exact: Option<f64>,
    pub contrast: ContrastSummary,
}

fn check_inputs(rewards: &[(StateId, f64)], added: &BTreeMap<StateId, f64>) -> Result<BTreeMap<StateId, f64>> {
    let mut old = BTreeMap::new();
    for &(s, r) in rewards {
        if !(r > 0.0 && r.is_finite()) {
            return Err(invalid(format!("reward of {s} must be positive, got {r}")));
        }
        if old.insert(s, r).is_some() {
            return Err(invalid(format!("state {s} listed twice")));
        }
    }
    if old.is_empty() {
        return Err(invalid("no terminating states"));
    }
    for (s, &r) in added {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(invalid(format!("added reward of {s} must be nonnegative, got {r}")));
        }
        if !old.contains_key(s) {
            return Err(invalid(format!("added reward on unknown state {s}")));
        }
    }
    Ok(old)
}

fn contrast(old: &BTreeMap<StateId, f64>, added: &BTreeMap<StateId, f64>, states: &[StateId]) -> SubsetContrast {
    let z: f64 = states.iter().map(|s| old.get(s).copied().unwrap_or(0.0)).sum();
    let extra: f64 = states.iter().map(|s| added.get(s).copied().unwrap_or(0.0)).sum();
    SubsetContrast {
        states: states.to_vec(),
        z_star: z,
        lambda: z / (z + extra),
    }
}

/// Contrast ratios of the whole space, of every queried subset, and of the
/// worst single state.
pub fn contrast_summary(
    rewards: &[(StateId, f64)],
    added: &BTreeMap<StateId, f64>,
    subsets: &[Vec<StateId>],
) -> Result<ContrastSummary> {
    let old = check_inputs(rewards, added)?;
    let all: Vec<StateId> = old.keys().copied().collect();
    let whole = contrast(&old, added, &all);
    let min_singleton = old
        .iter()
        .map(|(s, r)| r / (r + added.get(s).copied().unwrap_or(0.0)))
        .fold(1.0, f64::min);
    Ok(ContrastSummary {
        subsets: subsets.iter().map(|y| contrast(&old, added, y)).collect(),
        z_star: whole.z_star,
        lambda_x: whole.lambda,
        min_singleton,
    })
}

/// Lower and upper bounds on the TV between the old target `R / Z*` and
/// the new target `(R + R') / (Z* + Z')`, with `R'` supported on `x_sub`,
/// plus the exact value computed from the listed rewards.
pub fn incremental_tv_sandwich(
    rewards: &[(StateId, f64)],
    added: &BTreeMap<StateId, f64>,
    x_sub: &BTreeSet<StateId>,
) -> Result<Sandwich> {
    let old = check_inputs(rewards, added)?;
    if let Some((s, _)) = added.iter().find(|(s, &r)| r > 0.0 && !x_sub.contains(s)) {
        return Err(invalid(format!("added reward on {s} outside the subgraph")));
    }
    let sub: Vec<StateId> = x_sub.iter().copied().collect();
    let summary = contrast_summary(rewards, added, &[sub])?;
    let z = summary.z_star;
    let z_sub = summary.subsets[0].z_star;
    let z_new: f64 = z + added.values().sum::<f64>();
    let upper = 1.0 - summary.lambda_x;
    let lower = (z - z_sub) / z * upper;
    let exact = 0.5
        * old
            .iter()
            .map(|(s, r)| (r / z - (r + added.get(s).copied().unwrap_or(0.0)) / z_new).abs())
            .sum::<f64>();
    Ok(Sandwich {
        lower,
        upper,
        exact: Some(exact),
        contrast: summary,
    })
}

/// `(ln min_{x in X_sub} R(x) / (R(x) + R'(x)))^2`: the largest loss a policy
/// that matched the old target can show under the new one.
pub fn loss_supremum(
    rewards: &[(StateId, f64)],
    added: &BTreeMap<StateId, f64>,
    x_sub: &BTreeSet<StateId>,
) -> Result<f64> {
    let old = check_inputs(rewards, added)?;
    let min = x_sub
        .iter()
        .map(|s| {
            let r = old
                .get(s)
                .copied()
                .ok_or_else(|| invalid(format!("subgraph state {s} has no reward")))?;
            Ok(r / (r + added.get(s).copied().unwrap_or(0.0)))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(1.0, f64::min);
    Ok(min.ln().powi(2))
}

/// Exact TV between the targets of a `(g, h)` tree with unit leaf rewards
/// and one leaf at `eps`, before and after that leaf is raised to 1.
pub fn one_more_mode_tv(branching: usize, depth: usize, eps: f64) -> Result<f64> {
    if branching == 0 || depth == 0 || !(eps > 0.0 && eps <= 1.0) {
        return Err(invalid("need g >= 1, h >= 1 and eps in (0, 1]"));
    }
    let n = (branching as f64).powi(depth as i32);
    let z_prev = n - 1.0 + eps;
    Ok((n - 1.0) / 2.0 * (1.0 / z_prev - 1.0 / n) + 0.5 * (1.0 / n - eps / z_prev))
}
