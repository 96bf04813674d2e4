//! Flow matching, detailed balance, trajectory balance, subtrajectory
//! balance and weighted detailed balance, plus the reference-flow augmented
//! trajectory-balance loss.
//!
//! Conventions shared by every objective: `log F(s0) = log Z`; a terminal
//! whose only child is the sink has its flow pinned to `R(x)`; any other
//! terminal contributes an exit-edge term that matches its exit flow to
//! `R(x)`.

mod chain;
mod reference;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::{DagEnv, ReachableCounts, StateId};
use crate::error::{invalid, GfnError, Result};
use crate::policy::{BatchEval, BatchGrad, PolicyModel, Trajectory};
use chain::{log_reward_of, node_for, node_value, Chain};

pub use reference::{
    augmented_log_ratio, augmented_loss, delta_over_target, log_add_exp, log_reference_flow_delta,
    reduction_factor_gamma, reference_flow_delta,
};

pub const DEFAULT_SUBTB_LAMBDA: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Tb,
    Db,
    Fm,
    Subtb,
    Wdb,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Tb,
        Objective::Db,
        Objective::Fm,
        Objective::Subtb,
        Objective::Wdb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Tb => "tb",
            Objective::Db => "db",
            Objective::Fm => "fm",
            Objective::Subtb => "subtb",
            Objective::Wdb => "wdb",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = GfnError;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown objective {s:?}")))
    }
}

/// Threshold `c` of the reference flow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceFlowConfig {
    pub threshold: f64,
    pub enabled: bool,
}

impl ReferenceFlowConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold >= 0.0) || threshold.is_infinite() {
            return Err(invalid("reference-flow threshold must be finite and nonnegative"));
        }
        Ok(Self {
            threshold,
            enabled: true,
        })
    }

    pub fn active_threshold(&self) -> Option<f64> {
        self.enabled.then_some(self.threshold)
    }
}

/// Source of the per-item reference flow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reference<'a> {
    /// Minimal flow capping each loss at `c^2`, from the current parameters.
    Threshold(f64),
    /// Given per-item flows, e.g. to differentiate with the flow held fixed.
    Fixed(&'a [f64]),
}

/// What to compute for a batch.
#[derive(Clone, Copy, Debug)]
pub struct LossOptions<'a> {
    pub objective: Objective,
    pub subtb_lambda: f64,
    /// Only valid with [`Objective::Tb`].
    pub reference: Option<Reference<'a>>,
    pub reachable: Option<&'a ReachableCounts>,
}

impl<'a> LossOptions<'a> {
    pub fn new(objective: Objective) -> Self {
        Self {
            objective,
            subtb_lambda: DEFAULT_SUBTB_LAMBDA,
            reference: None,
            reachable: None,
        }
    }

    pub fn with_reference(mut self, c: f64) -> Self {
        self.reference = Some(Reference::Threshold(c));
        self
    }

    pub fn with_fixed_deltas(mut self, deltas: &'a [f64]) -> Self {
        self.reference = Some(Reference::Fixed(deltas));
        self
    }

    pub fn with_reachable(mut self, counts: &'a ReachableCounts) -> Self {
        self.reachable = Some(counts);
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.subtb_lambda = lambda;
        self
    }

    fn validate(&self, batch: usize) -> Result<()> {
        if let Some(reference) = self.reference {
            if self.objective != Objective::Tb {
                return Err(invalid("the reference flow applies to trajectory balance only"));
            }
            match reference {
                Reference::Threshold(c) if !(c >= 0.0) => {
                    return Err(invalid("reference-flow threshold must be nonnegative"));
                }
                Reference::Fixed(d) if d.len() != batch || d.iter().any(|x| !(*x >= 0.0)) => {
                    return Err(invalid("fixed reference flows must be nonnegative, one per item"));
                }
                _ => {}
            }
        }
        if self.objective == Objective::Wdb && self.reachable.is_none() {
            return Err(invalid(
                "weighted detailed balance needs reachable-terminal counts of an enumerable environment",
            ));
        }
        if self.objective == Objective::Subtb && !(self.subtb_lambda > 0.0) {
            return Err(invalid("subtrajectory lambda must be positive"));
        }
        Ok(())
    }
}

/// Per-item losses of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBatchReport {
    pub objective: Objective,
    pub losses: Vec<f64>,
    /// `log(Z P_F(tau) / (R(x) P_B(tau|x)))` under the current parameters.
    pub log_ratios: Vec<f64>,
    /// Reference flow per item; zero when no reference flow is in use.
    pub deltas: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    pub max_to_rest: f64,
}

impl LossBatchReport {
    fn from_items(objective: Objective, losses: Vec<f64>, log_ratios: Vec<f64>, deltas: Vec<f64>) -> Self {
        let n = losses.len().max(1) as f64;
        let mean = losses.iter().sum::<f64>() / n;
        let max = losses.iter().copied().fold(0.0, f64::max);
        let max_to_rest = max_to_rest(&losses);
        Self {
            objective,
            losses,
            log_ratios,
            deltas,
            mean,
            max,
            max_to_rest,
        }
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// Unaugmented trajectory-balance loss of every item.
    pub fn tb_losses(&self) -> Vec<f64> {
        self.log_ratios.iter().map(|r| r * r).collect()
    }

    pub fn mean_delta(&self) -> f64 {
        if self.deltas.is_empty() {
            0.0
        } else {
            self.deltas.iter().sum::<f64>() / self.deltas.len() as f64
        }
    }

    /// Fraction of items with a nonzero reference flow.
    pub fn active_delta_fraction(&self) -> f64 {
        if self.deltas.is_empty() {
            0.0
        } else {
            self.deltas.iter().filter(|&&d| d > 0.0).count() as f64 / self.deltas.len() as f64
        }
    }
}

/// `max_i L_i / sum_{j != i} L_j` for the argmax `i`; `+inf` when the rest
/// sums to zero or the batch is empty.
pub fn max_to_rest(losses: &[f64]) -> f64 {
    let Some((imax, &max)) = losses.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) else {
        return f64::INFINITY;
    };
    let rest: f64 = losses
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != imax)
        .map(|(_, l)| l)
        .sum();
    if rest > 0.0 {
        max / rest
    } else {
        f64::INFINITY
    }
}

/// `(log Z + log P_F(tau) - log R(x) - log P_B(tau|x))^2` from the cached
/// trajectory log-probabilities.
pub fn tb_loss(traj: &Trajectory, log_z: f64) -> Result<f64> {
    if !(traj.reward > 0.0) {
        return Err(GfnError::NonPositiveReward(traj.reward));
    }
    Ok((traj.log_model_flow(log_z) - traj.log_target_flow()).powi(2))
}

/// Detailed-balance loss of one edge. The exit edge of a terminal that has
/// other children matches its forward flow to the reward; the exit edge of a
/// pure terminal carries no loss.
pub fn db_loss(model: &PolicyModel, env: &dyn DagEnv, from: StateId, to: StateId) -> Result<f64> {
    let sink = env.sink();
    let mut states = vec![from];
    if to != sink {
        states.push(to);
    }
    let eval = model.evaluate(env, &states)?;
    let rf = eval.row(from)?;
    let fa = eval
        .forward_action(rf, to)
        .ok_or(GfnError::InvalidEdge { from: from.0, to: to.0 })?;
    let a = node_value(&eval, node_for(env, &eval, from)?) + eval.log_pf(rf, fa);
    let b = if to == sink {
        if env.is_pure_terminal(from) && from != env.initial_state() {
            return Ok(0.0);
        }
        log_reward_of(env, from)?
    } else {
        let rt = eval.row(to)?;
        let ba = eval
            .backward_action(rt, from)
            .ok_or(GfnError::InvalidEdge { from: to.0, to: from.0 })?;
        node_value(&eval, node_for(env, &eval, to)?) + eval.log_pb(rt, ba)
    };
    Ok((a - b).powi(2))
}

/// Flow-matching loss at a state other than `s0` and the sink. Edge flows
/// are the clamped forward logits.
pub fn fm_loss(model: &PolicyModel, env: &dyn DagEnv, s: StateId) -> Result<f64> {
    if s == env.initial_state() || s == env.sink() {
        return Err(invalid("flow matching is defined on intermediate states only"));
    }
    let mut states = vec![s];
    states.extend(env.parents(s));
    let eval = model.evaluate(env, &states)?;
    fm_state(env, &eval, s, None)
}

/// Subtrajectory-balance loss of the span between chain nodes `i < j`.
///
/// Nodes are the trajectory's states up to the terminal, plus the sink
/// (flow `R(x)`) when the terminal has children other than the sink.
pub fn subtb_loss(model: &PolicyModel, env: &dyn DagEnv, traj: &Trajectory, i: usize, j: usize) -> Result<f64> {
    let states = batch_states(env, std::slice::from_ref(traj), false);
    let eval = model.evaluate(env, &states)?;
    let chain = Chain::build(env, &eval, traj)?;
    if i >= j || j > chain.last() {
        return Err(invalid(format!("degenerate or out-of-range span {i}..{j}")));
    }
    let (a, b) = chain.span_sides(&eval, i, j);
    Ok((a - b).powi(2))
}

/// Number of flow nodes of `traj` for [`subtb_loss`].
pub fn subtb_nodes(env: &dyn DagEnv, traj: &Trajectory) -> usize {
    let n = traj.states.len() - 1;
    if n == 1 || !env.is_pure_terminal(traj.terminal()) {
        n + 1
    } else {
        n
    }
}

/// Per-edge weights proportional to the inverse number of terminating states
/// reachable through the edge, normalized over the trajectory.
pub fn wdb_weights(traj: &Trajectory, env: &dyn DagEnv, counts: &ReachableCounts) -> Result<Vec<f64>> {
    let sink = env.sink();
    let raw: Vec<f64> = traj.states[1..]
        .iter()
        .map(|&to| {
            let c = counts.edge(to, sink);
            if c == 0 {
                Err(invalid(format!("edge into {to} reaches no terminating state")))
            } else {
                Ok(1.0 / c as f64)
            }
        })
        .collect::<Result<_>>()?;
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Losses of a batch without gradients.
pub fn batch_loss(
    model: &PolicyModel,
    env: &dyn DagEnv,
    trajectories: &[Trajectory],
    options: &LossOptions<'_>,
) -> Result<LossBatchReport> {
    Ok(run_batch(model, env, trajectories, options, false)?.0)
}

/// Losses of a batch and the gradient of their mean w.r.t. every parameter.
pub fn batch_loss_and_grad(
    model: &PolicyModel,
    env: &dyn DagEnv,
    trajectories: &[Trajectory],
    options: &LossOptions<'_>,
) -> Result<(LossBatchReport, Vec<f64>)> {
    let (report, grad) = run_batch(model, env, trajectories, options, true)?;
    Ok((report, grad.expect("gradient requested")))
}

fn batch_states(env: &dyn DagEnv, trajectories: &[Trajectory], with_parents: bool) -> Vec<StateId> {
    let sink = env.sink();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for traj in trajectories {
        for &s in &traj.states {
            if s == sink {
                continue;
            }
            if seen.insert(s) {
                out.push(s);
            }
            if with_parents {
                for p in env.parents(s) {
                    if seen.insert(p) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

fn run_batch(
    model: &PolicyModel,
    env: &dyn DagEnv,
    trajectories: &[Trajectory],
    options: &LossOptions<'_>,
    want_grad: bool,
) -> Result<(LossBatchReport, Option<Vec<f64>>)> {
    options.validate(trajectories.len())?;
    if trajectories.is_empty() {
        return Err(GfnError::Empty("trajectory batch"));
    }
    let with_parents = options.objective == Objective::Fm;
    let states = batch_states(env, trajectories, with_parents);
    let eval = model.evaluate(env, &states)?;
    let mut grad = want_grad.then(|| BatchGrad::zeros(&eval));
    let scale = 1.0 / trajectories.len() as f64;

    let mut losses = Vec::with_capacity(trajectories.len());
    let mut log_ratios = Vec::with_capacity(trajectories.len());
    let mut deltas = Vec::with_capacity(trajectories.len());
    for (item, traj) in trajectories.iter().enumerate() {
        let chain = Chain::build(env, &eval, traj)?;
        let (a, b) = chain.span_sides(&eval, 0, chain.last());
        log_ratios.push(a - b);
        let mut delta = 0.0;
        let g = grad.as_mut().map(|g| (g, scale));
        let loss = match options.objective {
            Objective::Tb => match options.reference {
                Some(reference) => {
                    let ld = match reference {
                        Reference::Threshold(c) => log_reference_flow_delta(a, b, c),
                        Reference::Fixed(d) => d[item].ln(),
                    };
                    delta = ld.exp();
                    reference_tb(&chain, a, b, ld, g)
                }
                None => {
                    if let Some((g, k)) = g {
                        let d = 2.0 * (a - b) * k;
                        chain.span_backward(g, 0, chain.last(), d, -d);
                    }
                    (a - b).powi(2)
                }
            },
            Objective::Db => {
                let w = vec![1.0; chain.edges.len()];
                weighted_edges(&chain, &eval, &w, g)
            }
            Objective::Wdb => {
                let counts = options.reachable.expect("validated");
                let w = wdb_weights(traj, env, counts)?;
                weighted_edges(&chain, &eval, &w, g)
            }
            Objective::Subtb => subtb_item(&chain, &eval, options.subtb_lambda, g),
            Objective::Fm => {
                let mut total = 0.0;
                let mut g = g;
                for &s in &traj.states[..traj.states.len() - 1] {
                    total += fm_state(env, &eval, s, g.as_mut().map(|(g, k)| (&mut **g, *k)))?;
                }
                total
            }
        };
        if !loss.is_finite() {
            return Err(GfnError::NonFinite("batch loss"));
        }
        losses.push(loss);
        deltas.push(delta);
    }

    let flat = match grad {
        Some(g) => {
            let mut out = vec![0.0; model.params().len()];
            model.backprop(&eval, &g, &mut out)?;
            Some(out)
        }
        None => None,
    };
    Ok((
        LossBatchReport::from_items(options.objective, losses, log_ratios, deltas),
        flat,
    ))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Augmented trajectory balance with the reference flow held constant.
fn reference_tb(chain: &Chain, a: f64, b: f64, log_delta: f64, grad: Option<(&mut BatchGrad, f64)>) -> f64 {
    if log_delta == f64::INFINITY {
        return 0.0;
    }
    let aa = log_add_exp(a, log_delta);
    let bb = log_add_exp(b, log_delta);
    let r = aa - bb;
    if let Some((g, k)) = grad {
        let da = 2.0 * r * sigmoid(a - log_delta) * k;
        let db = -2.0 * r * sigmoid(b - log_delta) * k;
        chain.span_backward(g, 0, chain.last(), da, db);
    }
    r * r
}

fn weighted_edges(chain: &Chain, eval: &BatchEval, weights: &[f64], mut grad: Option<(&mut BatchGrad, f64)>) -> f64 {
    let mut total = 0.0;
    for (e, &w) in weights.iter().enumerate().take(chain.edges.len()) {
        let (a, b) = chain.span_sides(eval, e, e + 1);
        total += w * (a - b).powi(2);
        if let Some((g, k)) = grad.as_mut() {
            let d = 2.0 * w * (a - b) * *k;
            chain.span_backward(g, e, e + 1, d, -d);
        }
    }
    total
}

/// All spans, weighted by `lambda^(j - i)` and normalized per trajectory.
fn subtb_item(chain: &Chain, eval: &BatchEval, lambda: f64, mut grad: Option<(&mut BatchGrad, f64)>) -> f64 {
    let m = chain.nodes.len();
    let mut norm = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            norm += lambda.powi((j - i) as i32);
        }
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let w = lambda.powi((j - i) as i32) / norm;
            let (a, b) = chain.span_sides(eval, i, j);
            total += w * (a - b).powi(2);
            if let Some((g, k)) = grad.as_mut() {
                let d = 2.0 * w * (a - b) * *k;
                chain.span_backward(g, i, j, d, -d);
            }
        }
    }
    total
}

/// Weighted log-sum-exp: value and softmax weights.
fn lse_weights(values: &[f64]) -> (f64, Vec<f64>) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (max + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}

/// Flow-matching terms at `s`: conservation for every state except `s0`,
/// and exit-flow matching for terminals that have other children.
fn fm_state(env: &dyn DagEnv, eval: &BatchEval, s: StateId, mut grad: Option<(&mut BatchGrad, f64)>) -> Result<f64> {
    let sink = env.sink();
    let rs = eval.row(s)?;
    let pure = env.is_pure_terminal(s);
    let mut total = 0.0;

    if s != env.initial_state() {
        let mut inflow = Vec::new();
        for p in env.parents(s) {
            let rp = eval.row(p)?;
            let a = eval
                .forward_action(rp, s)
                .ok_or(GfnError::InvalidEdge { from: p.0, to: s.0 })?;
            inflow.push((eval.log_edge_flow(rp, a), Some((rp, a))));
        }
        let mut outflow = Vec::new();
        if pure {
            outflow.push((log_reward_of(env, s)?, None));
        } else {
            for t in &eval.forward[rs] {
                if t.state != sink {
                    outflow.push((eval.log_edge_flow(rs, t.action), Some((rs, t.action))));
                }
            }
            if env.is_terminating(s) {
                outflow.push((log_reward_of(env, s)?, None));
            }
        }
        let (lin, win) = lse_weights(&inflow.iter().map(|t| t.0).collect::<Vec<_>>());
        let (lout, wout) = lse_weights(&outflow.iter().map(|t| t.0).collect::<Vec<_>>());
        let r = lin - lout;
        total += r * r;
        if let Some((g, k)) = grad.as_mut() {
            let d = 2.0 * r * *k;
            for ((_, idx), w) in inflow.iter().zip(&win) {
                if let Some((row, a)) = idx {
                    g.d_fwd_logit[[*row, *a]] += d * w;
                }
            }
            for ((_, idx), w) in outflow.iter().zip(&wout) {
                if let Some((row, a)) = idx {
                    g.d_fwd_logit[[*row, *a]] -= d * w;
                }
            }
        }
    }

    if env.is_terminating(s) && !pure {
        let exit = eval
            .forward_action(rs, sink)
            .ok_or(GfnError::InvalidEdge { from: s.0, to: sink.0 })?;
        let r = eval.log_edge_flow(rs, exit) - log_reward_of(env, s)?;
        total += r * r;
        if let Some((g, k)) = grad.as_mut() {
            g.d_fwd_logit[[rs, exit]] += 2.0 * r * *k;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
