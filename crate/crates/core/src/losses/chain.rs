//! A trajectory viewed as a chain of flow nodes joined by edges.
//!
//! Node `0` is `s0` with flow `Z`. A pure terminal's flow is pinned to its
//! reward; any other terminal gets one extra node for the sink with flow
//! `R(x)`, reached through the exit edge. With that layout the full span is
//! trajectory balance and every single-edge span is detailed balance.

use crate::envs::{DagEnv, StateId};
use crate::error::{GfnError, Result};
use crate::policy::{BatchEval, BatchGrad, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Node {
    LogZ,
    Fixed(f64),
    Flow(usize),
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Edge {
    pub fwd: (usize, usize),
    pub bwd: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub(crate) struct Chain {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

pub(crate) fn log_reward_of(env: &dyn DagEnv, s: StateId) -> Result<f64> {
    let r = env.reward(s);
    if r > 0.0 && r.is_finite() {
        Ok(r.ln())
    } else {
        Err(GfnError::NonPositiveReward(r))
    }
}

/// Flow node of a non-sink state.
pub(crate) fn node_for(env: &dyn DagEnv, eval: &BatchEval, s: StateId) -> Result<Node> {
    if s == env.initial_state() {
        Ok(Node::LogZ)
    } else if env.is_pure_terminal(s) {
        Ok(Node::Fixed(log_reward_of(env, s)?))
    } else {
        Ok(Node::Flow(eval.row(s)?))
    }
}

pub(crate) fn node_value(eval: &BatchEval, node: Node) -> f64 {
    match node {
        Node::LogZ => eval.log_z,
        Node::Fixed(v) => v,
        Node::Flow(r) => eval.log_flow(r),
    }
}

pub(crate) fn node_grad(grad: &mut BatchGrad, node: Node, g: f64) {
    match node {
        Node::LogZ => grad.d_log_z += g,
        Node::Fixed(_) => {}
        Node::Flow(r) => grad.d_log_flow[r] += g,
    }
}

impl Chain {
    pub fn build(env: &dyn DagEnv, eval: &BatchEval, traj: &Trajectory) -> Result<Self> {
        let n = traj.states.len() - 1;
        let x = traj.terminal();
        let mut nodes = Vec::with_capacity(n + 1);
        let mut edges = Vec::with_capacity(n);
        for t in 0..n {
            nodes.push(node_for(env, eval, traj.states[t])?);
        }
        for t in 0..n - 1 {
            edges.push(Edge {
                fwd: (eval.row(traj.states[t])?, traj.forward_actions[t]),
                bwd: Some((eval.row(traj.states[t + 1])?, traj.backward_actions[t])),
            });
        }
        if n == 1 || !env.is_pure_terminal(x) {
            nodes.push(Node::Fixed(log_reward_of(env, x)?));
            edges.push(Edge {
                fwd: (eval.row(x)?, traj.forward_actions[n - 1]),
                bwd: None,
            });
        }
        Ok(Self { nodes, edges })
    }

    pub fn edge_terms(&self, eval: &BatchEval, e: usize) -> (f64, f64) {
        let edge = self.edges[e];
        let pf = eval.log_pf(edge.fwd.0, edge.fwd.1);
        let pb = edge.bwd.map_or(0.0, |(r, a)| eval.log_pb(r, a));
        (pf, pb)
    }

    /// `(model side, target side)` of the span `i..j` in log space.
    pub fn span_sides(&self, eval: &BatchEval, i: usize, j: usize) -> (f64, f64) {
        let mut a = node_value(eval, self.nodes[i]);
        let mut b = node_value(eval, self.nodes[j]);
        for e in i..j {
            let (pf, pb) = self.edge_terms(eval, e);
            a += pf;
            b += pb;
        }
        (a, b)
    }

    /// Adds `da` to every model-side term and `db` to every target-side term
    /// of the span `i..j`.
    pub fn span_backward(&self, grad: &mut BatchGrad, i: usize, j: usize, da: f64, db: f64) {
        node_grad(grad, self.nodes[i], da);
        node_grad(grad, self.nodes[j], db);
        for e in i..j {
            let edge = self.edges[e];
            grad.d_fwd_logp[[edge.fwd.0, edge.fwd.1]] += da;
            if let Some((r, a)) = edge.bwd {
                grad.d_bwd_logp[[r, a]] += db;
            }
        }
    }

    pub fn last(&self) -> usize {
        self.nodes.len() - 1
    }
}
