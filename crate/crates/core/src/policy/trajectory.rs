use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::envs::{DagEnv, StateId};
use crate::error::{GfnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ForwardSampled,
    BackwardSampled,
    Replayed,
    Enumerated,
}

/// Complete path `s0 -> ... -> x -> sink` with cached log-probabilities.
///
/// `forward_actions[t]` takes `states[t]` to `states[t + 1]`;
/// `backward_actions[t]` takes `states[t + 1]` back to `states[t]` and stops
/// at the terminating state (the sink step back to `x` is deterministic).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<StateId>,
    pub forward_actions: Vec<usize>,
    pub backward_actions: Vec<usize>,
    pub log_pf: f64,
    pub log_pb: f64,
    pub reward: f64,
    pub provenance: Provenance,
}

impl Trajectory {
    /// Terminating state `x`.
    pub fn terminal(&self) -> StateId {
        self.states[self.states.len() - 2]
    }

    /// Number of edges, exit edge included.
    pub fn num_edges(&self) -> usize {
        self.states.len() - 1
    }

    pub fn log_reward(&self) -> f64 {
        self.reward.ln()
    }

    /// `log(Z P_F(tau))`.
    pub fn log_model_flow(&self, log_z: f64) -> f64 {
        log_z + self.log_pf
    }

    /// `log(R(x) P_B(tau | x))`.
    pub fn log_target_flow(&self) -> f64 {
        self.log_reward() + self.log_pb
    }

    /// Checks that consecutive states are edges with matching action ids and
    /// that the path runs from the initial state to the sink.
    pub fn validate(&self, env: &dyn DagEnv) -> Result<()> {
        let n = self.states.len();
        if n < 2
            || self.states[0] != env.initial_state()
            || self.states[n - 1] != env.sink()
            || self.forward_actions.len() != n - 1
            || self.backward_actions.len() != n - 2
        {
            return Err(crate::error::invalid("malformed trajectory"));
        }
        for t in 0..n - 1 {
            let (a, b) = (self.states[t], self.states[t + 1]);
            let fwd = env
                .forward_transitions(a)
                .into_iter()
                .find(|tr| tr.state == b)
                .ok_or(GfnError::InvalidEdge { from: a.0, to: b.0 })?;
            if fwd.action != self.forward_actions[t] {
                return Err(GfnError::InvalidEdge { from: a.0, to: b.0 });
            }
            if t + 1 < n - 1 {
                let bwd = env
                    .backward_transitions(b)
                    .into_iter()
                    .find(|tr| tr.state == a)
                    .ok_or(GfnError::InvalidEdge { from: b.0, to: a.0 })?;
                if bwd.action != self.backward_actions[t] {
                    return Err(GfnError::InvalidEdge { from: b.0, to: a.0 });
                }
            }
        }
        if !env.is_terminating(self.terminal()) {
            return Err(GfnError::NotTerminating(self.terminal().0));
        }
        if !(self.log_pf.is_finite() && self.log_pb.is_finite()) {
            return Err(GfnError::NonFinite("trajectory log-probability"));
        }
        Ok(())
    }
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(mut out: W, trajectories: &[Trajectory]) -> Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
