//! Forward/backward policies, the log-partition scalar and the state-flow
//! head, all stored in one [`ParamVector`].
//!
//! Policy logits are clamped to `[-50, 50]` on valid actions and masked to
//! `-inf` elsewhere before the log-softmax, so every valid edge keeps a
//! strictly positive probability.

mod checkpoint;
mod exact;
mod sampler;
mod trajectory;

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{Approximator, Head, HeadInput, Mlp, ParamVector, Tabular};
use crate::envs::{DagEnv, StateId, Transition};
use crate::error::{GfnError, Result};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use exact::exact_terminal_distribution;
pub use sampler::{sample_backward, sample_forward, sample_terminals_parallel, PolicySampler, StateProbs};
pub use trajectory::{read_jsonl, write_jsonl, Provenance, Trajectory};

/// Policy logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]`.
pub const LOGIT_CLAMP: f64 = 50.0;

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 256];

/// Default learning-rate multiplier of the log-partition scalar.
pub const DEFAULT_LOG_Z_LR_MULTIPLIER: f64 = 100.0;

pub fn clamp_logit(x: f64) -> f64 {
    x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

/// Parameterization of every head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// One free parameter per (state, action) and per state flow.
    Tabular,
    /// Separate MLPs for the forward, backward and flow heads.
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
    },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Mlp {
            hidden: default_hidden(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardKind {
    #[default]
    Learned,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HeadSlot {
    head: Head,
    offset: usize,
}

impl HeadSlot {
    fn params<'a>(&self, all: &'a [f64]) -> &'a [f64] {
        &all[self.offset..self.offset + self.head.num_params()]
    }
}

/// Forward policy, backward policy, `log Z` and state flows.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    spec: ModelSpec,
    backward_kind: BackwardKind,
    params: ParamVector,
    forward: HeadSlot,
    backward: Option<HeadSlot>,
    flow: HeadSlot,
    log_z_index: usize,
    num_states: usize,
    feature_dim: usize,
    forward_actions: usize,
    backward_actions: usize,
}

fn build_head(spec: &ModelSpec, rows: usize, input: usize, output: usize) -> Result<Head> {
    Ok(match spec {
        ModelSpec::Tabular => Head::Tabular(Tabular { rows, cols: output }),
        ModelSpec::Mlp { hidden } => {
            let mut widths = Vec::with_capacity(hidden.len() + 2);
            widths.push(input);
            widths.extend(hidden);
            widths.push(output);
            Head::Mlp(Mlp::new(widths)?)
        }
    })
}

fn init_head<R: Rng + ?Sized>(head: &Head, rng: &mut R) -> Vec<f64> {
    match head {
        Head::Tabular(t) => vec![0.0; t.num_params()],
        Head::Mlp(m) => m.init_params(rng),
    }
}

impl PolicyModel {
    /// Fresh model: tabular heads start at zero (uniform policies), MLP heads
    /// at fan-in uniform weights, and `log Z = 0`.
    pub fn new<R: Rng + ?Sized>(
        env: &dyn DagEnv,
        spec: ModelSpec,
        backward_kind: BackwardKind,
        log_z_lr_multiplier: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = env.num_states();
        let fd = env.feature_dim();
        let fa = env.num_forward_actions();
        let ba = env.num_backward_actions().max(1);
        let mut params = ParamVector::new();

        let fwd = build_head(&spec, n, fd, fa)?;
        let off = params.push_slice("forward", init_head(&fwd, rng), 1.0);
        let forward = HeadSlot { head: fwd, offset: off };

        let backward = match backward_kind {
            BackwardKind::Learned => {
                let bwd = build_head(&spec, n, fd, ba)?;
                let off = params.push_slice("backward", init_head(&bwd, rng), 1.0);
                Some(HeadSlot { head: bwd, offset: off })
            }
            BackwardKind::Uniform => None,
        };

        let flw = build_head(&spec, n, fd, 1)?;
        let off = params.push_slice("flow", init_head(&flw, rng), 1.0);
        let flow = HeadSlot { head: flw, offset: off };

        let log_z_index = params.push_slice("log_z", vec![0.0], log_z_lr_multiplier);
        Ok(Self {
            spec,
            backward_kind,
            params,
            forward,
            backward,
            flow,
            log_z_index,
            num_states: n,
            feature_dim: fd,
            forward_actions: fa,
            backward_actions: ba,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn backward_kind(&self) -> BackwardKind {
        self.backward_kind
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn log_z(&self) -> f64 {
        self.params.values()[self.log_z_index]
    }

    pub fn set_log_z(&mut self, value: f64) {
        if let Some(s) = self.params.slice_mut("log_z") {
            s[0] = value;
        }
    }

    /// Whether the model was built for an environment of this shape.
    pub fn fits(&self, env: &dyn DagEnv) -> bool {
        self.num_states == env.num_states()
            && self.feature_dim == env.feature_dim()
            && self.forward_actions == env.num_forward_actions()
            && self.backward_actions == env.num_backward_actions().max(1)
    }

    fn ensure_fits(&self, env: &dyn DagEnv) -> Result<()> {
        if self.fits(env) {
            Ok(())
        } else {
            Err(GfnError::InvalidArgument(format!(
                "model shape does not match environment {}",
                env.describe()
            )))
        }
    }

    /// Sets one tabular entry. Only valid for tabular models.
    pub fn set_tabular(&mut self, head: TabularHead, s: StateId, action: usize, value: f64) -> Result<()> {
        let slot = match head {
            TabularHead::Forward => &self.forward,
            TabularHead::Backward => self
                .backward
                .as_ref()
                .ok_or_else(|| crate::error::invalid("model has a fixed uniform backward policy"))?,
            TabularHead::Flow => &self.flow,
        };
        let Head::Tabular(t) = &slot.head else {
            return Err(crate::error::invalid("set_tabular on a non-tabular model"));
        };
        if s.0 >= t.rows || action >= t.cols {
            return Err(crate::error::invalid("tabular index out of range"));
        }
        let idx = slot.offset + s.0 * t.cols + action;
        let mut values = self.params.values().to_vec();
        values[idx] = value;
        self.params.assign(&values)
    }

    /// Evaluates every head on `states` in one batch.
    pub fn evaluate(&self, env: &dyn DagEnv, states: &[StateId]) -> Result<BatchEval> {
        self.ensure_fits(env)?;
        let n = states.len();
        let ids: Vec<usize> = states.iter().map(|s| s.0).collect();
        let needs_features = matches!(self.spec, ModelSpec::Mlp { .. });
        let features = if needs_features {
            let mut f = Array2::zeros((n, self.feature_dim));
            for (i, &s) in states.iter().enumerate() {
                env.encode(s, f.row_mut(i).as_slice_mut().expect("row-major"));
            }
            f
        } else {
            Array2::zeros((n, 0))
        };
        let input = HeadInput {
            ids: &ids,
            features: features.view(),
        };
        let all = self.params.values();

        let fwd_raw = self.forward.head.evaluate(self.forward.params(all), &input)?;
        let bwd_raw = match &self.backward {
            Some(slot) => slot.head.evaluate(slot.params(all), &input)?,
            None => Array2::zeros((n, self.backward_actions)),
        };
        let flow = self.flow.head.evaluate(self.flow.params(all), &input)?;

        let mut forward = Vec::with_capacity(n);
        let mut backward = Vec::with_capacity(n);
        let mut fwd_logp = Array2::from_elem((n, self.forward_actions), f64::NEG_INFINITY);
        let mut bwd_logp = Array2::from_elem((n, self.backward_actions), f64::NEG_INFINITY);
        for (i, &s) in states.iter().enumerate() {
            let ft = env.forward_transitions(s);
            log_softmax_into(
                &ft,
                fwd_raw.row(i).as_slice().expect("row-major"),
                fwd_logp.row_mut(i).as_slice_mut().expect("row-major"),
            );
            forward.push(ft);
            let bt = if s == env.sink() {
                Vec::new()
            } else {
                env.backward_transitions(s)
            };
            log_softmax_into(
                &bt,
                bwd_raw.row(i).as_slice().expect("row-major"),
                bwd_logp.row_mut(i).as_slice_mut().expect("row-major"),
            );
            backward.push(bt);
        }
        let index = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        Ok(BatchEval {
            states: states.to_vec(),
            index,
            ids,
            features,
            forward,
            backward,
            fwd_raw,
            fwd_logp,
            bwd_raw,
            bwd_logp,
            log_flow: flow.column(0).to_vec(),
            log_z: self.log_z(),
        })
    }

    /// Smallest distance of any MLP hidden pre-activation on `states` from the
    /// activation kink; infinite for tabular models.
    pub fn kink_margin(&self, env: &dyn DagEnv, states: &[StateId]) -> Result<f64> {
        self.ensure_fits(env)?;
        let mut f = Array2::zeros((states.len(), self.feature_dim));
        for (i, &s) in states.iter().enumerate() {
            env.encode(s, f.row_mut(i).as_slice_mut().expect("row-major"));
        }
        let all = self.params.values();
        let mut margin = f64::INFINITY;
        for slot in [Some(&self.forward), self.backward.as_ref(), Some(&self.flow)]
            .into_iter()
            .flatten()
        {
            if let Head::Mlp(m) = &slot.head {
                margin = margin.min(m.kink_margin(slot.params(all), f.view())?);
            }
        }
        Ok(margin)
    }

    /// Backpropagates head-level gradients into a flat parameter gradient.
    pub fn backprop(&self, eval: &BatchEval, grad: &BatchGrad, out: &mut [f64]) -> Result<()> {
        if out.len() != self.params.len() {
            return Err(GfnError::DimensionMismatch {
                expected: self.params.len(),
                got: out.len(),
            });
        }
        let n = eval.states.len();
        let input = HeadInput {
            ids: &eval.ids,
            features: eval.features.view(),
        };
        let all = self.params.values();

        let up_f = logit_upstream(
            &eval.forward,
            &eval.fwd_raw,
            &eval.fwd_logp,
            &grad.d_fwd_logp,
            Some(&grad.d_fwd_logit),
        );
        let end = self.forward.offset + self.forward.head.num_params();
        self.forward.head.accumulate_gradient(
            self.forward.params(all),
            &input,
            up_f.view(),
            &mut out[self.forward.offset..end],
        )?;

        if let Some(slot) = &self.backward {
            let up_b = logit_upstream(&eval.backward, &eval.bwd_raw, &eval.bwd_logp, &grad.d_bwd_logp, None);
            let end = slot.offset + slot.head.num_params();
            slot.head
                .accumulate_gradient(slot.params(all), &input, up_b.view(), &mut out[slot.offset..end])?;
        }

        let up_flow = Array2::from_shape_fn((n, 1), |(i, _)| grad.d_log_flow[i]);
        let end = self.flow.offset + self.flow.head.num_params();
        self.flow.head.accumulate_gradient(
            self.flow.params(all),
            &input,
            up_flow.view(),
            &mut out[self.flow.offset..end],
        )?;

        out[self.log_z_index] += grad.d_log_z;
        Ok(())
    }
}

/// Selects a tabular head for [`PolicyModel::set_tabular`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TabularHead {
    Forward,
    Backward,
    Flow,
}

fn log_softmax_into(valid: &[Transition], raw: &[f64], out: &mut [f64]) {
    if valid.is_empty() {
        return;
    }
    let max = valid
        .iter()
        .map(|t| clamp_logit(raw[t.action]))
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = valid.iter().map(|t| (clamp_logit(raw[t.action]) - max).exp()).sum();
    let lse = max + sum.ln();
    for t in valid {
        out[t.action] = clamp_logit(raw[t.action]) - lse;
    }
}

/// d(loss)/d(raw logit) from gradients w.r.t. log-probabilities (through the
/// masked log-softmax) and w.r.t. the clamped logits themselves. Entries
/// where the clamp is active get zero gradient.
fn logit_upstream(
    transitions: &[Vec<Transition>],
    raw: &Array2<f64>,
    logp: &Array2<f64>,
    d_logp: &Array2<f64>,
    d_logit: Option<&Array2<f64>>,
) -> Array2<f64> {
    let mut up = Array2::zeros(raw.raw_dim());
    for (i, valid) in transitions.iter().enumerate() {
        if valid.is_empty() {
            continue;
        }
        let total: f64 = valid.iter().map(|t| d_logp[[i, t.action]]).sum();
        for t in valid {
            let a = t.action;
            let mut g = d_logp[[i, a]] - logp[[i, a]].exp() * total;
            if let Some(direct) = d_logit {
                g += direct[[i, a]];
            }
            if raw[[i, a]].abs() <= LOGIT_CLAMP {
                up[[i, a]] = g;
            }
        }
    }
    up
}

/// Head outputs for a batch of distinct states.
#[derive(Clone, Debug)]
pub struct BatchEval {
    pub states: Vec<StateId>,
    index: HashMap<StateId, usize>,
    ids: Vec<usize>,
    features: Array2<f64>,
    pub forward: Vec<Vec<Transition>>,
    pub backward: Vec<Vec<Transition>>,
    fwd_raw: Array2<f64>,
    fwd_logp: Array2<f64>,
    bwd_raw: Array2<f64>,
    bwd_logp: Array2<f64>,
    log_flow: Vec<f64>,
    pub log_z: f64,
}

impl BatchEval {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn row(&self, s: StateId) -> Result<usize> {
        self.index
            .get(&s)
            .copied()
            .ok_or_else(|| crate::error::invalid(format!("state {s} not in evaluated batch")))
    }

    pub fn log_pf(&self, row: usize, action: usize) -> f64 {
        self.fwd_logp[[row, action]]
    }

    pub fn log_pb(&self, row: usize, action: usize) -> f64 {
        self.bwd_logp[[row, action]]
    }

    /// Clamped forward logit, read as a log edge flow by flow matching.
    pub fn log_edge_flow(&self, row: usize, action: usize) -> f64 {
        clamp_logit(self.fwd_raw[[row, action]])
    }

    pub fn log_flow(&self, row: usize) -> f64 {
        self.log_flow[row]
    }

    /// Forward action leading from the state in `row` to `child`.
    pub fn forward_action(&self, row: usize, child: StateId) -> Option<usize> {
        self.forward[row].iter().find(|t| t.state == child).map(|t| t.action)
    }

    pub fn backward_action(&self, row: usize, parent: StateId) -> Option<usize> {
        self.backward[row].iter().find(|t| t.state == parent).map(|t| t.action)
    }
}

/// Gradients of a scalar loss w.r.t. the quantities in a [`BatchEval`].
#[derive(Clone, Debug)]
pub struct BatchGrad {
    pub d_fwd_logp: Array2<f64>,
    pub d_fwd_logit: Array2<f64>,
    pub d_bwd_logp: Array2<f64>,
    pub d_log_flow: Vec<f64>,
    pub d_log_z: f64,
}

impl BatchGrad {
    pub fn zeros(eval: &BatchEval) -> Self {
        Self {
            d_fwd_logp: Array2::zeros(eval.fwd_logp.raw_dim()),
            d_fwd_logit: Array2::zeros(eval.fwd_raw.raw_dim()),
            d_bwd_logp: Array2::zeros(eval.bwd_logp.raw_dim()),
            d_log_flow: vec![0.0; eval.len()],
            d_log_z: 0.0,
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.d_fwd_logp *= k;
        self.d_fwd_logit *= k;
        self.d_bwd_logp *= k;
        self.d_log_flow.iter_mut().for_each(|g| *g *= k);
        self.d_log_z *= k;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Hypergrid, RegularTree};
    use crate::rng;

    #[test]
    fn probabilities_normalize_on_every_state() {
        let g = Hypergrid::new(2, 4, 0.1, 0.5, 2.0).unwrap();
        let mut r = rng::stream(5, "policy-test");
        let model = PolicyModel::new(
            &g,
            ModelSpec::Mlp { hidden: vec![16, 16] },
            BackwardKind::Learned,
            100.0,
            &mut r,
        )
        .unwrap();
        let states: Vec<StateId> = (0..g.num_states() - 1).map(StateId).collect();
        let eval = model.evaluate(&g, &states).unwrap();
        for (i, &s) in states.iter().enumerate() {
            let fsum: f64 = eval.forward[i].iter().map(|t| eval.log_pf(i, t.action).exp()).sum();
            assert!((fsum - 1.0).abs() < 1e-12);
            if s != g.initial_state() {
                let bsum: f64 = eval.backward[i].iter().map(|t| eval.log_pb(i, t.action).exp()).sum();
                assert!((bsum - 1.0).abs() < 1e-12);
            }
            for t in &eval.forward[i] {
                assert!(eval.log_pf(i, t.action) > f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn clamp_bounds_logits() {
        assert_eq!(clamp_logit(90.0), 50.0);
        assert_eq!(clamp_logit(-90.0), -50.0);
        assert_eq!(clamp_logit(3.5), 3.5);
    }

    #[test]
    fn clamped_logits_keep_valid_edges_positive() {
        let t = RegularTree::new(2, 1).unwrap();
        let mut r = rng::stream(0, "clamp");
        let mut model = PolicyModel::new(&t, ModelSpec::Tabular, BackwardKind::Learned, 100.0, &mut r).unwrap();
        model.set_tabular(TabularHead::Forward, StateId(0), 0, 1e6).unwrap();
        let eval = model.evaluate(&t, &[StateId(0)]).unwrap();
        let p1 = eval.log_pf(0, 1);
        assert!(p1.is_finite());
        assert!((p1 + 50.0 + (1.0 + (-100f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_backward_has_no_parameters() {
        let g = Hypergrid::new(2, 3, 0.1, 0.5, 2.0).unwrap();
        let mut r = rng::stream(0, "uniform");
        let model = PolicyModel::new(&g, ModelSpec::Tabular, BackwardKind::Uniform, 100.0, &mut r).unwrap();
        assert!(model.params().slice("backward").is_none());
        let s = g.state_of(&[1, 1]);
        let eval = model.evaluate(&g, &[s]).unwrap();
        assert!((eval.log_pb(0, 0) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_environment() {
        let t = RegularTree::new(2, 2).unwrap();
        let g = Hypergrid::new(2, 3, 0.1, 0.5, 2.0).unwrap();
        let mut r = rng::stream(0, "fit");
        let model = PolicyModel::new(&t, ModelSpec::Tabular, BackwardKind::Learned, 100.0, &mut r).unwrap();
        assert!(model.evaluate(&g, &[StateId(0)]).is_err());
    }
}
