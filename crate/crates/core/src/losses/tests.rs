use super::*;
use crate::approximator::{grad_check, sample_indices};
use crate::envs::{reachable_terminal_counts, Hypergrid, RegularTree, DEFAULT_STATE_CAP};
use crate::policy::{BackwardKind, ModelSpec, PolicySampler, Provenance, TabularHead};
use crate::rng;
use rand::Rng;
use std::f64::consts::LN_2;

fn random_model(env: &dyn DagEnv, spec: ModelSpec, seed: u64) -> PolicyModel {
    let mut r = rng::stream(seed, "model");
    let mut model = PolicyModel::new(env, spec.clone(), BackwardKind::Learned, 1.0, &mut r).unwrap();
    if spec == ModelSpec::Tabular {
        let values: Vec<f64> = (0..model.params().len()).map(|_| r.random_range(-1.0..1.0)).collect();
        model.params_mut().assign(&values).unwrap();
    } else {
        model.set_log_z(r.random_range(-1.0..1.0));
    }
    model
}

fn sample_batch(model: &PolicyModel, env: &dyn DagEnv, n: usize, seed: u64) -> Vec<Trajectory> {
    let mut r = rng::stream(seed, "batch");
    let mut sampler = PolicySampler::new(model, env);
    (0..n).map(|_| sampler.sample_forward(&mut r, 0.2).unwrap()).collect()
}

fn traj(log_pf: f64, log_pb: f64, reward: f64) -> Trajectory {
    Trajectory {
        states: vec![StateId(0), StateId(1), StateId(2)],
        forward_actions: vec![0, 0],
        backward_actions: vec![0],
        log_pf,
        log_pb,
        reward,
        provenance: Provenance::ForwardSampled,
    }
}

#[test]
fn tb_examples() {
    assert!(tb_loss(&traj(0.25f64.ln(), 0.5f64.ln(), 1.0), LN_2).unwrap().abs() < 1e-15);
    let l = tb_loss(&traj(0.5f64.ln(), 0.25f64.ln(), 1.0), 0.0).unwrap();
    assert!((l - LN_2 * LN_2).abs() < 1e-12);
    assert!(tb_loss(&traj(0.0, 0.0, 0.0), 0.0).is_err());
}

#[test]
fn db_example_ratio_one() {
    // F(s) = 2, P_F = 0.5, F(s') = 1, P_B = 1 on the root edge of a two-leaf tree.
    let env = RegularTree::with_rewards(2, 1, vec![1.0, 1.0]).unwrap();
    let mut r = rng::stream(1, "m");
    let mut model = PolicyModel::new(&env, ModelSpec::Tabular, BackwardKind::Learned, 1.0, &mut r).unwrap();
    model.set_log_z(2f64.ln());
    let l = db_loss(&model, &env, StateId(0), StateId(1)).unwrap();
    assert!(l.abs() < 1e-15);
    model.set_log_z(0.0);
    let l = db_loss(&model, &env, StateId(0), StateId(1)).unwrap();
    assert!((l - LN_2 * LN_2).abs() < 1e-12);
    assert!(db_loss(&model, &env, StateId(1), StateId(2)).is_err());
}

#[test]
fn fm_examples() {
    // Depth-2 binary tree: node 1 has in-flow from the root and two leaf children.
    let env = RegularTree::with_rewards(2, 2, vec![1.0; 4]).unwrap();
    let mut r = rng::stream(2, "m");
    let mut model = PolicyModel::new(&env, ModelSpec::Tabular, BackwardKind::Learned, 1.0, &mut r).unwrap();
    // in-flow 2 into node 1, out-flows 1 + 1
    model
        .set_tabular(TabularHead::Forward, StateId(0), 0, 2f64.ln())
        .unwrap();
    assert!(fm_loss(&model, &env, StateId(1)).unwrap().abs() < 1e-15);
    // leaf 3 is pure: in-flow e^0 = 1 against R = 1
    assert!(fm_loss(&model, &env, StateId(3)).unwrap().abs() < 1e-15);
    // in-flow 1 against out-flow e
    model.set_tabular(TabularHead::Forward, StateId(0), 0, 0.0).unwrap();
    model
        .set_tabular(TabularHead::Forward, StateId(1), 0, (std::f64::consts::E - 1.0).ln())
        .unwrap();
    let l = fm_loss(&model, &env, StateId(1)).unwrap();
    assert!((l - 1.0).abs() < 1e-12);
    assert!(fm_loss(&model, &env, StateId(0)).is_err());
}

#[test]
fn subtb_spans_reduce_to_tb_and_db() {
    for (env, spec) in [
        (
            Box::new(RegularTree::new(3, 3).unwrap()) as Box<dyn DagEnv>,
            ModelSpec::Tabular,
        ),
        (
            Box::new(Hypergrid::standard(2, 4).unwrap()),
            ModelSpec::Mlp { hidden: vec![8] },
        ),
    ] {
        let env = env.as_ref();
        let model = random_model(env, spec, 3);
        for t in sample_batch(&model, env, 20, 4) {
            let m = subtb_nodes(env, &t);
            let full = subtb_loss(&model, env, &t, 0, m - 1).unwrap();
            let tb = batch_loss(&model, env, std::slice::from_ref(&t), &LossOptions::new(Objective::Tb)).unwrap();
            assert!((full - tb.losses[0]).abs() <= 1e-10 * full.max(1.0));
            let cached = tb_loss(&t, model.log_z()).unwrap();
            assert!((cached - full).abs() <= 1e-9 * full.max(1.0));
            for e in 0..m - 1 {
                let span = subtb_loss(&model, env, &t, e, e + 1).unwrap();
                let db = db_loss(&model, env, t.states[e], t.states[e + 1]).unwrap();
                assert!((span - db).abs() <= 1e-12 * span.max(1.0), "edge {e}: {span} vs {db}");
            }
            assert!(subtb_loss(&model, env, &t, 1, 1).is_err());
        }
    }
}

#[test]
fn subtb_batch_matches_brute_force() {
    let env = RegularTree::new(2, 4).unwrap();
    let model = random_model(&env, ModelSpec::Tabular, 5);
    let batch = sample_batch(&model, &env, 8, 6);
    let lambda = 0.9f64;
    let report = batch_loss(&model, &env, &batch, &LossOptions::new(Objective::Subtb)).unwrap();
    for (t, &got) in batch.iter().zip(&report.losses) {
        let m = subtb_nodes(&env, t);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..m {
            for j in i + 1..m {
                let w = lambda.powi((j - i) as i32);
                num += w * subtb_loss(&model, &env, t, i, j).unwrap();
                den += w;
            }
        }
        assert!((num / den - got).abs() < 1e-10);
    }
}

#[test]
fn wdb_weights_on_small_tree() {
    let env = RegularTree::new(2, 2).unwrap();
    let counts = reachable_terminal_counts(&env, DEFAULT_STATE_CAP).unwrap();
    let model = random_model(&env, ModelSpec::Tabular, 7);
    let t = &sample_batch(&model, &env, 1, 8)[0];
    let w = wdb_weights(t, &env, &counts).unwrap();
    let expect = [0.2, 0.4, 0.4];
    for (a, b) in w.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// `s0 -> s1 -> ... -> s_{len-1} -> sink` with a single terminal at the end.
struct Path(usize);

impl DagEnv for Path {
    fn num_states(&self) -> usize {
        self.0 + 1
    }
    fn sink(&self) -> StateId {
        StateId(self.0)
    }
    fn num_forward_actions(&self) -> usize {
        1
    }
    fn num_backward_actions(&self) -> usize {
        1
    }
    fn forward_transitions(&self, s: StateId) -> Vec<crate::Transition> {
        if s.0 < self.0 {
            vec![crate::Transition {
                action: 0,
                state: StateId(s.0 + 1),
            }]
        } else {
            Vec::new()
        }
    }
    fn backward_transitions(&self, s: StateId) -> Vec<crate::Transition> {
        if s.0 > 0 && s.0 < self.0 {
            vec![crate::Transition {
                action: 0,
                state: StateId(s.0 - 1),
            }]
        } else {
            Vec::new()
        }
    }
    fn is_terminating(&self, s: StateId) -> bool {
        s.0 + 1 == self.0
    }
    fn reward(&self, s: StateId) -> f64 {
        if self.is_terminating(s) {
            1.0
        } else {
            0.0
        }
    }
    fn feature_dim(&self) -> usize {
        self.0
    }
    fn encode(&self, s: StateId, out: &mut [f64]) {
        out.fill(0.0);
        if s.0 < self.0 {
            out[s.0] = 1.0;
        }
    }
    fn max_trajectory_len(&self) -> usize {
        self.0
    }
    fn describe(&self) -> String {
        format!("path({})", self.0)
    }
}

#[test]
fn wdb_on_a_single_path_is_uniform() {
    let env = Path(5);
    crate::envs::check_structure(&env, DEFAULT_STATE_CAP).unwrap();
    let counts = reachable_terminal_counts(&env, DEFAULT_STATE_CAP).unwrap();
    let model = random_model(&env, ModelSpec::Tabular, 9);
    let t = &sample_batch(&model, &env, 1, 10)[0];
    let w = wdb_weights(t, &env, &counts).unwrap();
    assert_eq!(w.len(), 5);
    assert!(w.iter().all(|x| (x - 0.2).abs() < 1e-12));
}

#[test]
fn wdb_without_counts_is_an_error() {
    let env = RegularTree::new(2, 2).unwrap();
    let model = random_model(&env, ModelSpec::Tabular, 9);
    let batch = sample_batch(&model, &env, 2, 10);
    assert!(batch_loss(&model, &env, &batch, &LossOptions::new(Objective::Wdb)).is_err());
}

#[test]
fn reference_only_with_tb() {
    let env = RegularTree::new(2, 2).unwrap();
    let model = random_model(&env, ModelSpec::Tabular, 9);
    let batch = sample_batch(&model, &env, 2, 10);
    let opts = LossOptions::new(Objective::Db).with_reference(1.0);
    assert!(batch_loss(&model, &env, &batch, &opts).is_err());
}

#[test]
fn max_to_rest_values() {
    assert_eq!(max_to_rest(&[1.0, 2.0, 6.0]), 2.0);
    assert_eq!(max_to_rest(&[5.0, 0.0]), f64::INFINITY);
    assert_eq!(max_to_rest(&[]), f64::INFINITY);
}

#[test]
fn reference_batch_caps_losses() {
    let env = Hypergrid::standard(2, 4).unwrap();
    let model = random_model(&env, ModelSpec::Mlp { hidden: vec![8] }, 11);
    let batch = sample_batch(&model, &env, 16, 12);
    let plain = batch_loss(&model, &env, &batch, &LossOptions::new(Objective::Tb)).unwrap();
    let c = 0.5 * plain.max.sqrt();
    let capped = batch_loss(&model, &env, &batch, &LossOptions::new(Objective::Tb).with_reference(c)).unwrap();
    for i in 0..batch.len() {
        assert!(capped.losses[i] <= c * c + 1e-9);
        assert_eq!(capped.deltas[i] > 0.0, plain.losses[i] > c * c);
        assert_eq!(capped.log_ratios[i], plain.log_ratios[i]);
    }
    assert!(capped.active_delta_fraction() > 0.0);
}

/// Finite differences are meaningless across the activation kink, so
/// instances whose batch lies close to it are redrawn.
fn smooth_instance(env: &dyn DagEnv, spec: &ModelSpec, seed: u64) -> (PolicyModel, Vec<Trajectory>) {
    for k in 0..100 {
        let model = random_model(env, spec.clone(), seed * 1000 + k);
        let batch = sample_batch(&model, env, 6, seed * 1000 + k + 1);
        let states: Vec<StateId> = batch
            .iter()
            .flat_map(|t| t.states.iter().copied())
            .filter(|&s| s != env.sink())
            .flat_map(|s| std::iter::once(s).chain(env.parents(s)))
            .collect();
        if model.kink_margin(env, &states).unwrap() > 1e-2 {
            return (model, batch);
        }
    }
    panic!("no smooth instance found");
}

fn check_gradients(env: &dyn DagEnv, spec: ModelSpec, objective: Objective, reference: bool, seed: u64) {
    let (model, batch) = smooth_instance(env, &spec, seed);
    let counts = reachable_terminal_counts(env, DEFAULT_STATE_CAP).unwrap();
    let mut opts = LossOptions::new(objective).with_reachable(&counts);
    let deltas;
    if reference {
        let plain = batch_loss(&model, env, &batch, &LossOptions::new(Objective::Tb)).unwrap();
        let capped = LossOptions::new(Objective::Tb).with_reference(0.5 * plain.max.sqrt());
        deltas = batch_loss(&model, env, &batch, &capped).unwrap().deltas;
        assert!(deltas.iter().any(|&d| d > 0.0));
        opts = opts.with_fixed_deltas(&deltas);
    }
    let params = model.params().values().to_vec();
    let mut r = rng::stream(seed, "indices");
    let indices = sample_indices(&mut r, params.len(), 40);
    let mut probe = model.clone();
    let err = grad_check(
        |p| {
            probe.params_mut().assign(p).unwrap();
            let (rep, g) = batch_loss_and_grad(&probe, env, &batch, &opts).unwrap();
            (rep.mean, g)
        },
        &params,
        &indices,
        1e-4,
    );
    assert!(
        err < 1e-4,
        "{objective} reference={reference} {}: {err}",
        env.describe()
    );
}

#[test]
fn gradients_match_finite_differences() {
    let tree = RegularTree::new(2, 3).unwrap();
    let grid = Hypergrid::standard(2, 3).unwrap();
    for (k, objective) in Objective::ALL.into_iter().enumerate() {
        let seed = 100 + k as u64;
        check_gradients(&tree, ModelSpec::Tabular, objective, false, seed);
        check_gradients(&grid, ModelSpec::Mlp { hidden: vec![6, 5] }, objective, false, seed);
    }
    check_gradients(&tree, ModelSpec::Tabular, Objective::Tb, true, 200);
    check_gradients(&grid, ModelSpec::Mlp { hidden: vec![6] }, Objective::Tb, true, 201);
}

#[test]
fn objective_names_round_trip() {
    for o in Objective::ALL {
        assert_eq!(o.name().parse::<Objective>().unwrap(), o);
    }
    assert!("xx".parse::<Objective>().is_err());
}
