use std::collections::BTreeMap;

use super::PolicyModel;
use crate::envs::{topological_order, DagEnv, StateId};
use crate::error::Result;

const EVAL_CHUNK: usize = 4096;

/// Terminal distribution `P_T` by forward mass propagation in topological
/// order.
pub fn exact_terminal_distribution(
    model: &PolicyModel,
    env: &dyn DagEnv,
    cap: usize,
) -> Result<BTreeMap<StateId, f64>> {
    let order = topological_order(env, cap)?;
    let sink = env.sink();
    let mut mass = vec![0.0f64; env.num_states()];
    mass[env.initial_state().0] = 1.0;
    let mut out = BTreeMap::new();
    let live: Vec<StateId> = order.into_iter().filter(|&s| s != sink).collect();
    for chunk in live.chunks(EVAL_CHUNK) {
        let eval = model.evaluate(env, chunk)?;
        for (row, &s) in chunk.iter().enumerate() {
            let m = mass[s.0];
            for t in &eval.forward[row] {
                let flow = m * eval.log_pf(row, t.action).exp();
                if t.state == sink {
                    *out.entry(s).or_insert(0.0) += flow;
                } else {
                    mass[t.state.0] += flow;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Hypergrid, RegularTree, DEFAULT_STATE_CAP};
    use crate::policy::{BackwardKind, ModelSpec, PolicySampler, TabularHead};
    use crate::rng;
    use rand::Rng;

    #[test]
    fn uniform_tree_is_uniform() {
        let t = RegularTree::new(3, 2).unwrap();
        let mut r = rng::stream(0, "x");
        let m = PolicyModel::new(&t, ModelSpec::Tabular, BackwardKind::Learned, 100.0, &mut r).unwrap();
        let p = exact_terminal_distribution(&m, &t, DEFAULT_STATE_CAP).unwrap();
        assert_eq!(p.len(), 9);
        for v in p.values() {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn peaked_policy_gives_point_mass() {
        let t = RegularTree::new(2, 2).unwrap();
        let mut r = rng::stream(0, "x");
        let mut m = PolicyModel::new(&t, ModelSpec::Tabular, BackwardKind::Learned, 100.0, &mut r).unwrap();
        m.set_tabular(TabularHead::Forward, StateId(0), 1, 50.0).unwrap();
        m.set_tabular(TabularHead::Forward, StateId(0), 0, -50.0).unwrap();
        m.set_tabular(TabularHead::Forward, StateId(2), 0, 50.0).unwrap();
        m.set_tabular(TabularHead::Forward, StateId(2), 1, -50.0).unwrap();
        let p = exact_terminal_distribution(&m, &t, DEFAULT_STATE_CAP).unwrap();
        assert!((p[&t.leaf(2)] - 1.0).abs() < 1e-40f64.max(1e-15));
    }

    #[test]
    fn sums_to_one_on_random_mlp() {
        let g = Hypergrid::new(3, 5, 0.1, 0.5, 2.0).unwrap();
        let mut r = rng::stream(1, "x");
        let m = PolicyModel::new(
            &g,
            ModelSpec::Mlp { hidden: vec![16, 16] },
            BackwardKind::Learned,
            100.0,
            &mut r,
        )
        .unwrap();
        let p = exact_terminal_distribution(&m, &g, DEFAULT_STATE_CAP).unwrap();
        assert_eq!(p.len(), 125);
        assert!((p.values().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn matches_monte_carlo_on_random_logits() {
        let t = RegularTree::new(2, 2).unwrap();
        let mut r = rng::stream(2, "x");
        let mut m = PolicyModel::new(&t, ModelSpec::Tabular, BackwardKind::Learned, 100.0, &mut r).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                let v = r.random_range(-2.0..2.0);
                m.set_tabular(TabularHead::Forward, StateId(s), a, v).unwrap();
            }
        }
        let exact = exact_terminal_distribution(&m, &t, DEFAULT_STATE_CAP).unwrap();
        let mut sampler = PolicySampler::new(&m, &t);
        let n = 1_000_000;
        let mut counts = vec![0usize; t.num_states()];
        for _ in 0..n {
            counts[sampler.sample_forward(&mut r, 0.0).unwrap().terminal().0] += 1;
        }
        for (s, p) in exact {
            let freq = counts[s.0] as f64 / n as f64;
            assert!((freq - p).abs() < 0.005, "{s}: {freq} vs {p}");
        }
    }
}
