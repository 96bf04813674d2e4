//! Fixtures shared by the benchmarks.

use stable_gfn::envs::{Hypergrid, RegularTree};
use stable_gfn::policy::{BackwardKind, ModelSpec, PolicyModel, PolicySampler, Trajectory};
use stable_gfn::{rng, DagEnv};

pub fn tree() -> RegularTree {
    RegularTree::new(3, 3).expect("valid tree")
}

pub fn grid() -> Hypergrid {
    Hypergrid::new(2, 8, 0.1, 0.5, 2.0).expect("valid hypergrid")
}

pub fn mlp(env: &dyn DagEnv, width: usize) -> PolicyModel {
    let mut r = rng::stream(0, "bench/init");
    PolicyModel::new(
        env,
        ModelSpec::Mlp {
            hidden: vec![width, width],
        },
        BackwardKind::Learned,
        100.0,
        &mut r,
    )
    .expect("model")
}

pub fn tabular(env: &dyn DagEnv) -> PolicyModel {
    let mut r = rng::stream(0, "bench/init");
    PolicyModel::new(env, ModelSpec::Tabular, BackwardKind::Learned, 100.0, &mut r).expect("model")
}

pub fn batch(model: &PolicyModel, env: &dyn DagEnv, size: usize) -> Vec<Trajectory> {
    let mut r = rng::stream(0, "bench/batch");
    let mut sampler = PolicySampler::new(model, env);
    (0..size)
        .map(|_| sampler.sample_forward(&mut r, 0.05).expect("sample"))
        .collect()
}
