use stable_gfn::DagEnv;
use stable_gfn_bench::{batch, grid, mlp, tabular, tree};

#[test]
fn fixtures_build() {
    let g = grid();
    assert_eq!(g.terminating_states().len(), 64);
    let b = batch(&mlp(&g, 8), &g, 4);
    assert_eq!(b.len(), 4);
    let t = tree();
    assert!(batch(&tabular(&t), &t, 3).iter().all(|tr| tr.states.len() == 5));
}
