//! Property suites checking the bounds and losses against exact
//! enumeration. Each suite returns a pass flag and a one-line summary; the
//! command-line `verify` subcommand and the acceptance tests both run them.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::approximator::{grad_check, sample_indices};
use crate::certify::{
    incremental_tv_sandwich, loss_supremum, mc_delta_over_zstar, one_more_mode_tv, optimize_certificate, pac_tv_bound,
    pac_tv_bound_with_reference, reference_m_limit, reference_main_term, tv_bound_from_loss, LossScope, SampleRecord,
};
use crate::envs::{
    enumerate_terminating, one_more_mode_tree, reachable_terminal_counts, DagEnv, Hypergrid, RegularTree, StateId,
    DEFAULT_STATE_CAP,
};
use crate::error::{invalid, Result};
use crate::losses::{
    augmented_loss, batch_loss, batch_loss_and_grad, db_loss, delta_over_target, fm_loss, reference_flow_delta,
    subtb_loss, subtb_nodes, tb_loss, LossOptions, Objective,
};
use crate::oracle::{
    balanced_tabular_model, enumerate_trajectories, exact_tv, sample_target_trajectories, target_distribution,
    total_l1, TargetSampler, DEFAULT_TRAJECTORY_CAP,
};
use crate::policy::{BackwardKind, ModelSpec, PolicyModel, PolicySampler, Trajectory};
use crate::rng;

pub const SUITES: [&str; 9] = [
    "ref_cap",
    "one_more_mode_losses",
    "one_more_mode_tv",
    "tv_sound",
    "pac_coverage",
    "monotone",
    "sandwich",
    "mc_estimator",
    "gradcheck",
];

/// One-sided 99% normal quantile.
const Z99: f64 = 2.326_347_874_040_841;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

/// Runs the named suite under `seed`.
pub fn run_suite(name: &str, seed: u64) -> Result<SuiteResult> {
    let start = Instant::now();
    let (passed, detail) = match name {
        "ref_cap" => ref_cap(10_000, seed)?,
        "one_more_mode_losses" => one_more_mode_losses(3, 3, 1e-3)?,
        "one_more_mode_tv" => one_more_mode_closed_form()?,
        "tv_sound" => tv_sound(200, seed)?,
        "pac_coverage" => pac_coverage(1000, 0.05, seed)?,
        "monotone" => monotone(50, reference_main_term),
        "sandwich" => sandwich(100, seed)?,
        "mc_estimator" => mc_estimator(10_000, seed)?,
        "gradcheck" => gradcheck(10, seed)?,
        other => {
            return Err(invalid(format!(
                "unknown suite {other:?}; known: {}",
                SUITES.join(", ")
            )))
        }
    };
    Ok(SuiteResult {
        name: name.to_string(),
        passed,
        detail,
        secs: start.elapsed().as_secs_f64(),
    })
}

/// Every suite, or only `only` when given.
pub fn run_all(only: Option<&str>, seed: u64) -> Result<Vec<SuiteResult>> {
    match only {
        Some(name) => Ok(vec![run_suite(name, seed)?]),
        None => SUITES.iter().map(|s| run_suite(s, seed)).collect(),
    }
}

/// Balanced tabular model with uniform noise of half-width `sigma` on every
/// policy logit and on `log Z`.
pub fn perturbed_model<R: Rng + ?Sized>(env: &dyn DagEnv, sigma: f64, rng: &mut R) -> Result<PolicyModel> {
    let mut model = balanced_tabular_model(env, DEFAULT_STATE_CAP)?;
    let mut values = model.params().values().to_vec();
    for slice in model.params().slices() {
        if slice.name == "flow" {
            continue;
        }
        for v in &mut values[slice.range()] {
            *v += sigma * rng.random_range(-1.0..1.0);
        }
    }
    model.params_mut().assign(&values)?;
    Ok(model)
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi / lo).ln()).exp()
}

/// Reference-flow cap: the augmented loss never exceeds `c^2`, equals it
/// whenever the flow is positive, and the flow vanishes exactly when
/// `|log ratio| <= c`.
pub fn ref_cap(trials: usize, seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream(seed, "verify/ref_cap");
    let mut bad = 0;
    let mut active = 0;
    for k in 0..trials {
        let lm = r.random_range(-20.0..20.0);
        let lt = if k % 10 == 0 { lm } else { r.random_range(-20.0..20.0) };
        let c = if k % 17 == 0 { 0.0 } else { r.random_range(0.0..5.0) };
        let delta = reference_flow_delta(lm, lt, c);
        let loss = augmented_loss(lm, lt, delta);
        let within = (lm - lt).abs() <= c;
        let ok = loss <= c * c + 1e-9 && (delta > 0.0) != within && (delta == 0.0 || (loss - c * c).abs() <= 1e-9);
        if delta > 0.0 {
            active += 1;
        }
        if !ok {
            bad += 1;
        }
    }
    Ok((
        bad == 0,
        format!("{trials} trials, {active} with positive flow, {bad} violations"),
    ))
}

/// A tabular model balanced for the tree with one leaf at `eps`, scored
/// under the promoted reward: every nonzero FM, DB, TB and SubTB loss is
/// `(ln eps)^2` and every other one vanishes.
pub fn one_more_mode_losses(branching: usize, depth: usize, eps: f64) -> Result<(bool, String)> {
    let (prev, new) = one_more_mode_tree(branching, depth, eps)?;
    let model = balanced_tabular_model(&prev, DEFAULT_STATE_CAP)?;
    let expected = eps.ln().powi(2);
    let mut losses: Vec<(&str, f64)> = Vec::new();
    let trajectories = enumerate_trajectories(&model, &new, DEFAULT_TRAJECTORY_CAP)?;
    for t in &trajectories {
        losses.push(("tb", tb_loss(t, model.log_z())?));
        let n = subtb_nodes(&new, t);
        for i in 0..n {
            for j in i + 1..n {
                losses.push(("subtb", subtb_loss(&model, &new, t, i, j)?));
            }
        }
    }
    let s0 = new.initial_state();
    for s in (0..new.num_states()).map(StateId).filter(|&s| s != new.sink()) {
        for child in new.children(s) {
            losses.push(("db", db_loss(&model, &new, s, child)?));
        }
        if s != s0 {
            losses.push(("fm", fm_loss(&model, &new, s)?));
        }
    }
    let mut worst_hit: f64 = 0.0;
    let mut worst_zero: f64 = 0.0;
    let mut hits = BTreeMap::new();
    for (kind, l) in &losses {
        if *l > 1e-6 {
            worst_hit = worst_hit.max((l - expected).abs());
            *hits.entry(*kind).or_insert(0) += 1;
        } else {
            worst_zero = worst_zero.max(*l);
        }
    }
    let all_kinds = ["tb", "db", "fm", "subtb"].iter().all(|k| hits.contains_key(k));
    let passed = worst_hit <= 1e-8 && worst_zero < 1e-10 && all_kinds;
    Ok((
        passed,
        format!(
            "{} losses, nonzero per kind {hits:?} at {expected:.6} (worst deviation {worst_hit:.2e}), largest other {worst_zero:.2e}",
            losses.len()
        ),
    ))
}

/// The one-more-mode closed form against enumerated TV over a grid.
pub fn one_more_mode_closed_form() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for g in [2, 3] {
        for h in [1, 2, 3] {
            for eps in [1e-3, 1e-2, 0.1, 0.5] {
                let (prev, new) = one_more_mode_tree(g, h, eps)?;
                let p = target_distribution(&prev, DEFAULT_STATE_CAP)?;
                let q = target_distribution(&new, DEFAULT_STATE_CAP)?;
                let enumerated = 0.5 * total_l1(&p, &q);
                worst = worst.max((one_more_mode_tv(g, h, eps)? - enumerated).abs());
                count += 1;
            }
        }
    }
    Ok((
        worst <= 1e-12,
        format!("{count} grid points, worst |closed - enumerated| = {worst:.2e}"),
    ))
}

fn small_envs() -> Result<Vec<Box<dyn DagEnv>>> {
    Ok(vec![
        Box::new(RegularTree::new(2, 3)?),
        Box::new(RegularTree::new(3, 2)?),
        Box::new(RegularTree::with_rewards(2, 2, vec![0.1, 1.0, 2.0, 0.5])?),
        Box::new(Hypergrid::standard(2, 3)?),
        Box::new(Hypergrid::new(2, 4, 0.1, 0.5, 2.0)?),
    ])
}

/// Deterministic loss-to-TV bound over random tabular policies.
pub fn tv_sound(policies: usize, seed: u64) -> Result<(bool, String)> {
    let envs = small_envs()?;
    let mut r = rng::stream(seed, "verify/tv_sound");
    let mut violations = 0;
    let mut informative = 0;
    let mut tightest: f64 = f64::INFINITY;
    for k in 0..policies {
        let env = envs[k % envs.len()].as_ref();
        let sigma = log_uniform(&mut r, 1e-3, 2.0);
        let model = perturbed_model(env, sigma, &mut r)?;
        let trajectories = enumerate_trajectories(&model, env, DEFAULT_TRAJECTORY_CAP)?;
        let max_loss = trajectories
            .iter()
            .map(|t| tb_loss(t, model.log_z()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let bound = tv_bound_from_loss(max_loss.sqrt(), LossScope::Trajectory)?;
        let tv = exact_tv(&model, env, DEFAULT_STATE_CAP)?;
        if tv > bound.value + 1e-12 {
            violations += 1;
        }
        if bound.value < 1.0 {
            informative += 1;
            tightest = tightest.min(bound.value - tv);
        }
    }
    Ok((
        violations == 0,
        format!(
            "{policies} policies, {informative} with bound < 1, {violations} violations, smallest slack {tightest:.3e}"
        ),
    ))
}

fn records(trajectories: &[Trajectory], log_z: f64) -> Vec<SampleRecord> {
    trajectories
        .iter()
        .map(|t| SampleRecord::from_trajectory(t, log_z))
        .collect()
}

/// Sampling certificates over fresh sample sets: how often the bound falls
/// below the exact TV, against `2 alpha` plus a 99% binomial allowance.
/// Also checks that the reference-flow bound with `M = 0` is the plain one.
pub fn pac_coverage(trials: usize, alpha: f64, seed: u64) -> Result<(bool, String)> {
    let envs = small_envs()?;
    let targets = envs
        .iter()
        .map(|e| TargetSampler::new(e.as_ref(), DEFAULT_STATE_CAP))
        .collect::<Result<Vec<_>>>()?;
    let mut r = rng::stream(seed, "verify/pac");
    let (mut miss_plain, mut miss_ref, mut reduction_bad, mut informative) = (0usize, 0usize, 0usize, 0usize);
    for k in 0..trials {
        let i = k % envs.len();
        let env = envs[i].as_ref();
        let sigma = log_uniform(&mut r, 1e-3, 0.5);
        let model = perturbed_model(env, sigma, &mut r)?;
        let m = [20, 50, 100, 200][k % 4];
        let n = [200, 100, 50, 20][(k / 4) % 4];
        let back = sample_target_trajectories(&model, env, &targets[i], m, &mut r)?;
        let mut sampler = PolicySampler::new(&model, env);
        let fwd = (0..n)
            .map(|_| sampler.sample_forward(&mut r, 0.0))
            .collect::<Result<Vec<_>>>()?;
        let (b, f) = (records(&back, model.log_z()), records(&fwd, model.log_z()));
        let tv = exact_tv(&model, env, DEFAULT_STATE_CAP)?;

        let c = b.iter().chain(&f).map(|s| s.log_ratio().abs()).fold(0.0, f64::max);
        let plain = pac_tv_bound(c, m, n, alpha)?;
        let reduced = pac_tv_bound_with_reference(c, 0.0, m, n, alpha)?;
        if reduced.bound() != Some(plain) {
            reduction_bad += 1;
        }
        if plain.value < tv {
            miss_plain += 1;
        }
        if plain.value < 1.0 {
            informative += 1;
        }
        let opt = optimize_certificate(&b, &f, alpha)?;
        if opt.bound.is_some_and(|v| v < tv) {
            miss_ref += 1;
        }
    }
    let p = 2.0 * alpha;
    let limit = p + Z99 * (p * (1.0 - p) / trials as f64).sqrt();
    let (fp, fr) = (miss_plain as f64 / trials as f64, miss_ref as f64 / trials as f64);
    let passed = fp <= limit && fr <= limit && reduction_bad == 0;
    Ok((
        passed,
        format!(
            "{trials} trials ({informative} informative): violation rate {fp:.4} plain, {fr:.4} optimized reference (limit {limit:.4}); M=0 reduction mismatches {reduction_bad}"
        ),
    ))
}

/// The reference-flow main term is nondecreasing in `M` at fixed `c` and
/// in `c` at fixed `M`, on a `points x points` grid inside the feasible
/// region. `main_term` is injectable so a broken formula can be shown to
/// fail.
pub fn monotone<F: Fn(f64, f64) -> Option<f64>>(points: usize, main_term: F) -> (bool, String) {
    let (c_lo, c_hi) = (1e-3, 1.0);
    let m_hi = 0.99 * reference_m_limit(c_hi);
    let cs: Vec<f64> = (0..points)
        .map(|i| c_lo + (c_hi - c_lo) * i as f64 / (points - 1) as f64)
        .collect();
    let ms: Vec<f64> = (0..points).map(|j| m_hi * j as f64 / (points - 1) as f64).collect();
    let mut grid = vec![vec![f64::NAN; points]; points];
    let mut undefined = 0;
    for (i, &c) in cs.iter().enumerate() {
        for (j, &m) in ms.iter().enumerate() {
            match main_term(c, m) {
                Some(v) => grid[i][j] = v,
                None => undefined += 1,
            }
        }
    }
    let mut breaks = 0;
    for i in 0..points {
        for j in 0..points {
            if j + 1 < points && grid[i][j + 1] < grid[i][j] {
                breaks += 1;
            }
            if i + 1 < points && grid[i + 1][j] < grid[i][j] {
                breaks += 1;
            }
        }
    }
    (
        breaks == 0 && undefined == 0,
        format!("{points}x{points} grid over c in [{c_lo}, {c_hi}], M in [0, {m_hi:.4}]: {breaks} order breaks, {undefined} undefined"),
    )
}

/// Incremental-reward sandwich on random trees, plus the loss supremum
/// against the largest enumerated loss of the previously balanced model.
pub fn sandwich(instances: usize, seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream(seed, "verify/sandwich");
    let (mut bad_order, mut worst_exact, mut worst_sup) = (0, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let g = r.random_range(2..=3);
        let h = r.random_range(1..=3);
        let leaves = (g as usize).pow(h as u32);
        let old: Vec<f64> = (0..leaves).map(|_| r.random_range(0.01..2.0)).collect();
        let prev = RegularTree::with_rewards(g, h, old.clone())?;
        let mut x_sub = BTreeSet::new();
        while x_sub.is_empty() {
            for i in 0..leaves {
                if r.random_bool(0.4) {
                    x_sub.insert(prev.leaf(i));
                }
            }
        }
        let mut added = BTreeMap::new();
        let mut new_rewards = old.clone();
        for (i, reward) in new_rewards.iter_mut().enumerate() {
            let s = prev.leaf(i);
            if x_sub.contains(&s) && r.random_bool(0.6) {
                let extra = r.random_range(0.0..3.0);
                added.insert(s, extra);
                *reward += extra;
            }
        }
        let new = RegularTree::with_rewards(g, h, new_rewards)?;
        let rewards = enumerate_terminating(&prev, DEFAULT_STATE_CAP)?;
        let sw = incremental_tv_sandwich(&rewards, &added, &x_sub)?;
        let exact = 0.5
            * total_l1(
                &target_distribution(&prev, DEFAULT_STATE_CAP)?,
                &target_distribution(&new, DEFAULT_STATE_CAP)?,
            );
        if sw.lower > exact + 1e-12 || exact > sw.upper + 1e-12 {
            bad_order += 1;
        }
        worst_exact = worst_exact.max((sw.exact.unwrap_or(f64::NAN) - exact).abs());

        let model = balanced_tabular_model(&prev, DEFAULT_STATE_CAP)?;
        let max_loss = enumerate_trajectories(&model, &new, DEFAULT_TRAJECTORY_CAP)?
            .iter()
            .map(|t| tb_loss(t, model.log_z()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        worst_sup = worst_sup.max((loss_supremum(&rewards, &added, &x_sub)? - max_loss).abs());
    }
    let passed = bad_order == 0 && worst_exact <= 1e-12 && worst_sup <= 1e-8;
    Ok((
        passed,
        format!(
            "{instances} instances: {bad_order} sandwich violations, exact-TV mismatch {worst_exact:.2e}, supremum mismatch {worst_sup:.2e}"
        ),
    ))
}

/// Monte Carlo estimate of `Delta / Z*` from target samples against the
/// exact sum over every trajectory.
pub fn mc_estimator(samples: usize, seed: u64) -> Result<(bool, String)> {
    let env = RegularTree::new(3, 3)?;
    let mut r = rng::stream(seed, "verify/mc");
    let model = perturbed_model(&env, 0.3, &mut r)?;
    let all = enumerate_trajectories(&model, &env, DEFAULT_TRAJECTORY_CAP)?;
    let log_z = model.log_z();
    let mut ratios: Vec<f64> = all
        .iter()
        .map(|t| (t.log_model_flow(log_z) - t.log_target_flow()).abs())
        .collect();
    ratios.sort_by(f64::total_cmp);
    let c = ratios[ratios.len() / 2];
    let z_star: f64 = enumerate_terminating(&env, DEFAULT_STATE_CAP)?
        .iter()
        .map(|t| t.1)
        .sum();
    let exact: f64 = all
        .iter()
        .map(|t| reference_flow_delta(t.log_model_flow(log_z), t.log_target_flow(), c))
        .sum::<f64>()
        / z_star;
    let target = TargetSampler::new(&env, DEFAULT_STATE_CAP)?;
    let drawn = sample_target_trajectories(&model, &env, &target, samples, &mut r)?;
    let per: Vec<f64> = drawn
        .iter()
        .map(|t| delta_over_target(t.log_model_flow(log_z) - t.log_target_flow(), c))
        .collect();
    let est = mc_delta_over_zstar(&per)?;
    let rel = (est.mean - exact).abs() / exact;
    Ok((
        exact > 0.0 && rel < 0.05,
        format!(
            "c = {c:.4}: exact {exact:.6}, estimate {:.6} +- {:.6} from {samples} samples, relative error {rel:.4}",
            est.mean, est.std_error
        ),
    ))
}

fn smooth_mlp_instance(env: &dyn DagEnv, seed: u64) -> Result<(PolicyModel, Vec<Trajectory>)> {
    for k in 0..100u64 {
        let mut r = rng::worker_stream(seed, "verify/gradcheck", k);
        let spec = ModelSpec::Mlp { hidden: vec![8] };
        let mut model = PolicyModel::new(env, spec, BackwardKind::Learned, 1.0, &mut r)?;
        model.set_log_z(r.random_range(-1.0..1.0));
        let mut sampler = PolicySampler::new(&model, env);
        let batch = (0..6)
            .map(|_| sampler.sample_forward(&mut r, 0.2))
            .collect::<Result<Vec<_>>>()?;
        let states: Vec<StateId> = batch
            .iter()
            .flat_map(|t| t.states.iter().copied())
            .filter(|&s| s != env.sink())
            .flat_map(|s| std::iter::once(s).chain(env.parents(s)))
            .collect();
        if model.kink_margin(env, &states)? > 1e-3 {
            return Ok((model, batch));
        }
    }
    Err(invalid("no instance away from activation kinks"))
}

/// Analytic gradients of every objective and of the augmented loss through
/// small MLPs against five-point central differences.
pub fn gradcheck(instances: usize, seed: u64) -> Result<(bool, String)> {
    let env = Hypergrid::standard(2, 3)?;
    let counts = reachable_terminal_counts(&env, DEFAULT_STATE_CAP)?;
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for k in 0..instances as u64 {
        let (model, batch) = smooth_mlp_instance(&env, seed.wrapping_mul(1000).wrapping_add(k))?;
        let plain = batch_loss(&model, &env, &batch, &LossOptions::new(Objective::Tb))?;
        let capped = LossOptions::new(Objective::Tb).with_reference(0.5 * plain.max.sqrt());
        let deltas = batch_loss(&model, &env, &batch, &capped)?.deltas;
        let mut cases: Vec<LossOptions<'_>> = Objective::ALL
            .iter()
            .map(|&o| LossOptions::new(o).with_reachable(&counts))
            .collect();
        cases.push(LossOptions::new(Objective::Tb).with_fixed_deltas(&deltas));
        let params = model.params().values().to_vec();
        let mut r = rng::worker_stream(seed, "verify/gradcheck/indices", k);
        let indices = sample_indices(&mut r, params.len(), 40);
        for opts in &cases {
            let mut probe = model.clone();
            let mut failure = None;
            let err = grad_check(
                |p| {
                    let run = probe
                        .params_mut()
                        .assign(p)
                        .and_then(|_| batch_loss_and_grad(&probe, &env, &batch, opts));
                    match run {
                        Ok((rep, g)) => (rep.mean, g),
                        Err(e) => {
                            failure = Some(e);
                            (f64::NAN, vec![f64::NAN; p.len()])
                        }
                    }
                },
                &params,
                &indices,
                1e-4,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            checks += 1;
        }
    }
    Ok((
        worst < 1e-4,
        format!("{checks} checks (5 objectives + augmented, {instances} instances): worst relative error {worst:.2e}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suites_pass() {
        for (name, (passed, detail)) in [
            ("ref_cap", ref_cap(2000, 1).unwrap()),
            ("one_more_mode_tv", one_more_mode_closed_form().unwrap()),
            ("one_more_mode_losses", one_more_mode_losses(2, 2, 1e-2).unwrap()),
            ("tv_sound", tv_sound(20, 1).unwrap()),
            ("pac_coverage", pac_coverage(40, 0.05, 1).unwrap()),
            ("monotone", monotone(20, reference_main_term)),
            ("sandwich", sandwich(10, 1).unwrap()),
            ("mc_estimator", mc_estimator(4000, 1).unwrap()),
            ("gradcheck", gradcheck(2, 1).unwrap()),
        ] {
            assert!(passed, "{name}: {detail}");
        }
    }

    #[test]
    fn sign_flip_breaks_monotonicity() {
        let flipped_denominator = |c: f64, m: f64| {
            let up = c.exp_m1();
            let down = -(-c).exp_m1();
            Some((c.exp() + up * m) / ((-c).exp() + down * m) - 1.0)
        };
        assert!(!monotone(50, flipped_denominator).0);
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run_suite("nope", 0).is_err());
        assert_eq!(run_all(Some("one_more_mode_tv"), 0).unwrap().len(), 1);
    }
}
