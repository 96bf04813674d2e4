//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL ...` line before asserting, so
//! `cargo test -p stable-gfn --test acceptance -- --nocapture` gives the
//! full report even when something fails.
//!
//! Tests share a lock: runtime limits are part of the criteria and would be
//! meaningless if the tests competed for the same cores.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use stable_gfn::certify::reference_main_term;
use stable_gfn::config::ExperimentConfig;
use stable_gfn::metrics::{read_csv, write_csv};
use stable_gfn::oracle::{exact_tv, total_mode_regions};
use stable_gfn::trainer::Trainer;
use stable_gfn::verify;

static SERIAL: Mutex<()> = Mutex::new(());

const SEED: u64 = 0;

fn report(n: u32, limit: Duration, run: impl FnOnce() -> (bool, String)) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (ok, detail) = run();
    let took = start.elapsed();
    let in_time = took <= limit;
    let verdict = if ok && in_time { "PASS" } else { "FAIL" };
    println!(
        "criterion {n}: {verdict} [{:.1}s of {}s] {detail}",
        took.as_secs_f64(),
        limit.as_secs()
    );
    assert!(ok, "criterion {n}: {detail}");
    assert!(in_time, "criterion {n} took {took:?}, limit {limit:?}");
}

fn suite(name: &str) -> (bool, String) {
    let r = verify::run_suite(name, SEED).unwrap();
    (r.passed, format!("{name}: {}", r.detail))
}

#[test]
fn criterion_01_reference_cap() {
    report(1, Duration::from_secs(5), || suite("ref_cap"));
}

#[test]
fn criterion_02_one_more_mode_losses() {
    report(2, Duration::from_secs(30), || suite("one_more_mode_losses"));
}

#[test]
fn criterion_03_one_more_mode_closed_form() {
    report(3, Duration::from_secs(5), || suite("one_more_mode_tv"));
}

#[test]
fn criterion_04_deterministic_bound_soundness() {
    report(4, Duration::from_secs(120), || suite("tv_sound"));
}

#[test]
fn criterion_05_sampling_certificate_coverage() {
    report(5, Duration::from_secs(300), || {
        let (cov, a) = suite("pac_coverage");
        let (mono, b) = suite("monotone");
        (cov && mono, format!("{a}; {b}"))
    });
}

#[test]
fn criterion_05_monotonicity_check_has_teeth() {
    let broken = |c: f64, m: f64| reference_main_term(c, m).map(|v| -v);
    assert!(!verify::monotone(50, broken).0);
}

#[test]
fn criterion_06_incremental_sandwich() {
    report(6, Duration::from_secs(60), || suite("sandwich"));
}

#[test]
fn criterion_07_monte_carlo_estimator() {
    report(7, Duration::from_secs(30), || suite("mc_estimator"));
}

#[test]
fn criterion_08_gradients() {
    report(8, Duration::from_secs(60), || suite("gradcheck"));
}

const TREE: &str = r#"
seed = 0
[environment]
kind = "tree"
branching = 3
depth = 3
[model]
kind = "tabular"
[train]
stabilized = true
tv_target = 0.01
confidence = 0.95
backward_source = "exact"
max_rounds = 5000
[evaluation]
every = 0
"#;

#[test]
fn criterion_09_tree_exits_early() {
    report(9, Duration::from_secs(120), || {
        let cfg = ExperimentConfig::parse(TREE).unwrap();
        let env = cfg.environment.build().unwrap();
        let model = cfg.build_model(env.as_ref()).unwrap();
        let mut t = Trainer::new(
            env.as_ref(),
            model,
            cfg.train.clone(),
            cfg.evaluation.monitor(),
            cfg.seed,
        )
        .unwrap();
        let s = t.run().unwrap();
        let bound = s.final_certificate.as_ref().and_then(|c| c.report.bound);
        let tv = exact_tv(t.model(), env.as_ref(), 1_000_000).unwrap();
        let ok = s.exited_early && bound.is_some_and(|b| b <= 0.01) && tv <= 0.01 && s.rounds <= 5000;
        (
            ok,
            format!(
                "exited early {} after {} rounds ({} skipped), certified bound {bound:?}, exact TV {tv:.2e}",
                s.exited_early, s.rounds, s.skipped_rounds
            ),
        )
    });
}

fn hypergrid(stabilized: bool) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 0
[environment]
kind = "hypergrid"
dim = 2
side = 8
r0 = 0.1
r1 = 0.5
r2 = 2.0
[model]
kind = "mlp"
hidden = [256, 256]
[train]
objective = "tb"
stabilized = {stabilized}
learning_rate = 1e-4
backward_source = "exact"
max_rounds = 5000
[evaluation]
every = 0
"#
    );
    ExperimentConfig::parse(&text).unwrap()
}

#[test]
fn criterion_10_hypergrid() {
    report(10, Duration::from_secs(600), || {
        let dir = tempfile::tempdir().unwrap();

        let cfg = hypergrid(true);
        let env = cfg.environment.build().unwrap();
        let model = cfg.build_model(env.as_ref()).unwrap();
        let mut stable = Trainer::new(
            env.as_ref(),
            model,
            cfg.train.clone(),
            cfg.evaluation.monitor(),
            cfg.seed,
        )
        .unwrap();
        let s = stable.run().unwrap();
        let tv = s.final_exact_tv.unwrap_or(f64::INFINITY);
        let regions = stable.state().mode_regions.len();
        let all_regions = total_mode_regions(env.as_ref());

        let cfg = hypergrid(false);
        let model = cfg.build_model(env.as_ref()).unwrap();
        let mut plain = Trainer::new(
            env.as_ref(),
            model,
            cfg.train.clone(),
            cfg.evaluation.monitor(),
            cfg.seed,
        )
        .unwrap();
        plain.run().unwrap();
        let path = dir.path().join("metrics.csv");
        write_csv(std::fs::File::create(&path).unwrap(), &plain.state().metrics).unwrap();
        let rows = read_csv(std::fs::File::open(&path).unwrap()).unwrap();
        let mut ratios: Vec<f64> = rows.iter().map(|r| r.max_to_rest).filter(|x| x.is_finite()).collect();
        ratios.sort_by(f64::total_cmp);
        let median = ratios[ratios.len() / 2];
        let peak = ratios[ratios.len() - 1];

        let ok = tv <= 0.05 && regions == all_regions && all_regions == 4 && peak >= 10.0 * median;
        (
            ok,
            format!(
                "stable: exact TV {tv:.2e}, mode regions {regions}/{all_regions}; plain TB metrics.csv ({} rows): max-to-rest peak {peak:.2} vs median {median:.3} ({:.1}x)",
                rows.len(),
                peak / median
            ),
        )
    });
}

#[test]
#[ignore = "long run: Hypergrid D=4, H=16, 30k rounds"]
fn criterion_11_long_run_hypergrid() {
    let text = r#"
seed = 0
[environment]
kind = "hypergrid"
dim = 4
side = 16
[model]
kind = "mlp"
hidden = [256, 256]
[train]
batch_size = 32
max_rounds = 30000
[evaluation]
every = 1000
monitor_samples = 100000
"#;
    report(11, Duration::from_secs(86_400), || {
        let cfg = ExperimentConfig::parse(text).unwrap();
        let env = cfg.environment.build().unwrap();
        let model = cfg.build_model(env.as_ref()).unwrap();
        let mut t = Trainer::new(
            env.as_ref(),
            model,
            cfg.train.clone(),
            cfg.evaluation.monitor(),
            cfg.seed,
        )
        .unwrap();
        t.run().unwrap();
        let l1 = t.state().metrics.last().and_then(|r| r.total_l1).unwrap_or(f64::NAN);
        (
            (l1 - 0.276).abs() <= 0.05,
            format!("empirical total L1 {l1:.4} vs 0.276"),
        )
    });
}
