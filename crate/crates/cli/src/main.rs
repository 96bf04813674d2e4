use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use stable_gfn::certify::{alpha_from_confidence, check_alpha, optimize_certificate, SampleRecord};
use stable_gfn::config::ExperimentConfig;
use stable_gfn::envs::DEFAULT_STATE_CAP;
use stable_gfn::metrics::write_csv;
use stable_gfn::oracle::{evaluate_model, sample_target_trajectories, TargetSampler};
use stable_gfn::policy::{Checkpoint, PolicySampler};
use stable_gfn::trainer::{TrainSummary, Trainer};
use stable_gfn::{rng, verify, DagEnv};

#[derive(Parser)]
#[command(
    name = "stable-gfn",
    version,
    about = "GFlowNet training with total-variation certificates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from an experiment config and write metrics, checkpoint and certificate.
    Train {
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long, env = "STABLE_GFN_OUT")]
        out: Option<PathBuf>,
    },
    /// Sampling certificate for a checkpoint, at the threshold minimizing the bound.
    Certify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Backward (target-side) samples.
        #[arg(short, long, default_value_t = 1000)]
        m: usize,
        /// Forward (model-side) samples.
        #[arg(short, long, default_value_t = 1000)]
        n: usize,
        /// Per-side failure probability; defaults to the config's confidence.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, env = "STABLE_GFN_OUT")]
        out: Option<PathBuf>,
    },
    /// Exact TV, empirical total L1 and mode counts for a checkpoint.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Samples drawn; defaults to `evaluation.samples`.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, env = "STABLE_GFN_OUT")]
        out: Option<PathBuf>,
    },
    /// Run the property suites.
    Verify {
        /// Run one suite only.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Bad input: exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    Usage(e.to_string()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Train { config, out } => train(&config, out),
        Command::Certify {
            config,
            checkpoint,
            m,
            n,
            alpha,
            out,
        } => certify(&config, &checkpoint, m, n, alpha, out),
        Command::Evaluate {
            config,
            checkpoint,
            samples,
            out,
        } => evaluate(&config, &checkpoint, samples, out),
        Command::Verify { suite, seed } => run_verify(suite.as_deref(), seed),
    }
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn output_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dir = flag
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_model(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
) -> anyhow::Result<(std::sync::Arc<dyn DagEnv>, stable_gfn::policy::PolicyModel)> {
    let env = cfg.environment.build().map_err(usage)?;
    let ck = Checkpoint::load(checkpoint).map_err(|e| usage(format!("{}: {e}", checkpoint.display())))?;
    let model = ck.restore(env.as_ref()).map_err(usage)?;
    Ok((env, model))
}

fn train(path: &Path, out: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let cfg = load_config(path)?;
    let resolved = cfg.resolved().map_err(usage)?;
    let env = resolved.environment.build().map_err(usage)?;
    let dir = output_dir(out, &resolved)?;
    fs::write(dir.join("resolved_config.json"), resolved.to_json()? + "\n")?;

    let model = resolved.build_model(env.as_ref()).map_err(usage)?;
    let mut trainer = Trainer::new(
        env.as_ref(),
        model,
        resolved.train.clone(),
        resolved.evaluation.monitor(),
        resolved.seed,
    )
    .map_err(usage)?;
    let result = trainer.run();
    // metrics are written even when training stops on an error
    write_csv(fs::File::create(dir.join("metrics.csv"))?, &trainer.state().metrics)?;
    let summary: TrainSummary = result?;
    Checkpoint::capture(trainer.model(), env.as_ref(), Some(trainer.optimizer()), summary.rounds)
        .save(&dir.join("checkpoint.json"))?;
    write_json(&dir.join("certificate.json"), &summary.final_certificate)?;
    write_json(&dir.join("summary.json"), &summary)?;

    let bound = summary.final_certificate.as_ref().and_then(|c| c.report.bound);
    println!(
        "{} rounds ({} skipped), early exit: {}, certified bound: {}, exact TV: {}",
        summary.rounds,
        summary.skipped_rounds,
        summary.exited_early,
        bound.map_or("none".to_string(), |b| format!("{b:.6}")),
        summary.final_exact_tv.map_or("n/a".to_string(), |t| format!("{t:.6}")),
    );
    println!("outputs in {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn certify(
    config: &Path,
    checkpoint: &Path,
    m: usize,
    n: usize,
    alpha: Option<f64>,
    out: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    if m == 0 || n == 0 {
        bail!(Usage("m and n must be positive".into()));
    }
    let cfg = load_config(config)?;
    let alpha = match alpha {
        Some(a) => check_alpha(a).map(|_| a),
        None => alpha_from_confidence(cfg.train.confidence),
    }
    .map_err(usage)?;
    let (env, model) = load_model(&cfg, checkpoint)?;
    let env = env.as_ref();
    let target = TargetSampler::new(env, DEFAULT_STATE_CAP)
        .map_err(|e| usage(format!("backward samples need an enumerable environment: {e}")))?;

    let mut rb = rng::stream(cfg.seed, "certify/backward");
    let mut rf = rng::stream(cfg.seed, "certify/forward");
    let backward = sample_target_trajectories(&model, env, &target, m, &mut rb)?;
    let mut sampler = PolicySampler::new(&model, env);
    let forward = (0..n)
        .map(|_| sampler.sample_forward(&mut rf, 0.0))
        .collect::<stable_gfn::Result<Vec<_>>>()?;
    let log_z = model.log_z();
    let records = |ts: &[stable_gfn::policy::Trajectory]| -> Vec<SampleRecord> {
        ts.iter().map(|t| SampleRecord::from_trajectory(t, log_z)).collect()
    };
    let report = optimize_certificate(&records(&backward), &records(&forward), alpha)?;

    let dir = output_dir(out, &cfg)?;
    fs::write(dir.join("certificate.json"), report.to_json()? + "\n")?;
    match report.bound {
        Some(b) => println!(
            "TV <= {b:.6} with confidence {:.4} (c = {:.6}, m = {m}, n = {n})",
            report.confidence,
            report.c.unwrap_or(f64::NAN)
        ),
        None => println!("no bound: reference condition violated at every threshold"),
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(
    config: &Path,
    checkpoint: &Path,
    samples: Option<usize>,
    out: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let cfg = load_config(config)?;
    let (env, model) = load_model(&cfg, checkpoint)?;
    let ev = &cfg.evaluation;
    let cap = if ev.oracle { DEFAULT_STATE_CAP } else { 0 };
    let report = evaluate_model(
        &model,
        env.as_ref(),
        samples.unwrap_or(ev.samples),
        cfg.seed,
        ev.workers.max(1),
        cap,
    )?;
    let dir = output_dir(out, &cfg)?;
    write_json(&dir.join("eval.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn run_verify(only: Option<&str>, seed: u64) -> anyhow::Result<ExitCode> {
    if let Some(name) = only.filter(|n| !verify::SUITES.contains(n)) {
        bail!(Usage(format!(
            "unknown suite {name:?}; known: {}",
            verify::SUITES.join(", ")
        )));
    }
    let results = verify::run_all(only, seed)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<20} {}  [{:.2}s] {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.secs,
            r.detail
        );
        failed += usize::from(!r.passed);
    }
    println!("{} of {} suites passed", results.len() - failed, results.len());
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
