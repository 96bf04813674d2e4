//! Round-based training: the stabilized trainer with an adaptive
//! reference-flow threshold, a top-K buffer of high-reward states,
//! patience-gated subgraph certificates and skip-to-accumulate rounds, and
//! plain trainers for every objective.

mod buffer;
#[cfg(test)]
mod tests;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::approximator::{clip_grad_norm, Adam, AdamConfig, DEFAULT_CLIP_NORM};
use crate::certify::{
    alpha_from_confidence, reference_main_term, subgraph_certificate, CSelection, CertificateReport, SampleRecord,
};
use crate::envs::{reachable_terminal_counts, DagEnv, ReachableCounts, StateId, DEFAULT_STATE_CAP};
use crate::error::{invalid, GfnError, Result};
use crate::losses::{batch_loss, batch_loss_and_grad, LossBatchReport, LossOptions, Objective, DEFAULT_SUBTB_LAMBDA};
use crate::metrics::MetricsRow;
use crate::oracle::{empirical_total_l1, target_distribution, TargetSampler};
use crate::policy::{
    exact_terminal_distribution, sample_terminals_parallel, PolicyModel, PolicySampler, Trajectory,
    DEFAULT_LOG_Z_LR_MULTIPLIER,
};
use crate::rng;

pub use buffer::{ReplayBuffer, TopKBuffer};

/// How per-trajectory `sqrt(L_TB)` values are reduced in the threshold update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
    Median,
}

impl Aggregation {
    fn apply(self, mut xs: Vec<f64>) -> f64 {
        match self {
            Aggregation::Max => xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Mean => xs.iter().sum::<f64>() / xs.len() as f64,
            Aggregation::Median => {
                xs.sort_by(f64::total_cmp);
                let n = xs.len();
                if n % 2 == 1 {
                    xs[n / 2]
                } else {
                    0.5 * (xs[n / 2 - 1] + xs[n / 2])
                }
            }
        }
    }
}

/// Where the backward half of a stabilized batch draws terminating states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackwardSource {
    /// `x` proportional to reward over the top-K buffer.
    #[default]
    Buffer,
    /// `x` from the exact target over every terminating state.
    Exact,
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Run the stabilized trainer (trajectory balance only).
    pub stabilized: bool,
    /// TV target `d`.
    pub tv_target: f64,
    /// `1 - 2 alpha`.
    pub confidence: f64,
    /// Rounds with an unchanged buffer before a certificate is computed.
    pub patience: usize,
    pub buffer_size: usize,
    pub batch_size: usize,
    /// Forward share of a stabilized batch; the rest is backward-sampled.
    pub forward_batch: Option<usize>,
    /// EMA coefficient of the threshold update.
    pub ema_beta: f64,
    pub threshold_aggregation: Aggregation,
    /// `c_0`; defaults to the first batch's largest `sqrt(L_TB)`.
    pub initial_threshold: Option<f64>,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub log_z_lr_multiplier: f64,
    pub clip_norm: f64,
    pub subtb_lambda: f64,
    pub replay_capacity: usize,
    /// Replayed trajectories added to each plain batch; 0 disables replay.
    pub replay_batch: usize,
    pub backward_source: BackwardSource,
    /// Whether backward samples enter the gradient. Defaults to `true` for
    /// the exact source and `false` (certification only) for the buffer.
    pub backward_in_gradient: Option<bool>,
    pub max_rounds: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Tb,
            stabilized: true,
            tv_target: 0.01,
            confidence: 0.95,
            patience: 10,
            buffer_size: 10_000,
            batch_size: 32,
            forward_batch: None,
            ema_beta: 0.05,
            threshold_aggregation: Aggregation::Max,
            initial_threshold: None,
            epsilon: 0.05,
            learning_rate: 1e-3,
            log_z_lr_multiplier: DEFAULT_LOG_Z_LR_MULTIPLIER,
            clip_norm: DEFAULT_CLIP_NORM,
            subtb_lambda: DEFAULT_SUBTB_LAMBDA,
            replay_capacity: 1000,
            replay_batch: 0,
            backward_source: BackwardSource::Buffer,
            backward_in_gradient: None,
            max_rounds: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GfnError::Config(m.to_string()));
        if !(self.tv_target > 0.0 && self.tv_target < 1.0) {
            return bad("tv_target must lie in (0, 1)");
        }
        alpha_from_confidence(self.confidence).map_err(|e| GfnError::Config(e.to_string()))?;
        if !(self.ema_beta > 0.0 && self.ema_beta <= 1.0) {
            return bad("ema_beta must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.forward_batch.is_some_and(|f| f == 0 || f > self.batch_size) {
            return bad("forward_batch must lie in [1, batch_size]");
        }
        if self.patience == 0 || self.buffer_size == 0 {
            return bad("patience and buffer_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.log_z_lr_multiplier > 0.0) || !(self.clip_norm > 0.0) {
            return bad("learning rates and clip norm must be positive");
        }
        if !(self.subtb_lambda > 0.0) {
            return bad("subtb_lambda must be positive");
        }
        if self.replay_batch > 0 && self.replay_capacity == 0 {
            return bad("replay needs a positive replay_capacity");
        }
        if self.initial_threshold.is_some_and(|c| !(c >= 0.0 && c.is_finite())) {
            return bad("initial_threshold must be finite and nonnegative");
        }
        if self.stabilized && self.objective != Objective::Tb {
            return bad("the stabilized trainer uses trajectory balance");
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        (1.0 - self.confidence) / 2.0
    }

    /// `(forward, backward)` sizes of a stabilized batch.
    pub fn batch_split(&self) -> (usize, usize) {
        let f = self.forward_batch.unwrap_or(self.batch_size.div_ceil(2));
        (f, self.batch_size - f)
    }

    pub fn backward_contributes(&self) -> bool {
        self.backward_in_gradient
            .unwrap_or(self.backward_source == BackwardSource::Exact)
    }
}

/// In-training oracle metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    /// Compute the exact TV on enumerable environments.
    pub oracle: bool,
    /// Rounds between oracle evaluations; 0 evaluates only the last round.
    pub every: u64,
    /// Samples of the empirical total-L1 estimate; 0 skips it.
    pub samples: usize,
    pub workers: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            oracle: false,
            every: 100,
            samples: 0,
            workers: 1,
        }
    }
}

/// `c_{t+1} = (1 - beta) c_t + beta * agg_tau sqrt(L_TB(tau))`.
pub fn update_threshold(c: f64, tb_losses: &[f64], beta: f64, aggregation: Aggregation) -> Result<f64> {
    if tb_losses.is_empty() {
        return Err(GfnError::Empty("threshold batch"));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(invalid("beta must lie in (0, 1]"));
    }
    let roots: Vec<f64> = tb_losses.iter().map(|l| l.max(0.0).sqrt()).collect();
    Ok((1.0 - beta) * c + beta * aggregation.apply(roots))
}

/// Log-ratio records collected since the last gradient step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CertificationPool {
    pub backward: Vec<SampleRecord>,
    /// Forward records with whether they were drawn on-policy (no
    /// exploration), which the certificate requires.
    pub forward: Vec<(SampleRecord, bool)>,
}

impl CertificationPool {
    pub fn clear(&mut self) {
        self.backward.clear();
        self.forward.clear();
    }
}

/// A certificate computed during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateEvent {
    pub round: u64,
    /// Main term over every pooled sample, exploratory ones included.
    pub probe_main_term: Option<f64>,
    pub report: CertificateReport,
}

/// Mutable state of the training loop.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub round: u64,
    pub threshold: Option<f64>,
    pub patience: usize,
    pub buffer: TopKBuffer,
    pub pool: CertificationPool,
    pub certificates: Vec<CertificateEvent>,
    /// Skip-test value of the latest certificate since the last gradient step.
    pub last_main_term: Option<f64>,
    pub done: bool,
    pub skipped_rounds: u64,
    pub forward_only_rounds: Vec<u64>,
    pub mode_regions: BTreeSet<usize>,
    pub metrics: Vec<MetricsRow>,
}

impl TrainState {
    pub fn new(buffer_size: usize) -> Result<Self> {
        Ok(Self {
            round: 0,
            threshold: None,
            patience: 0,
            buffer: TopKBuffer::new(buffer_size)?,
            pool: CertificationPool::default(),
            certificates: Vec::new(),
            last_main_term: None,
            done: false,
            skipped_rounds: 0,
            forward_only_rounds: Vec::new(),
            mode_regions: BTreeSet::new(),
            metrics: Vec::new(),
        })
    }

    pub fn last_certificate(&self) -> Option<&CertificateEvent> {
        self.certificates.last()
    }
}

/// What one round did.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub report: LossBatchReport,
    /// Threshold in force during the round.
    pub threshold: Option<f64>,
    pub skipped: bool,
    pub forward_only: bool,
    pub certificate: Option<CertificateEvent>,
    pub exited: bool,
    pub grad_norm: Option<f64>,
}

/// Summary of a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub rounds: u64,
    pub exited_early: bool,
    pub skipped_rounds: u64,
    pub forward_only_rounds: Vec<u64>,
    pub final_threshold: Option<f64>,
    pub final_certificate: Option<CertificateEvent>,
    pub final_exact_tv: Option<f64>,
}

/// Owns the model, optimizer and loop state for one run.
pub struct Trainer<'e> {
    env: &'e dyn DagEnv,
    config: TrainConfig,
    monitor: MonitorConfig,
    seed: u64,
    model: PolicyModel,
    optimizer: Adam,
    state: TrainState,
    replay: Option<ReplayBuffer>,
    target: Option<TargetSampler>,
    reachable: Option<ReachableCounts>,
    rng_forward: rng::Rng,
    rng_backward: rng::Rng,
    rng_replay: rng::Rng,
}

impl<'e> Trainer<'e> {
    pub fn new(
        env: &'e dyn DagEnv,
        model: PolicyModel,
        config: TrainConfig,
        monitor: MonitorConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if !model.fits(env) {
            return Err(invalid(format!("model does not fit environment {}", env.describe())));
        }
        let adam = AdamConfig::with_lr(config.learning_rate);
        let optimizer = Adam::new(adam, model.params().len());
        let needs_target = config.stabilized && config.backward_source == BackwardSource::Exact;
        let target = if needs_target {
            Some(TargetSampler::new(env, DEFAULT_STATE_CAP)?)
        } else {
            None
        };
        let reachable = if !config.stabilized && config.objective == Objective::Wdb {
            Some(reachable_terminal_counts(env, DEFAULT_STATE_CAP)?)
        } else {
            None
        };
        let replay = if !config.stabilized && config.replay_batch > 0 {
            Some(ReplayBuffer::new(config.replay_capacity)?)
        } else {
            None
        };
        Ok(Self {
            env,
            state: TrainState::new(config.buffer_size)?,
            monitor,
            seed,
            model,
            optimizer,
            replay,
            target,
            reachable,
            rng_forward: rng::stream(seed, "train/forward"),
            rng_backward: rng::stream(seed, "train/backward"),
            rng_replay: rng::stream(seed, "train/replay"),
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &PolicyModel {
        &self.model
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_parts(self) -> (PolicyModel, Adam, TrainState) {
        (self.model, self.optimizer, self.state)
    }

    /// Runs rounds until `max_rounds` or an early certificate exit.
    pub fn run(&mut self) -> Result<TrainSummary> {
        while !self.state.done && self.state.round < self.config.max_rounds {
            self.step()?;
        }
        let final_exact_tv = self.state.metrics.iter().rev().find_map(|r| r.exact_tv);
        Ok(TrainSummary {
            rounds: self.state.round,
            exited_early: self.state.done,
            skipped_rounds: self.state.skipped_rounds,
            forward_only_rounds: self.state.forward_only_rounds.clone(),
            final_threshold: self.state.threshold,
            final_certificate: self.state.last_certificate().cloned(),
            final_exact_tv,
        })
    }

    /// One round of the configured trainer plus its metrics row.
    pub fn step(&mut self) -> Result<RoundOutcome> {
        let outcome = if self.config.stabilized {
            self.stable_train_round()?
        } else {
            self.baseline_train_round()?
        };
        let row = self.metrics_row(&outcome)?;
        self.state.metrics.push(row);
        self.state.round += 1;
        if outcome.exited {
            self.state.done = true;
        }
        Ok(outcome)
    }

    /// `nf` forward and `nb` backward trajectories under the current
    /// parameters. When a batch could visit every state anyway, all states
    /// are evaluated up front in one pass.
    fn sample_batch(&mut self, nf: usize, epsilon: f64, nb: usize) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
        let env = self.env;
        let mut sampler = PolicySampler::new(&self.model, env);
        let n = env.num_states();
        if n <= self.config.batch_size * env.max_trajectory_len() {
            let states: Vec<StateId> = (0..n).map(StateId).filter(|&s| s != env.sink()).collect();
            sampler.prefetch(&states)?;
        }
        let forward = (0..nf)
            .map(|_| sampler.sample_forward(&mut self.rng_forward, epsilon))
            .collect::<Result<Vec<_>>>()?;
        let mut backward = Vec::with_capacity(nb);
        for _ in 0..nb {
            let x = match &self.target {
                Some(t) => t.sample(&mut self.rng_backward),
                None => self.state.buffer.sample(&mut self.rng_backward)?,
            };
            backward.push(sampler.sample_backward(x, &mut self.rng_backward)?);
        }
        Ok((forward, backward))
    }

    /// Merges every terminating state on the trajectories into the buffer
    /// and advances or resets the patience counter.
    fn merge_buffer(&mut self, trajectories: &[Trajectory]) -> Result<bool> {
        let sink = self.env.sink();
        let mut changed = false;
        for traj in trajectories {
            for &s in &traj.states {
                if s == sink || !self.env.is_terminating(s) {
                    continue;
                }
                changed |= self.state.buffer.insert(s, self.env.reward(s))?;
                if let Some(region) = self.env.mode_region(s) {
                    self.state.mode_regions.insert(region);
                }
            }
        }
        if changed {
            self.state.patience = 0;
        } else {
            self.state.patience += 1;
        }
        Ok(changed)
    }

    fn gradient_step(
        &mut self,
        trajectories: &[Trajectory],
        options: &LossOptions<'_>,
    ) -> Result<(LossBatchReport, f64)> {
        let (report, mut grad) = batch_loss_and_grad(&self.model, self.env, trajectories, options)?;
        let norm = clip_grad_norm(&mut grad, self.config.clip_norm)?;
        self.optimizer.apply(self.model.params_mut(), &grad)?;
        Ok((report, norm))
    }

    /// One round of the stabilized trainer.
    ///
    /// Exploration is switched off while the skip rule is in force so that
    /// accumulated forward samples are draws from the forward policy.
    pub fn stable_train_round(&mut self) -> Result<RoundOutcome> {
        let d = self.config.tv_target;
        let alpha = self.config.alpha();
        let (nf, nb) = self.config.batch_split();
        let accumulating = self.state.last_main_term.is_some_and(|m| m < d);
        let epsilon = if accumulating { 0.0 } else { self.config.epsilon };

        let forward_only = self.target.is_none() && self.state.buffer.is_empty() && nb > 0;
        if forward_only {
            self.state.forward_only_rounds.push(self.state.round);
        }
        let (forward, backward) = self.sample_batch(nf, epsilon, if forward_only { 0 } else { nb })?;

        let log_z = self.model.log_z();
        let c = match self.state.threshold {
            Some(c) => c,
            None => {
                let c0 = match self.config.initial_threshold {
                    Some(c0) => c0,
                    None => forward
                        .iter()
                        .chain(&backward)
                        .map(|t| t.log_model_flow(log_z) - t.log_target_flow())
                        .fold(0.0, |m, r| f64::max(m, r.abs())),
                };
                self.state.threshold = Some(c0);
                c0
            }
        };

        let on_policy = epsilon == 0.0;
        self.state
            .pool
            .backward
            .extend(backward.iter().map(|t| SampleRecord::from_trajectory(t, log_z)));
        self.state.pool.forward.extend(
            forward
                .iter()
                .map(|t| (SampleRecord::from_trajectory(t, log_z), on_policy)),
        );

        let all: Vec<Trajectory> = forward.iter().chain(&backward).cloned().collect();
        let changed = self.merge_buffer(&all)?;
        if changed && self.config.backward_source == BackwardSource::Buffer {
            // drawn from the previous buffer's reward restriction
            self.state.pool.backward.clear();
        }

        let mut certificate = None;
        let mut exited = false;
        if self.state.patience >= self.config.patience {
            self.state.patience = 0;
            if let Some(event) = self.certify(c, alpha, log_z)? {
                self.state.last_main_term = Some(event.probe_main_term.unwrap_or(f64::INFINITY));
                exited = event.report.bound.is_some_and(|b| b <= d);
                certificate = Some(event);
            }
        }
        if let Some(ev) = &certificate {
            self.state.certificates.push(ev.clone());
        }

        let items: Vec<Trajectory> = if self.config.backward_contributes() {
            all
        } else {
            forward
        };
        let options = LossOptions::new(Objective::Tb).with_reference(c);
        let skipped = exited || self.state.last_main_term.is_some_and(|m| m < d);
        let (report, grad_norm) = if skipped {
            self.state.skipped_rounds += 1;
            (batch_loss(&self.model, self.env, &items, &options)?, None)
        } else {
            let (report, norm) = self.gradient_step(&items, &options)?;
            let next = update_threshold(
                c,
                &report.tb_losses(),
                self.config.ema_beta,
                self.config.threshold_aggregation,
            )?;
            self.state.threshold = Some(next);
            self.state.pool.clear();
            self.state.last_main_term = None;
            (report, Some(norm))
        };
        Ok(RoundOutcome {
            report,
            threshold: Some(c),
            skipped,
            forward_only,
            certificate,
            exited,
            grad_norm,
        })
    }

    fn certify(&self, c: f64, alpha: f64, log_z: f64) -> Result<Option<CertificateEvent>> {
        let buffer = &self.state.buffer;
        let pool = &self.state.pool;
        let in_buffer = |s: StateId| buffer.contains(s);
        if !pool.backward.iter().any(|r| in_buffer(r.terminal)) {
            return Ok(None);
        }
        let big_m = pool
            .backward
            .iter()
            .chain(pool.forward.iter().map(|f| &f.0))
            .filter(|r| in_buffer(r.terminal))
            .map(|r| r.delta_over_target(c))
            .fold(0.0, f64::max);
        let probe = reference_main_term(c, big_m);
        let on_policy: Vec<SampleRecord> = pool.forward.iter().filter(|f| f.1).map(|f| f.0).collect();
        let report = subgraph_certificate(
            in_buffer,
            &pool.backward,
            &on_policy,
            alpha,
            CSelection::Fixed(c),
            Some((buffer.total_reward(), log_z)),
        )?;
        Ok(Some(CertificateEvent {
            round: self.state.round,
            probe_main_term: probe,
            report,
        }))
    }

    /// One round of a plain trainer: forward samples (plus replay), one
    /// clipped step on the configured objective.
    pub fn baseline_train_round(&mut self) -> Result<RoundOutcome> {
        let (mut batch, _) = self.sample_batch(self.config.batch_size, self.config.epsilon, 0)?;
        self.merge_buffer(&batch)?;
        if let Some(replay) = &mut self.replay {
            let replayed = if replay.is_empty() {
                Vec::new()
            } else {
                replay.sample(self.config.replay_batch, &mut self.rng_replay)?
            };
            for t in &batch {
                replay.insert(t.clone());
            }
            batch.extend(replayed);
        }
        let mut options = LossOptions::new(self.config.objective).with_lambda(self.config.subtb_lambda);
        if let Some(counts) = &self.reachable {
            options = options.with_reachable(counts);
        }
        let (report, norm) = {
            let (report, mut grad) = batch_loss_and_grad(&self.model, self.env, &batch, &options)?;
            let norm = clip_grad_norm(&mut grad, self.config.clip_norm)?;
            self.optimizer.apply(self.model.params_mut(), &grad)?;
            (report, norm)
        };
        Ok(RoundOutcome {
            report,
            threshold: None,
            skipped: false,
            forward_only: false,
            certificate: None,
            exited: false,
            grad_norm: Some(norm),
        })
    }

    fn metrics_row(&self, outcome: &RoundOutcome) -> Result<MetricsRow> {
        let round = self.state.round;
        let last = outcome.exited || round + 1 >= self.config.max_rounds;
        let due = self.monitor.every > 0 && round % self.monitor.every == 0;
        let (exact_tv, total_l1) = if self.monitor.oracle && (due || last) {
            let target = target_distribution(self.env, DEFAULT_STATE_CAP)?;
            let p = exact_terminal_distribution(&self.model, self.env, DEFAULT_STATE_CAP)?;
            let tv = 0.5 * crate::oracle::total_l1(&p, &target);
            let l1 = if self.monitor.samples > 0 {
                let label = format!("monitor/{round}");
                let drawn = sample_terminals_parallel(
                    &self.model,
                    self.env,
                    self.monitor.samples,
                    self.seed,
                    &label,
                    self.monitor.workers,
                )?;
                Some(empirical_total_l1(&drawn, &target)?)
            } else {
                None
            };
            (Some(tv), l1)
        } else {
            (None, None)
        };
        let cert = outcome.certificate.as_ref();
        Ok(MetricsRow {
            round,
            objective: outcome.report.objective,
            mean_loss: outcome.report.mean,
            max_loss: outcome.report.max,
            max_to_rest: outcome.report.max_to_rest,
            c_t: outcome.threshold,
            buffer_size: self.state.buffer.len(),
            buffer_min_reward: self.state.buffer.min_reward(),
            certificate_bound: cert.and_then(|e| e.report.bound),
            certificate_main_term: cert.and_then(|e| e.probe_main_term),
            skipped: outcome.skipped,
            forward_only: outcome.forward_only,
            exact_tv,
            total_l1,
            modes: self.state.mode_regions.len(),
            mean_delta: outcome.report.mean_delta(),
            active_delta_fraction: outcome.report.active_delta_fraction(),
            log_z: self.model.log_z(),
        })
    }
}
