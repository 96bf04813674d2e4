//! Sample-based certificates and the one-dimensional search over `c`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{check_alpha, pac_tv_bound_with_reference, ReferenceOutcome};
use crate::envs::StateId;
use crate::error::{invalid, GfnError, Result};
use crate::losses::delta_over_target;
use crate::policy::Trajectory;

pub const PRESCAN_POINTS: usize = 32;
pub const GOLDEN_TOL: f64 = 1e-8;
pub const GOLDEN_MAX_ITER: usize = 200;

/// Model and target flow of one sampled trajectory, in log space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub terminal: StateId,
    /// `log(Z P_F(tau))`
    pub log_model_flow: f64,
    /// `log(R(x) P_B(tau|x))`
    pub log_target_flow: f64,
}

impl SampleRecord {
    pub fn from_trajectory(traj: &Trajectory, log_z: f64) -> Self {
        Self {
            terminal: traj.terminal(),
            log_model_flow: traj.log_model_flow(log_z),
            log_target_flow: traj.log_target_flow(),
        }
    }

    pub fn log_ratio(&self) -> f64 {
        self.log_model_flow - self.log_target_flow
    }

    /// `delta(tau) / (R(x) P_B(tau|x))` at threshold `c`.
    pub fn delta_over_target(&self, c: f64) -> f64 {
        delta_over_target(self.log_ratio(), c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CSelection {
    Fixed(f64),
    Optimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    Subgraph,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    /// Sampling certificate with a reference flow.
    PacReference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateStatus {
    Certified,
    ConditionViolated,
    /// No forward sample landed in the subgraph; `n = 0` and no bound.
    NoForwardSamples,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub c: f64,
    /// Unclamped bound at `c`; `+inf` (serialized as null) when the
    /// reference condition fails.
    pub objective: f64,
}

/// How much of the model's total flow the subgraph's reward accounts for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapturedMass {
    pub subgraph_reward: f64,
    pub z_estimate: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub kind: CertificateKind,
    pub scope: Scope,
    pub status: CertificateStatus,
    pub bound: Option<f64>,
    pub raw_bound: Option<f64>,
    /// Bound without the sampling terms.
    pub main_term: Option<f64>,
    pub c: Option<f64>,
    pub big_m: Option<f64>,
    pub m: usize,
    pub n: usize,
    pub alpha: f64,
    pub confidence: f64,
    pub c_interval: Option<[f64; 2]>,
    pub trace: Vec<TracePoint>,
    pub captured: Option<CapturedMass>,
    pub wall_clock_secs: f64,
}

impl CertificateReport {
    pub fn certified(&self) -> bool {
        self.status == CertificateStatus::Certified
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct Objective<'a> {
    samples: Vec<&'a SampleRecord>,
    m: usize,
    n: usize,
    alpha: f64,
}

impl Objective<'_> {
    fn big_m(&self, c: f64) -> f64 {
        self.samples.iter().map(|s| s.delta_over_target(c)).fold(0.0, f64::max)
    }

    fn outcome(&self, c: f64) -> Result<(f64, ReferenceOutcome)> {
        let big_m = self.big_m(c);
        Ok((
            big_m,
            pac_tv_bound_with_reference(c, big_m, self.m, self.n, self.alpha)?,
        ))
    }

    fn value(&self, c: f64) -> f64 {
        match self.outcome(c) {
            Ok((_, ReferenceOutcome::Bound { bound, .. })) => bound.raw,
            _ => f64::INFINITY,
        }
    }
}

/// `[c_lo, c_hi]`: `c_hi` is the largest `|log ratio|` (where no reference
/// flow is needed at all); `c_lo` is the largest `log(r - 1)` over samples
/// whose flow ratio `r >= 1` (taken in whichever direction) exceeds 2,
/// floored at 0.
pub fn c_interval(samples: &[SampleRecord]) -> (f64, f64) {
    let mut hi: f64 = 0.0;
    let mut lo: f64 = 0.0;
    for s in samples {
        let x = s.log_ratio().abs();
        hi = hi.max(x);
        if x > std::f64::consts::LN_2 {
            // log(e^x - 1)
            lo = lo.max(x + (-(-x).exp_m1()).ln());
        }
    }
    (lo, hi)
}

fn golden_section<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut iter = 0;
    while b - a > GOLDEN_TOL && iter < GOLDEN_MAX_ITER {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
        iter += 1;
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

fn search(obj: &Objective<'_>, lo: f64, hi: f64, trace: &mut Vec<TracePoint>) -> f64 {
    let eval = |c: f64, trace: &mut Vec<TracePoint>| {
        let v = obj.value(c);
        trace.push(TracePoint { c, objective: v });
        v
    };
    if lo >= hi {
        eval(hi, trace);
        return hi;
    }
    let step = (hi - lo) / (PRESCAN_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..PRESCAN_POINTS)
        .map(|k| {
            if k + 1 == PRESCAN_POINTS {
                hi
            } else {
                lo + step * k as f64
            }
        })
        .collect();
    let values: Vec<f64> = grid.iter().map(|&c| eval(c, trace)).collect();
    let (k, &best) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty grid");
    let a = grid[k.saturating_sub(1)];
    let b = grid[(k + 1).min(PRESCAN_POINTS - 1)];
    let (c, v) = golden_section(|c| eval(c, trace), a, b);
    if v <= best {
        c
    } else {
        grid[k]
    }
}

/// Reference-flow sampling certificate from `m` backward samples (target
/// side) and `n` forward samples (model side). With
/// [`CSelection::Optimize`] the threshold minimizing the bound is searched
/// by a coarse scan followed by golden-section refinement.
pub fn certify_samples(
    backward: &[SampleRecord],
    forward: &[SampleRecord],
    alpha: f64,
    selection: CSelection,
    scope: Scope,
) -> Result<CertificateReport> {
    let start = Instant::now();
    check_alpha(alpha)?;
    if backward.is_empty() || forward.is_empty() {
        return Err(GfnError::Empty("certification sample set"));
    }
    for s in backward.iter().chain(forward) {
        if !s.log_ratio().is_finite() {
            return Err(GfnError::NonFinite("sample log-ratio"));
        }
    }
    let obj = Objective {
        samples: backward.iter().chain(forward).collect(),
        m: backward.len(),
        n: forward.len(),
        alpha,
    };
    let mut trace = Vec::new();
    let (c, interval) = match selection {
        CSelection::Fixed(c) => {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(invalid("threshold c must be finite and nonnegative"));
            }
            (c, None)
        }
        CSelection::Optimize => {
            let all: Vec<SampleRecord> = obj.samples.iter().map(|s| **s).collect();
            let (lo, hi) = c_interval(&all);
            (search(&obj, lo, hi, &mut trace), Some([lo, hi]))
        }
    };
    let (big_m, outcome) = obj.outcome(c)?;
    let (status, bound, raw, main) = match outcome {
        ReferenceOutcome::Bound { main_term, bound } => (
            CertificateStatus::Certified,
            Some(bound.value),
            Some(bound.raw),
            Some(main_term),
        ),
        ReferenceOutcome::ConditionViolated { .. } => (CertificateStatus::ConditionViolated, None, None, None),
    };
    Ok(CertificateReport {
        kind: CertificateKind::PacReference,
        scope,
        status,
        bound,
        raw_bound: raw,
        main_term: main,
        c: Some(c),
        big_m: Some(big_m),
        m: obj.m,
        n: obj.n,
        alpha,
        confidence: 1.0 - 2.0 * alpha,
        c_interval: interval,
        trace,
        captured: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Global certificate at the optimized threshold.
pub fn optimize_certificate(
    backward: &[SampleRecord],
    forward: &[SampleRecord],
    alpha: f64,
) -> Result<CertificateReport> {
    certify_samples(backward, forward, alpha, CSelection::Optimize, Scope::Global)
}

/// Certificate over the terminating states accepted by `in_subgraph`.
/// Backward samples must come from the reward restricted to the subgraph;
/// forward samples outside it are dropped. `mass`, when given, is
/// `(sum of rewards over the subgraph, log Z)` for the captured-mass
/// diagnostic.
pub fn subgraph_certificate<F: Fn(StateId) -> bool>(
    in_subgraph: F,
    backward: &[SampleRecord],
    forward: &[SampleRecord],
    alpha: f64,
    selection: CSelection,
    mass: Option<(f64, f64)>,
) -> Result<CertificateReport> {
    check_alpha(alpha)?;
    let back: Vec<SampleRecord> = backward.iter().copied().filter(|s| in_subgraph(s.terminal)).collect();
    let fwd: Vec<SampleRecord> = forward.iter().copied().filter(|s| in_subgraph(s.terminal)).collect();
    if back.is_empty() {
        return Err(GfnError::Empty("backward samples in the subgraph"));
    }
    let captured = mass.map(|(subgraph_reward, log_z)| {
        let z = log_z.exp();
        CapturedMass {
            subgraph_reward,
            z_estimate: z,
            ratio: subgraph_reward / z,
        }
    });
    if fwd.is_empty() {
        return Ok(CertificateReport {
            kind: CertificateKind::PacReference,
            scope: Scope::Subgraph,
            status: CertificateStatus::NoForwardSamples,
            bound: None,
            raw_bound: None,
            main_term: None,
            c: None,
            big_m: None,
            m: back.len(),
            n: 0,
            alpha,
            confidence: 1.0 - 2.0 * alpha,
            c_interval: None,
            trace: Vec::new(),
            captured,
            wall_clock_secs: 0.0,
        });
    }
    let mut report = certify_samples(&back, &fwd, alpha, selection, Scope::Subgraph)?;
    report.captured = captured;
    Ok(report)
}

/// Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

/// Estimates `Delta / Z*` as the mean of `delta(tau) / (R(x) P_B(tau|x))`
/// over trajectories drawn from the target.
pub fn mc_delta_over_zstar(ratios: &[f64]) -> Result<McEstimate> {
    if ratios.is_empty() {
        return Err(GfnError::Empty("reference-flow samples"));
    }
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let std_error = if ratios.len() > 1 {
        let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_error,
        count: ratios.len(),
    })
}
