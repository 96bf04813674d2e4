//! Total-variation certificates: deterministic loss-to-TV bounds, sampling
//! (PAC) certificates with and without a reference flow, the fidelity
//! trade-off bound, and bounds for incremental reward changes.
//!
//! Every bound is clamped to `[0, 1]`; the unclamped value is kept beside it.
//! Logarithms are natural.

mod incremental;
mod optimize;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use incremental::{
    contrast_summary, incremental_tv_sandwich, loss_supremum, one_more_mode_tv, ContrastSummary, Sandwich,
    SubsetContrast,
};
pub use optimize::{
    certify_samples, mc_delta_over_zstar, optimize_certificate, subgraph_certificate, CSelection, CapturedMass,
    CertificateKind, CertificateReport, CertificateStatus, McEstimate, SampleRecord, Scope, TracePoint,
    GOLDEN_MAX_ITER, GOLDEN_TOL, PRESCAN_POINTS,
};

/// A bound and its value before clamping to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub value: f64,
    pub raw: f64,
}

impl Bound {
    pub fn clamped(raw: f64) -> Self {
        Self {
            value: raw.clamp(0.0, 1.0),
            raw,
        }
    }
}

/// Which losses the deterministic bound assumes are at most `c^2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossScope {
    /// Every complete trajectory.
    Trajectory,
    /// Every transition, on trajectories of at most `max_len` edges.
    Transition { max_len: usize },
}

fn check_c(c: f64) -> Result<()> {
    if c >= 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("threshold c must be finite and nonnegative, got {c}")))
    }
}

/// `alpha` must lie in `(0, 1/2)`; the overall confidence is `1 - 2 alpha`.
pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 0.5 {
        Ok(())
    } else {
        Err(invalid(format!("alpha must lie in (0, 0.5), got {alpha}")))
    }
}

/// `alpha` for an overall confidence `1 - 2 alpha`.
pub fn alpha_from_confidence(confidence: f64) -> Result<f64> {
    let alpha = (1.0 - confidence) / 2.0;
    check_alpha(alpha)?;
    Ok(alpha)
}

/// `ln(1/alpha)/m + ln(1/alpha)/n`.
pub fn sampling_term(alpha: f64, m: usize, n: usize) -> Result<f64> {
    check_alpha(alpha)?;
    if m == 0 || n == 0 {
        return Err(invalid("sample counts m and n must be at least 1"));
    }
    let l = (1.0 / alpha).ln();
    Ok(l / m as f64 + l / n as f64)
}

/// TV bound when every loss in `scope` is at most `c^2`.
pub fn tv_bound_from_loss(c: f64, scope: LossScope) -> Result<Bound> {
    check_c(c)?;
    let raw = match scope {
        LossScope::Trajectory => -(-2.0 * c).exp_m1(),
        LossScope::Transition { max_len } => {
            if max_len == 0 {
                return Err(invalid("transition scope needs a maximum trajectory length"));
            }
            -(-2.0 * max_len as f64 * c).exp_m1()
        }
    };
    Ok(Bound::clamped(raw))
}

/// `e^{2c} - 1 + ln(1/alpha)/m + ln(1/alpha)/n` with confidence `1 - 2 alpha`,
/// valid when every sampled trajectory loss is at most `c^2`.
pub fn pac_tv_bound(c: f64, m: usize, n: usize, alpha: f64) -> Result<Bound> {
    check_c(c)?;
    Ok(Bound::clamped((2.0 * c).exp_m1() + sampling_term(alpha, m, n)?))
}

/// Largest `M` the reference-flow bound tolerates at threshold `c`.
pub fn reference_m_limit(c: f64) -> f64 {
    1.0 / c.exp_m1()
}

/// `(e^c + (e^c - 1) M) / (e^{-c} - (1 - e^{-c}) M) - 1`, or `None` when
/// `M >= 1/(e^c - 1)`.
pub fn reference_main_term(c: f64, big_m: f64) -> Option<f64> {
    if big_m == 0.0 {
        return Some((2.0 * c).exp_m1());
    }
    if !(big_m >= 0.0) || big_m >= reference_m_limit(c) {
        return None;
    }
    let up = c.exp_m1();
    let down = -(-c).exp_m1();
    let num = c.exp() + up * big_m;
    let den = (-c).exp() - down * big_m;
    if den <= 0.0 {
        return None;
    }
    Some(num / den - 1.0)
}

/// Outcome of the reference-flow sampling certificate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum ReferenceOutcome {
    Bound {
        main_term: f64,
        bound: Bound,
    },
    /// `M` reached `1/(e^c - 1)`; no bound is available.
    ConditionViolated {
        big_m: f64,
        limit: f64,
    },
}

impl ReferenceOutcome {
    pub fn bound(&self) -> Option<Bound> {
        match self {
            ReferenceOutcome::Bound { bound, .. } => Some(*bound),
            ReferenceOutcome::ConditionViolated { .. } => None,
        }
    }

    pub fn main_term(&self) -> Option<f64> {
        match self {
            ReferenceOutcome::Bound { main_term, .. } => Some(*main_term),
            ReferenceOutcome::ConditionViolated { .. } => None,
        }
    }
}

/// Sampling certificate under a reference flow at threshold `c`, where
/// `big_m` is the largest sampled `delta(tau) / (R(x) P_B(tau|x))`.
pub fn pac_tv_bound_with_reference(c: f64, big_m: f64, m: usize, n: usize, alpha: f64) -> Result<ReferenceOutcome> {
    check_c(c)?;
    let sampling = sampling_term(alpha, m, n)?;
    Ok(match reference_main_term(c, big_m) {
        Some(main_term) => ReferenceOutcome::Bound {
            main_term,
            bound: Bound::clamped(main_term + sampling),
        },
        None => ReferenceOutcome::ConditionViolated {
            big_m,
            limit: reference_m_limit(c),
        },
    })
}

/// `(1 - e^{-2c}) (1 + Delta/Z*)` for total reference flow `Delta`.
pub fn fidelity_tradeoff_bound(c: f64, delta_over_zstar: f64) -> Result<Bound> {
    check_c(c)?;
    if !(delta_over_zstar >= 0.0) {
        return Err(invalid("Delta/Z* must be nonnegative"));
    }
    Ok(Bound::clamped(-(-2.0 * c).exp_m1() * (1.0 + delta_over_zstar)))
}
