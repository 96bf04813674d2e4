//! Reference flow: the smallest nonnegative mass `delta` that, added to both
//! the model flow `Z P_F(tau)` and the target flow `R(x) P_B(tau|x)`, caps
//! the squared log-ratio at `c^2`. Everything here takes flows in the log
//! domain.

use crate::error::{GfnError, Result};

/// `log(exp(a) + exp(b))` without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Natural log of the minimal reference flow; `-inf` when no flow is needed
/// and `+inf` when `c = 0` and the flows disagree.
pub fn log_reference_flow_delta(log_model_flow: f64, log_target_flow: f64, c: f64) -> f64 {
    let rho = log_model_flow - log_target_flow;
    if rho > c {
        if c == 0.0 {
            return f64::INFINITY;
        }
        log_model_flow + (-(c - rho).exp_m1()).ln() - c.exp_m1().ln()
    } else if rho < -c {
        if c == 0.0 {
            return f64::INFINITY;
        }
        log_target_flow + (-(c + rho).exp_m1()).ln() - c.exp_m1().ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Minimal `delta >= 0` with `(log((ZP_F + delta)/(R P_B + delta)))^2 <= c^2`.
pub fn reference_flow_delta(log_model_flow: f64, log_target_flow: f64, c: f64) -> f64 {
    log_reference_flow_delta(log_model_flow, log_target_flow, c).exp()
}

/// `delta / (R(x) P_B(tau|x))` as a function of the log-ratio alone.
pub fn delta_over_target(log_ratio: f64, c: f64) -> f64 {
    if log_ratio > c {
        if c == 0.0 {
            return f64::INFINITY;
        }
        // (e^rho - e^c) / (e^c - 1)
        log_ratio.exp() * (-(c - log_ratio).exp_m1()) / c.exp_m1()
    } else if log_ratio < -c {
        if c == 0.0 {
            return f64::INFINITY;
        }
        // (1 - e^(c + rho)) / (e^c - 1)
        -(c + log_ratio).exp_m1() / c.exp_m1()
    } else {
        0.0
    }
}

/// Log-ratio of the augmented flows.
pub fn augmented_log_ratio(log_model_flow: f64, log_target_flow: f64, delta: f64) -> f64 {
    if delta == f64::INFINITY {
        return 0.0;
    }
    let ld = delta.ln();
    log_add_exp(log_model_flow, ld) - log_add_exp(log_target_flow, ld)
}

/// `(log((Z P_F + delta) / (R P_B + delta)))^2`.
pub fn augmented_loss(log_model_flow: f64, log_target_flow: f64, delta: f64) -> f64 {
    augmented_log_ratio(log_model_flow, log_target_flow, delta).powi(2)
}

/// Reduction factor `gamma` with `L_aug = L_TB / gamma^2`.
pub fn reduction_factor_gamma(log_model_flow: f64, log_target_flow: f64, delta: f64) -> Result<f64> {
    let tb = (log_model_flow - log_target_flow).powi(2);
    if tb == 0.0 {
        return Err(GfnError::Undefined(
            "reduction factor of a zero trajectory-balance loss",
        ));
    }
    if delta.is_nan() || delta < 0.0 {
        return Err(crate::error::invalid("reference flow must be nonnegative"));
    }
    let aug = augmented_loss(log_model_flow, log_target_flow, delta);
    Ok((tb / aug).sqrt())
}
