//! Central finite-difference utilities for verifying hand-derived backward
//! passes. Probes run at double precision with h = 1e-6 by default; at that
//! step the numeric noise floor is around 1e-7 for O(1) losses, so
//! comparisons forgive absolute gaps below that even when the relative gap
//! is large (true-zero gradients drown in FD noise otherwise).

/// Default probe step for f64 central differences.
pub const FD_STEP: f64 = 1e-6;

/// Relative tolerance used by module gradient checks.
pub const FD_REL_TOL: f64 = 1e-4;

/// Absolute gap below which two gradients are considered equal regardless
/// of relative error. Matches the central-difference noise floor at FD_STEP.
pub const FD_ABS_FLOOR: f64 = 1e-7;

/// Central-difference estimate of d(loss)/d(slot). The slot accessor must
/// return the same scalar each call; the model is restored before returning.
pub fn numeric_grad<M>(
    model: &mut M,
    slot: impl Fn(&mut M) -> &mut f64,
    loss: impl Fn(&M) -> f64,
    h: f64,
) -> f64 {
    let orig = *slot(model);
    *slot(model) = orig + h;
    let lp = loss(model);
    *slot(model) = orig - h;
    let lm = loss(model);
    *slot(model) = orig;
    (lp - lm) / (2.0 * h)
}

/// Relative gap |a - n| / max(|a|, |n|), with 0/0 defined as 0.
pub fn rel_gap(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// True when the analytic and numeric gradients agree within tolerance.
pub fn grads_match(analytic: f64, numeric: f64, rel_tol: f64, abs_floor: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs_floor || diff <= rel_tol * analytic.abs().max(numeric.abs())
}

/// Panics with a labelled report if the pair disagrees.
pub fn assert_close(label: &str, analytic: f64, numeric: f64) {
    assert!(
        grads_match(analytic, numeric, FD_REL_TOL, FD_ABS_FLOOR),
        "{label}: analytic {analytic} vs numeric {numeric} (rel gap {})",
        rel_gap(analytic, numeric)
    );
}
