//! Delta-method scaling: divide the estimated effect on a remotely sensed
//! quantity by the Engel slope to express it in currency units, with relative
//! variances adding in quadrature.

use super::effects::EffectEstimate;
use super::engel::EngelFit;
use super::{EconError, CRITICAL_95};

/// A treatment effect re-expressed in currency units.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledEffect {
    pub tau_w: f64,
    pub se_tau_w: f64,
    pub ci95: (f64, f64),
    pub tau_q: f64,
    pub se_tau_q: f64,
    pub beta: f64,
    pub se_beta: f64,
}

/// tau_W = tau_Q / beta; (se_W / tau_W)^2 = (se_Q / tau_Q)^2 + (se_b / b)^2.
///
/// When tau_Q is exactly zero the relative form degenerates; the limit
/// se_W = se_Q / |beta| is reported with tau_W = 0.
pub fn scale_effect(effect: &EffectEstimate, engel: &EngelFit) -> Result<ScaledEffect, EconError> {
    if engel.beta == 0.0 {
        return Err(EconError::ZeroEngelSlope);
    }
    let tau_q = effect.coefficient;
    let beta = engel.beta;
    let tau_w = tau_q / beta;
    let se_tau_w = if tau_q == 0.0 {
        effect.se / beta.abs()
    } else {
        let rel2 = (effect.se / tau_q).powi(2) + (engel.se_beta / beta).powi(2);
        tau_w.abs() * rel2.sqrt()
    };
    Ok(ScaledEffect {
        tau_w,
        se_tau_w,
        ci95: (tau_w - CRITICAL_95 * se_tau_w, tau_w + CRITICAL_95 * se_tau_w),
        tau_q,
        se_tau_q: effect.se,
        beta,
        se_beta: engel.se_beta,
    })
}

/// Verify a scaled effect is internally consistent: the error-propagation
/// identity holds among its stored inputs and the interval matches the
/// normal critical value. Used to audit emitted tables.
pub fn check_scale_consistency(s: &ScaledEffect, tol: f64) -> bool {
    if s.beta == 0.0 {
        return false;
    }
    let tau_w_ok = (s.tau_w - s.tau_q / s.beta).abs() <= tol * s.tau_w.abs().max(1.0);
    let se_expect = if s.tau_q == 0.0 {
        s.se_tau_q / s.beta.abs()
    } else {
        (s.tau_q / s.beta).abs()
            * ((s.se_tau_q / s.tau_q).powi(2) + (s.se_beta / s.beta).powi(2)).sqrt()
    };
    let se_ok = (s.se_tau_w - se_expect).abs() <= tol * se_expect.max(1e-300);
    let ci_ok = (s.ci95.0 - (s.tau_w - CRITICAL_95 * s.se_tau_w)).abs()
        <= tol * s.se_tau_w.max(1e-300)
        && (s.ci95.1 - (s.tau_w + CRITICAL_95 * s.se_tau_w)).abs() <= tol * s.se_tau_w.max(1e-300);
    tau_w_ok && se_ok && ci_ok
}

/// Back out the Engel slope's relative standard error implied by a reported
/// (effect, scaled effect) pair, reading standard errors off the 95% interval
/// widths at the normal critical value.
pub fn implied_engel_relative_se(
    tau_q: f64,
    ci_q: (f64, f64),
    tau_w: f64,
    ci_w: (f64, f64),
) -> f64 {
    let se_q = (ci_q.1 - ci_q.0) / (2.0 * CRITICAL_95);
    let se_w = (ci_w.1 - ci_w.0) / (2.0 * CRITICAL_95);
    let rel_q2 = (se_q / tau_q).powi(2);
    let rel_w2 = (se_w / tau_w).powi(2);
    (rel_w2 - rel_q2).max(0.0).sqrt()
}
