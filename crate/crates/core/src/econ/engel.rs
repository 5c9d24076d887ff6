//! Linear Engel curves: Q on the welfare measure, heteroskedasticity-robust
//! slope inference (HC1).

use super::EconError;
use crate::matching::EngelObservation;

/// Fitted linear Engel curve for one proxy-welfare pair. Slope units are
/// proxy units per currency unit.
#[derive(Debug, Clone, PartialEq)]
pub struct EngelFit {
    pub alpha: f64,
    pub beta: f64,
    pub se_alpha: f64,
    pub se_beta: f64,
    pub n: usize,
    /// Residuals in input order, kept for the linearity test.
    pub residuals: Vec<f64>,
}

/// Simple OLS of Q on W with HC1 standard errors.
pub fn fit_engel_linear(obs: &[EngelObservation]) -> Result<EngelFit, EconError> {
    let n = obs.len();
    if n < 3 {
        return Err(EconError::TooFewEngelObservations { n, min: 3 });
    }
    let nf = n as f64;
    let w_mean = obs.iter().map(|o| o.w).sum::<f64>() / nf;
    let q_mean = obs.iter().map(|o| o.q).sum::<f64>() / nf;
    let s_ww: f64 = obs.iter().map(|o| (o.w - w_mean).powi(2)).sum();
    if s_ww == 0.0 {
        return Err(EconError::ZeroVarianceW);
    }
    let s_wq: f64 = obs.iter().map(|o| (o.w - w_mean) * (o.q - q_mean)).sum();

    let beta = s_wq / s_ww;
    let alpha = q_mean - beta * w_mean;
    let residuals: Vec<f64> = obs.iter().map(|o| o.q - alpha - beta * o.w).collect();

    // HC1 sandwich for [alpha, beta]: influence of observation i on beta is
    // (w_i - mean) / s_ww, on alpha 1/n - mean (w_i - mean) / s_ww.
    let correction = nf / (nf - 2.0);
    let mut var_beta = 0.0;
    let mut var_alpha = 0.0;
    for (o, r) in obs.iter().zip(&residuals) {
        let c_beta = (o.w - w_mean) / s_ww;
        let c_alpha = 1.0 / nf - w_mean * c_beta;
        var_beta += (c_beta * r).powi(2);
        var_alpha += (c_alpha * r).powi(2);
    }

    Ok(EngelFit {
        alpha,
        beta,
        se_alpha: (correction * var_alpha).sqrt(),
        se_beta: (correction * var_beta).sqrt(),
        n,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Arm;

    fn obs(pairs: &[(f64, f64)]) -> Vec<EngelObservation> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(w, q))| EngelObservation {
                household: format!("h{i}"),
                w,
                q,
                arm: Arm::Control,
            })
            .collect()
    }

    #[test]
    fn noiseless_line_recovered_exactly() {
        let data: Vec<(f64, f64)> = (0..50)
            .map(|i| {
                let w = 500.0 + 100.0 * i as f64;
                (w, 5.0 + 0.02 * w)
            })
            .collect();
        let fit = fit_engel_linear(&obs(&data)).unwrap();
        assert!((fit.beta - 0.02).abs() < 1e-10);
        assert!((fit.alpha - 5.0).abs() < 1e-10);
    }

    #[test]
    fn shift_in_w_moves_only_intercept() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let data: Vec<(f64, f64)> = (0..200)
            .map(|_| {
                let w = rng.gen_range(100.0..5000.0);
                (w, 3.0 + 0.015 * w + rng.gen_range(-2.0..2.0))
            })
            .collect();
        let fit = fit_engel_linear(&obs(&data)).unwrap();
        let shifted: Vec<(f64, f64)> = data.iter().map(|&(w, q)| (w + 1000.0, q)).collect();
        let fit2 = fit_engel_linear(&obs(&shifted)).unwrap();
        assert!((fit.beta - fit2.beta).abs() < 1e-10);
        assert!((fit2.alpha - (fit.alpha - 1000.0 * fit.beta)).abs() < 1e-8);
        assert!((fit.se_beta - fit2.se_beta).abs() < 1e-12);
    }

    #[test]
    fn planted_slope_recovered_within_two_se() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let beta = 0.0186;
        let data: Vec<(f64, f64)> = (0..1_500)
            .map(|_| {
                let w = rng.gen_range(200.0..6000.0);
                (w, 25.0 + beta * w + rng.gen_range(-12.0..12.0))
            })
            .collect();
        let fit = fit_engel_linear(&obs(&data)).unwrap();
        assert!((fit.beta - beta).abs() < 2.0 * fit.se_beta);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(matches!(
            fit_engel_linear(&obs(&[(1.0, 2.0), (2.0, 3.0)])),
            Err(EconError::TooFewEngelObservations { .. })
        ));
        assert!(matches!(
            fit_engel_linear(&obs(&[(5.0, 1.0), (5.0, 2.0), (5.0, 3.0)])),
            Err(EconError::ZeroVarianceW)
        ));
    }
}
