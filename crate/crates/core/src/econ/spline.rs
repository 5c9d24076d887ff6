//! Linearity check: regress the linear-fit residuals on the curvature
//! components of a natural cubic spline and F-test their joint nullity.
//!
//! Knot convention: five interior knots at the {1/6, ..., 5/6} quantiles of
//! the welfare measure, boundary knots at its min and max. The natural-spline
//! space on 7 knots is spanned by {1, x} plus 5 curvature functions; since
//! the residuals are already orthogonal to {1, x}, the test regresses them on
//! an intercept plus the 5 curvature functions, giving df = (5, n - 6).

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use super::engel::fit_engel_linear;
use super::EconError;
use crate::matching::EngelObservation;
use crate::rasterize::percentile;

pub const N_INTERIOR_KNOTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearityTest {
    pub f_stat: f64,
    pub df_num: usize,
    pub df_den: usize,
    pub p_value: f64,
    pub knots: Vec<f64>,
}

/// Curvature basis of the natural cubic spline with the given knots
/// (ascending, at least 3). Returns one column per function, each of length
/// x.len(); the spanned space plus {1, x} is the full natural-spline space.
pub fn natural_spline_curvature_basis(x: &[f64], knots: &[f64]) -> Vec<Vec<f64>> {
    let m = knots.len();
    debug_assert!(m >= 3);
    let last = knots[m - 1];
    let d = |k: usize, xi: f64| -> f64 {
        let plus3 = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
        (plus3(xi - knots[k]) - plus3(xi - last)) / (last - knots[k])
    };
    (0..m - 2)
        .map(|k| x.iter().map(|&xi| d(k, xi) - d(m - 2, xi)).collect())
        .collect()
}

/// Fit residuals ~ intercept + curvature basis and F-test the basis
/// coefficients jointly against zero.
pub fn test_engel_linearity(obs: &[EngelObservation]) -> Result<LinearityTest, EconError> {
    let linear = fit_engel_linear(obs)?;
    let n = obs.len();

    let mut w_sorted: Vec<f64> = obs.iter().map(|o| o.w).collect();
    w_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut knots = Vec::with_capacity(N_INTERIOR_KNOTS + 2);
    knots.push(w_sorted[0]);
    for k in 1..=N_INTERIOR_KNOTS {
        knots.push(percentile(&w_sorted, 100.0 * k as f64 / (N_INTERIOR_KNOTS + 1) as f64));
    }
    knots.push(w_sorted[n - 1]);
    if knots.windows(2).any(|p| p[1] <= p[0]) {
        return Err(EconError::TooFewDistinctKnots {
            needed: N_INTERIOR_KNOTS + 2,
        });
    }

    let w: Vec<f64> = obs.iter().map(|o| o.w).collect();
    let basis = natural_spline_curvature_basis(&w, &knots);
    let q = basis.len();
    let p = q + 1; // intercept + curvature columns
    if n <= p {
        return Err(EconError::TooFewObservations { n, p });
    }

    // Scale columns to unit max for conditioning; scaling does not change
    // fitted values or the F statistic.
    let mut design = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        design[(i, 0)] = 1.0;
    }
    for (j, col) in basis.iter().enumerate() {
        let scale = col.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for i in 0..n {
            design[(i, j + 1)] = col[i] / scale;
        }
    }

    let r = DVector::from_column_slice(&linear.residuals);
    let svd = design.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = max_sv * (n.max(p) as f64) * f64::EPSILON;
    let coef = svd.solve(&r, tol).expect("svd solve");
    let fitted = &design * &coef;

    let rss1: f64 = (0..n).map(|i| (r[i] - fitted[i]).powi(2)).sum();
    let r_mean = r.iter().sum::<f64>() / n as f64;
    let rss0: f64 = r.iter().map(|v| (v - r_mean).powi(2)).sum();

    let df_num = q;
    let df_den = n - p;
    let f_stat = ((rss0 - rss1).max(0.0) / df_num as f64) / (rss1 / df_den as f64);
    let dist = FisherSnedecor::new(df_num as f64, df_den as f64).expect("valid dfs");
    let p_value = 1.0 - dist.cdf(f_stat);

    Ok(LinearityTest {
        f_stat,
        df_num,
        df_den,
        p_value,
        knots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Arm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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
    fn curvature_basis_is_linear_beyond_boundaries() {
        // Natural splines are linear outside the boundary knots: second
        // differences vanish there.
        let knots = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = vec![-3.0, -2.0, -1.0, 7.0, 8.0, 9.0];
        let basis = natural_spline_curvature_basis(&x, &knots);
        for col in &basis {
            let second_left = col[2] - 2.0 * col[1] + col[0];
            let second_right = col[5] - 2.0 * col[4] + col[3];
            assert!(second_left.abs() < 1e-9, "{second_left}");
            assert!(second_right.abs() < 1e-9, "{second_right}");
        }
        assert_eq!(basis.len(), 5);
    }

    #[test]
    fn reports_expected_degrees_of_freedom() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<(f64, f64)> = (0..1_844)
            .map(|_| {
                let w = rng.gen_range(100.0..8000.0);
                (w, 20.0 + 0.02 * w + rng.gen_range(-5.0..5.0))
            })
            .collect();
        let test = test_engel_linearity(&obs(&data)).unwrap();
        assert_eq!(test.df_num, 5);
        assert_eq!(test.df_den, 1_838);
    }

    #[test]
    fn rejection_rate_near_nominal_under_linear_null() {
        let mut rejections = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<(f64, f64)> = (0..400)
                .map(|_| {
                    let w = rng.gen_range(0.0..100.0);
                    let noise: f64 = (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0;
                    (w, 5.0 + 0.4 * w + noise)
                })
                .collect();
            let test = test_engel_linearity(&obs(&data)).unwrap();
            if test.p_value < 0.05 {
                rejections += 1;
            }
        }
        assert!(
            (1..=11).contains(&rejections),
            "rejected {rejections}/100 under the null"
        );
    }

    #[test]
    fn strong_cubic_signal_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<(f64, f64)> = (0..600)
            .map(|_| {
                let w: f64 = rng.gen_range(-3.0..3.0);
                (w, w.powi(3) + rng.gen_range(-0.5..0.5))
            })
            .collect();
        let test = test_engel_linearity(&obs(&data)).unwrap();
        assert!(test.p_value < 0.001, "p = {}", test.p_value);
    }

    #[test]
    fn too_few_distinct_values_for_knots() {
        let data: Vec<(f64, f64)> = (0..50).map(|i| ((i % 2) as f64, i as f64)).collect();
        assert!(matches!(
            test_engel_linearity(&obs(&data)),
            Err(EconError::TooFewDistinctKnots { .. })
        ));
    }
}
