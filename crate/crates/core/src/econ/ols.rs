//! Least squares with one indicator per eligibility level.
//!
//! The design matrix is the supplied x-terms plus one indicator column per
//! distinct eligibility count. The indicators span the intercept, so no
//! global constant is added. Coefficients come from an SVD solve, never the
//! normal equations; rank deficiency is surfaced with the offending columns
//! named rather than silently regularized.

use nalgebra::{DMatrix, DVector};

use super::EconError;

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub labels: Vec<String>,
    pub coef: Vec<f64>,
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
    /// (X'X)^-1, reconstructed from the SVD factors.
    pub xtx_inv: DMatrix<f64>,
    /// Row-major copy of the design for the sandwich accumulation loops.
    pub design_rows: Vec<f64>,
    pub n: usize,
    pub p: usize,
}

impl OlsFit {
    #[inline]
    pub fn design_row(&self, i: usize) -> &[f64] {
        &self.design_rows[i * self.p..(i + 1) * self.p]
    }

    /// Heteroskedasticity-robust (HC0) standard errors: the Conley sandwich
    /// with only the i = j terms.
    pub fn hc0_se(&self) -> Vec<f64> {
        let p = self.p;
        let mut meat = DMatrix::<f64>::zeros(p, p);
        for i in 0..self.n {
            let row = self.design_row(i);
            let e2 = self.residuals[i] * self.residuals[i];
            for a in 0..p {
                for b in 0..p {
                    meat[(a, b)] += row[a] * row[b] * e2;
                }
            }
        }
        let cov = &self.xtx_inv * meat * &self.xtx_inv;
        (0..p).map(|k| cov[(k, k)].max(0.0).sqrt()).collect()
    }
}

/// Distinct eligibility levels in ascending order.
pub(super) fn distinct_levels(e_levels: &[u32]) -> Vec<u32> {
    let mut levels: Vec<u32> = e_levels.to_vec();
    levels.sort_unstable();
    levels.dedup();
    levels
}

/// Fit y on x-terms plus eligibility-level indicators.
pub fn ols_with_categorical_controls(
    y: &[f64],
    x_terms: &[(String, Vec<f64>)],
    e_levels: &[u32],
) -> Result<OlsFit, EconError> {
    let n = y.len();
    if n == 0 {
        return Err(EconError::EmptyOutcome);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(EconError::NonFinite("outcome"));
    }
    for (label, col) in x_terms {
        if col.len() != n {
            return Err(EconError::ColumnLengthMismatch {
                column: label.clone(),
                len: col.len(),
                n,
            });
        }
        if col.iter().any(|v| !v.is_finite()) {
            return Err(EconError::NonFinite("x-term"));
        }
    }
    if e_levels.len() != n {
        return Err(EconError::ColumnLengthMismatch {
            column: "e_levels".into(),
            len: e_levels.len(),
            n,
        });
    }

    let levels = distinct_levels(e_levels);
    let p = x_terms.len() + levels.len();
    if n <= p {
        return Err(EconError::TooFewObservations { n, p });
    }

    let mut labels: Vec<String> = x_terms.iter().map(|(l, _)| l.clone()).collect();
    labels.extend(levels.iter().map(|m| format!("e={m}")));

    let level_index: std::collections::HashMap<u32, usize> =
        levels.iter().enumerate().map(|(i, &m)| (m, i)).collect();

    let mut design_rows = vec![0.0f64; n * p];
    for i in 0..n {
        let row = &mut design_rows[i * p..(i + 1) * p];
        for (j, (_, col)) in x_terms.iter().enumerate() {
            row[j] = col[i];
        }
        row[x_terms.len() + level_index[&e_levels[i]]] = 1.0;
    }

    let design = DMatrix::from_row_slice(n, p, &design_rows);
    let svd = design.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = max_sv * (n.max(p) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < p {
        // Null-space directions name the columns involved in the collinearity.
        let v_t = svd.v_t.as_ref().expect("svd computed with v");
        let mut involved: Vec<String> = Vec::new();
        for k in rank..p {
            for j in 0..p {
                if v_t[(k, j)].abs() > 0.1 && !involved.contains(&labels[j]) {
                    involved.push(labels[j].clone());
                }
            }
        }
        return Err(EconError::RankDeficient {
            rank,
            p,
            columns: involved,
        });
    }

    let yv = DVector::from_column_slice(y);
    let coef_v = svd.solve(&yv, tol).expect("svd solve");
    let fitted_v = &design * &coef_v;
    let residuals: Vec<f64> = (0..n).map(|i| y[i] - fitted_v[i]).collect();

    // (X'X)^-1 = V S^-2 V'.
    let v_t = svd.v_t.as_ref().expect("svd computed with v");
    let mut xtx_inv = DMatrix::<f64>::zeros(p, p);
    for k in 0..p {
        let s2 = svd.singular_values[k] * svd.singular_values[k];
        for a in 0..p {
            for b in 0..p {
                xtx_inv[(a, b)] += v_t[(k, a)] * v_t[(k, b)] / s2;
            }
        }
    }

    Ok(OlsFit {
        labels,
        coef: coef_v.iter().cloned().collect(),
        residuals,
        fitted: fitted_v.iter().cloned().collect(),
        xtx_inv,
        design_rows,
        n,
        p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_slope_recovered_exactly() {
        let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 7.0).collect();
        let e = vec![1u32; 40];
        let fit = ols_with_categorical_controls(&y, &[("x".into(), x)], &e).unwrap();
        assert!((fit.coef[0] - 2.0).abs() < 1e-10);
        assert!((fit.coef[1] - 7.0).abs() < 1e-10); // e=1 indicator absorbs the intercept
    }

    #[test]
    fn e_indicators_equal_group_means_when_x_orthogonal() {
        // x is zero-mean within each e group, y = group mean.
        let x = vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let e = vec![0u32, 0, 0, 0, 3, 3, 3, 3];
        let y = vec![5.0, 5.0, 5.0, 5.0, 9.0, 9.0, 9.0, 9.0];
        let fit = ols_with_categorical_controls(&y, &[("x".into(), x)], &e).unwrap();
        assert!(fit.coef[0].abs() < 1e-12);
        assert!((fit.coef[1] - 5.0).abs() < 1e-12);
        assert!((fit.coef[2] - 9.0).abs() < 1e-12);
        assert_eq!(fit.labels, vec!["x", "e=0", "e=3"]);
    }

    /// Test-only dense pseudo-inverse via normal equations with Gauss-Jordan
    /// elimination; an independent route from the SVD solve.
    fn normal_equations_solve(design: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let n = design.len();
        let p = design[0].len();
        let mut a = vec![vec![0.0f64; p + 1]; p];
        for r in 0..p {
            for c in 0..p {
                a[r][c] = (0..n).map(|i| design[i][r] * design[i][c]).sum();
            }
            a[r][p] = (0..n).map(|i| design[i][r] * y[i]).sum();
        }
        for col in 0..p {
            let pivot = (col..p)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            let pv = a[col][col];
            for c in col..=p {
                a[col][c] /= pv;
            }
            for r in 0..p {
                if r != col {
                    let f = a[r][col];
                    for c in col..=p {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..p).map(|r| a[r][p]).collect()
    }

    #[test]
    fn random_design_matches_normal_equations_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let n = 120;
        let x1: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 3.0).collect();
        let e: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 1.5 * x1[i] - 0.7 * x2[i] + e[i] as f64 + rng.gen::<f64>())
            .collect();

        let fit = ols_with_categorical_controls(
            &y,
            &[("x1".into(), x1.clone()), ("x2".into(), x2.clone())],
            &e,
        )
        .unwrap();

        let design: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row = vec![x1[i], x2[i], 0.0, 0.0, 0.0];
                row[2 + e[i] as usize] = 1.0;
                row
            })
            .collect();
        let oracle = normal_equations_solve(&design, &y);
        for (a, b) in fit.coef.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 10.0).collect();
        let e: Vec<u32> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let y: Vec<f64> = (0..n).map(|i| x[i] + rng.gen::<f64>() * 5.0).collect();
        let fit = ols_with_categorical_controls(&y, &[("x".into(), x)], &e).unwrap();
        let scale: f64 = y.iter().map(|v| v.abs()).sum::<f64>();
        for j in 0..fit.p {
            let dot: f64 = (0..n).map(|i| fit.design_row(i)[j] * fit.residuals[i]).sum();
            assert!(dot.abs() / scale < 1e-8, "column {j} dot {dot}");
        }
    }

    #[test]
    fn constant_x_is_rank_deficient() {
        // x constant: collinear with the sum of the e indicators.
        let x = vec![3.0; 30];
        let e: Vec<u32> = (0..30).map(|i| (i % 2) as u32).collect();
        let y: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let err = ols_with_categorical_controls(&y, &[("x".into(), x)], &e).unwrap_err();
        match err {
            EconError::RankDeficient { rank, p, columns } => {
                assert_eq!(p, 3);
                assert_eq!(rank, 2);
                assert!(columns.contains(&"x".to_string()));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn too_few_observations_rejected() {
        let y = vec![1.0, 2.0];
        let x = vec![0.5, 1.0];
        let e = vec![0u32, 1];
        assert!(matches!(
            ols_with_categorical_controls(&y, &[("x".into(), x)], &e),
            Err(EconError::TooFewObservations { .. })
        ));
    }
}
