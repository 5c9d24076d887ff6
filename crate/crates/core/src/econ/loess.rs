//! LOESS: locally weighted polynomial regression with tricube weights.
//!
//! For each evaluation point the nearest ceil(span * n) observations form the
//! window; weights are tricube in scaled distance; a degree-1 or degree-2
//! polynomial is fitted by weighted least squares on the centered, scaled
//! predictor. No robustness iterations are applied. Pointwise bands use the
//! linear-smoother form: se(yhat) = sigma * ||l||, with sigma^2 estimated
//! from the residuals at the data points and the smoother trace.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use super::{EconError, CRITICAL_95};
use crate::matching::EngelObservation;

#[derive(Debug, Clone)]
pub struct LoessCurve {
    pub w: Vec<f64>,
    pub fitted: Vec<f64>,
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
    pub sigma2: f64,
    pub span: f64,
    pub degree: usize,
}

#[inline]
fn tricube(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let t = 1.0 - u * u * u;
        t * t * t
    }
}

struct LocalFit {
    fitted: f64,
    /// Squared norm of the smoother weights l.
    l_norm2: f64,
    /// l_i for the observation at `self_index`, when requested.
    l_self: f64,
}

/// Weighted polynomial fit at x0. `self_index` selects which observation's
/// smoother weight to report (for the trace); pass None for grid points.
fn local_fit(
    xs: &[f64],
    ys: &[f64],
    x0: f64,
    q: usize,
    degree: usize,
    self_index: Option<usize>,
) -> LocalFit {
    let n = xs.len();
    let mut dist: Vec<f64> = xs.iter().map(|&x| (x - x0).abs()).collect();
    let d_max = {
        let mut copy = dist.clone();
        let k = q.min(n) - 1;
        let (_, kth, _) = copy.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).unwrap());
        *kth
    };

    // Degenerate window: all selected points at x0. Weighted mean of ties.
    if d_max == 0.0 {
        let mut sum = 0.0;
        let mut count = 0.0;
        let mut self_w = 0.0;
        for i in 0..n {
            if dist[i] == 0.0 {
                sum += ys[i];
                count += 1.0;
                if Some(i) == self_index {
                    self_w = 1.0;
                }
            }
        }
        let fitted = sum / count;
        return LocalFit {
            fitted,
            l_norm2: 1.0 / count,
            l_self: self_w / count,
        };
    }

    for d in dist.iter_mut() {
        *d = tricube(*d / d_max);
    }
    let weights = dist;

    // Centered and scaled predictor keeps the normal equations conditioned.
    let u = |x: f64| (x - x0) / d_max;

    match degree {
        1 => {
            let mut m = Matrix2::<f64>::zeros();
            let mut b = Vector2::<f64>::zeros();
            for i in 0..n {
                let w = weights[i];
                if w == 0.0 {
                    continue;
                }
                let ui = u(xs[i]);
                let z = [1.0, ui];
                for a in 0..2 {
                    for c in 0..2 {
                        m[(a, c)] += w * z[a] * z[c];
                    }
                    b[a] += w * z[a] * ys[i];
                }
            }
            let inv = m.try_inverse().unwrap_or_else(|| {
                // Collinear window: fall back to the weighted mean.
                Matrix2::new(1.0 / m[(0, 0)], 0.0, 0.0, 0.0)
            });
            let coef = inv * b;
            let row0 = [inv[(0, 0)], inv[(0, 1)]];
            let mut l_norm2 = 0.0;
            let mut l_self = 0.0;
            for i in 0..n {
                let w = weights[i];
                if w == 0.0 {
                    continue;
                }
                let ui = u(xs[i]);
                let l = w * (row0[0] + row0[1] * ui);
                l_norm2 += l * l;
                if Some(i) == self_index {
                    l_self = l;
                }
            }
            LocalFit {
                fitted: coef[0],
                l_norm2,
                l_self,
            }
        }
        _ => {
            let mut m = Matrix3::<f64>::zeros();
            let mut b = Vector3::<f64>::zeros();
            for i in 0..n {
                let w = weights[i];
                if w == 0.0 {
                    continue;
                }
                let ui = u(xs[i]);
                let z = [1.0, ui, ui * ui];
                for a in 0..3 {
                    for c in 0..3 {
                        m[(a, c)] += w * z[a] * z[c];
                    }
                    b[a] += w * z[a] * ys[i];
                }
            }
            match m.try_inverse() {
                Some(inv) => {
                    let coef = inv * b;
                    let row0 = [inv[(0, 0)], inv[(0, 1)], inv[(0, 2)]];
                    let mut l_norm2 = 0.0;
                    let mut l_self = 0.0;
                    for i in 0..n {
                        let w = weights[i];
                        if w == 0.0 {
                            continue;
                        }
                        let ui = u(xs[i]);
                        let l = w * (row0[0] + row0[1] * ui + row0[2] * ui * ui);
                        l_norm2 += l * l;
                        if Some(i) == self_index {
                            l_self = l;
                        }
                    }
                    LocalFit {
                        fitted: coef[0],
                        l_norm2,
                        l_self,
                    }
                }
                // Too few distinct x in the window for a quadratic.
                None => local_fit(xs, ys, x0, q, 1, self_index),
            }
        }
    }
}

/// Fit the LOESS curve on an evaluation grid spanning [min W, max W].
pub fn fit_engel_loess(
    obs: &[EngelObservation],
    span: f64,
    degree: usize,
    grid_points: usize,
) -> Result<LoessCurve, EconError> {
    if !(span > 0.0 && span <= 1.0) {
        return Err(EconError::BadSpan(span));
    }
    let n = obs.len();
    if n < 10 {
        return Err(EconError::TooFewEngelObservations { n, min: 10 });
    }
    let xs: Vec<f64> = obs.iter().map(|o| o.w).collect();
    let ys: Vec<f64> = obs.iter().map(|o| o.q).collect();
    let q = ((span * n as f64).ceil() as usize).clamp(degree + 1, n);

    let (w_min, w_max) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });

    // Residual variance from the data-point fits: sigma^2 = RSS / (n - tr(L)).
    let mut rss = 0.0;
    let mut trace = 0.0;
    for i in 0..n {
        let f = local_fit(&xs, &ys, xs[i], q, degree, Some(i));
        rss += (ys[i] - f.fitted).powi(2);
        trace += f.l_self;
    }
    let denom = (n as f64 - trace).max(1.0);
    let sigma2 = rss / denom;

    let mut w_grid = Vec::with_capacity(grid_points);
    let mut fitted = Vec::with_capacity(grid_points);
    let mut band_lo = Vec::with_capacity(grid_points);
    let mut band_hi = Vec::with_capacity(grid_points);
    let step = if grid_points > 1 {
        (w_max - w_min) / (grid_points - 1) as f64
    } else {
        0.0
    };
    for g in 0..grid_points {
        let x0 = w_min + step * g as f64;
        let f = local_fit(&xs, &ys, x0, q, degree, None);
        let se = (sigma2 * f.l_norm2).sqrt();
        w_grid.push(x0);
        fitted.push(f.fitted);
        band_lo.push(f.fitted - CRITICAL_95 * se);
        band_hi.push(f.fitted + CRITICAL_95 * se);
    }

    Ok(LoessCurve {
        w: w_grid,
        fitted,
        band_lo,
        band_hi,
        sigma2,
        span,
        degree,
    })
}
