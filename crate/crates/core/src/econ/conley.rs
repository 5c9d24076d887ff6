//! Conley spatial HAC standard errors with a uniform kernel.
//!
//! Variance is the sandwich (X'X)^-1 M (X'X)^-1 with
//! M = sum_i sum_j 1{d(i,j) <= cutoff} x_i x_j' e_i e_j, haversine distances,
//! i = j included. Two paths are provided: the O(n^2) reference double sum
//! and a spatially binned fast path that must agree with it to 1e-9; the fast
//! path buckets observations so every in-range pair lies in the 3x3 bucket
//! neighborhood, then filters by exact distance.

use std::collections::HashMap;

use nalgebra::DMatrix;

use super::{EconError, OlsFit};
use crate::geo::{haversine_distance, GeoPoint};

const METERS_PER_DEG_LAT: f64 = 111_194.93;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConleyPath {
    Binned,
    BruteForce,
}

/// Per-observation neighbor lists (CSR layout) for all pairs within the
/// cutoff, self included, neighbor indices ascending. Built once and reused
/// across placebo draws, whose coordinates never change.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    pub cutoff_m: f64,
}

impl NeighborIndex {
    #[inline]
    pub fn neighbors_of(&self, i: usize) -> &[u32] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pair_count(&self) -> usize {
        self.neighbors.len()
    }
}

pub fn build_neighbor_index(
    coords: &[GeoPoint],
    cutoff_m: f64,
) -> Result<NeighborIndex, EconError> {
    if cutoff_m < 0.0 {
        return Err(EconError::NegativeCutoff(cutoff_m));
    }
    let n = coords.len();
    // Bucket sizes: conservative degree spans so any pair within the cutoff
    // differs by at most one bucket per axis. A zero cutoff still needs
    // positive bucket sizes to catch exactly coincident points.
    let max_abs_lat = coords
        .iter()
        .map(|p| p.lat().abs())
        .fold(0.0f64, f64::max)
        .min(89.0);
    let dlat = (cutoff_m / METERS_PER_DEG_LAT).max(1e-9);
    let dlon = (cutoff_m / (METERS_PER_DEG_LAT * max_abs_lat.to_radians().cos())).max(1e-9);

    let mut buckets: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
    for (i, p) in coords.iter().enumerate() {
        let key = ((p.lon() / dlon).floor() as i64, (p.lat() / dlat).floor() as i64);
        buckets.entry(key).or_default().push(i as u32);
    }

    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    let mut neighbors: Vec<u32> = Vec::new();
    let mut scratch: Vec<u32> = Vec::new();
    for (i, p) in coords.iter().enumerate() {
        let kc = (p.lon() / dlon).floor() as i64;
        let kr = (p.lat() / dlat).floor() as i64;
        scratch.clear();
        for dc in -1..=1 {
            for dr in -1..=1 {
                if let Some(bucket) = buckets.get(&(kc + dc, kr + dr)) {
                    for &j in bucket {
                        if haversine_distance(*p, coords[j as usize]) <= cutoff_m {
                            scratch.push(j);
                        }
                    }
                }
            }
        }
        scratch.sort_unstable();
        debug_assert!(scratch.contains(&(i as u32)));
        neighbors.extend_from_slice(&scratch);
        offsets.push(neighbors.len());
    }
    Ok(NeighborIndex {
        offsets,
        neighbors,
        cutoff_m,
    })
}

/// Sandwich covariance using a prebuilt neighbor index.
pub fn conley_covariance_with_index(fit: &OlsFit, index: &NeighborIndex) -> DMatrix<f64> {
    let (n, p) = (fit.n, fit.p);
    debug_assert_eq!(index.len(), n);
    // u_i = x_i * e_i, flattened row-major.
    let mut u = vec![0.0f64; n * p];
    for i in 0..n {
        let row = fit.design_row(i);
        let e = fit.residuals[i];
        for k in 0..p {
            u[i * p + k] = row[k] * e;
        }
    }

    let mut meat = DMatrix::<f64>::zeros(p, p);
    let mut s = vec![0.0f64; p];
    for i in 0..n {
        s.iter_mut().for_each(|v| *v = 0.0);
        for &j in index.neighbors_of(i) {
            let uj = &u[j as usize * p..(j as usize + 1) * p];
            for k in 0..p {
                s[k] += uj[k];
            }
        }
        let ui = &u[i * p..(i + 1) * p];
        for a in 0..p {
            for b in 0..p {
                meat[(a, b)] += ui[a] * s[b];
            }
        }
    }
    &fit.xtx_inv * meat * &fit.xtx_inv
}

fn conley_covariance_bruteforce(
    fit: &OlsFit,
    coords: &[GeoPoint],
    cutoff_m: f64,
) -> DMatrix<f64> {
    let (n, p) = (fit.n, fit.p);
    let mut u = vec![0.0f64; n * p];
    for i in 0..n {
        let row = fit.design_row(i);
        let e = fit.residuals[i];
        for k in 0..p {
            u[i * p + k] = row[k] * e;
        }
    }
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let ui = &u[i * p..(i + 1) * p];
        for j in 0..n {
            if haversine_distance(coords[i], coords[j]) <= cutoff_m {
                let uj = &u[j * p..(j + 1) * p];
                for a in 0..p {
                    for b in 0..p {
                        meat[(a, b)] += ui[a] * uj[b];
                    }
                }
            }
        }
    }
    &fit.xtx_inv * meat * &fit.xtx_inv
}

/// Per-coefficient Conley standard errors.
pub fn conley_se(
    fit: &OlsFit,
    coords: &[GeoPoint],
    cutoff_m: f64,
    path: ConleyPath,
) -> Result<Vec<f64>, EconError> {
    if cutoff_m < 0.0 {
        return Err(EconError::NegativeCutoff(cutoff_m));
    }
    if coords.len() != fit.n {
        return Err(EconError::CoordsLengthMismatch {
            coords: coords.len(),
            n: fit.n,
        });
    }
    let cov = match path {
        ConleyPath::BruteForce => conley_covariance_bruteforce(fit, coords, cutoff_m),
        ConleyPath::Binned => {
            let index = build_neighbor_index(coords, cutoff_m)?;
            conley_covariance_with_index(fit, &index)
        }
    };
    Ok((0..fit.p).map(|k| cov[(k, k)].max(0.0).sqrt()).collect())
}

/// Standard errors from a prebuilt index (placebo fast path).
pub fn conley_se_with_index(fit: &OlsFit, index: &NeighborIndex) -> Vec<f64> {
    let cov = conley_covariance_with_index(fit, index);
    (0..fit.p).map(|k| cov[(k, k)].max(0.0).sqrt()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::econ::ols_with_categorical_controls;
    use rand::{Rng, SeedableRng};

    fn random_problem(n: usize, seed: u64) -> (OlsFit, Vec<GeoPoint>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<GeoPoint> = (0..n)
            .map(|_| {
                GeoPoint::new(
                    34.0 + rng.gen::<f64>() * 0.2,
                    -0.1 + rng.gen::<f64>() * 0.2,
                )
                .unwrap()
            })
            .collect();
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 3.0).collect();
        let e: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 * x[i] + e[i] as f64 + rng.gen::<f64>() * 4.0 - 2.0)
            .collect();
        let fit = ols_with_categorical_controls(&y, &[("x".into(), x)], &e).unwrap();
        (fit, coords)
    }

    #[test]
    fn zero_cutoff_equals_hc0() {
        let (fit, coords) = random_problem(300, 1);
        let conley = conley_se(&fit, &coords, 0.0, ConleyPath::Binned).unwrap();
        let hc0 = fit.hc0_se();
        for (a, b) in conley.iter().zip(&hc0) {
            assert!((a - b).abs() / b < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn full_cutoff_matches_direct_double_sum_on_single_regressor() {
        // One demeaned regressor, single e level. With the cutoff above the
        // max pairwise distance the meat is (sum_i u_i)(sum_j u_j)' over the
        // [x, 1] design.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let n = 150;
        let coords: Vec<GeoPoint> = (0..n)
            .map(|_| GeoPoint::new(34.0 + rng.gen::<f64>() * 0.01, rng.gen::<f64>() * 0.01).unwrap())
            .collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mean = raw.iter().sum::<f64>() / n as f64;
        let x: Vec<f64> = raw.iter().map(|v| v - mean).collect();
        let y: Vec<f64> = (0..n).map(|i| x[i] + rng.gen::<f64>()).collect();
        let e = vec![0u32; n];
        let fit = ols_with_categorical_controls(&y, &[("x".into(), x.clone())], &e).unwrap();

        let se = conley_se(&fit, &coords, 1e9, ConleyPath::Binned).unwrap();

        // Oracle: with every pair in range the double sum collapses to the
        // variance of the column sums, sum_i u_i times its transpose.
        let u: Vec<[f64; 2]> = (0..n)
            .map(|i| [x[i] * fit.residuals[i], fit.residuals[i]])
            .collect();
        let mut total = [0.0f64; 2];
        for ui in &u {
            total[0] += ui[0];
            total[1] += ui[1];
        }
        let meat = [
            [total[0] * total[0], total[0] * total[1]],
            [total[1] * total[0], total[1] * total[1]],
        ];
        let xtx = &fit.xtx_inv;
        let mut cov = [[0.0f64; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = 0.0;
                for r in 0..2 {
                    for c in 0..2 {
                        acc += xtx[(a, r)] * meat[r][c] * xtx[(c, b)];
                    }
                }
                cov[a][b] = acc;
            }
        }
        // OLS makes the column sums of u nearly zero, so both routes land on
        // (numerical) zero; compare on the scale of the HC0 errors.
        let scale = fit.hc0_se();
        for k in 0..2 {
            let oracle = cov[k][k].max(0.0).sqrt();
            assert!(
                (se[k] - oracle).abs() <= 1e-10 * scale[k],
                "{} vs {} (scale {})",
                se[k],
                oracle,
                scale[k]
            );
        }
    }

    #[test]
    fn binned_path_matches_brute_force() {
        let (fit, coords) = random_problem(200, 12);
        let scale = fit.hc0_se();
        // Realistic cutoffs; the all-pairs limit cancels to numerical zero
        // and is exercised against its analytic form in the test above.
        for cutoff in [0.0, 500.0, 3_000.0, 8_000.0] {
            let fast = conley_se(&fit, &coords, cutoff, ConleyPath::Binned).unwrap();
            let brute = conley_se(&fit, &coords, cutoff, ConleyPath::BruteForce).unwrap();
            for (k, (a, b)) in fast.iter().zip(&brute).enumerate() {
                // Same pair set, different accumulation order. The all-pairs
                // cutoff cancels to numerical zero, hence the HC0 anchor.
                assert!(
                    (a - b).abs() <= 1e-9 * b.max(scale[k]),
                    "cutoff {cutoff}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn covariance_symmetric_nonnegative_diagonal() {
        let (fit, coords) = random_problem(150, 77);
        let index = build_neighbor_index(&coords, 3_000.0).unwrap();
        let cov = conley_covariance_with_index(&fit, &index);
        for a in 0..fit.p {
            assert!(cov[(a, a)] >= -1e-12);
            for b in 0..fit.p {
                assert!((cov[(a, b)] - cov[(b, a)]).abs() < 1e-9 * cov[(a, a)].abs().max(1e-9));
            }
        }
    }

    #[test]
    fn negative_cutoff_rejected() {
        let (fit, coords) = random_problem(50, 2);
        assert!(matches!(
            conley_se(&fit, &coords, -1.0, ConleyPath::Binned),
            Err(EconError::NegativeCutoff(_))
        ));
    }
}
