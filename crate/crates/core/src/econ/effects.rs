//! Binned and pooled treatment effects on grid-cell outcomes.
//!
//! Outcomes are winsorized at the upper percentile over retained cells before
//! fitting. The binned specification uses indicators for x in {1, 2, >=3}
//! with x = 0 as the reference; the pooled specification puts a single slope
//! on x, interpreting each unit as one $1,000 transfer.

use statrs::distribution::{ContinuousCDF, StudentsT};

use super::conley::{conley_se_with_index, ConleyPath, NeighborIndex};
use super::ols::{ols_with_categorical_controls, OlsFit};
use super::{conley_se, EconError, CRITICAL_95};
use crate::geo::GeoPoint;
use crate::measures::Proxy;
use crate::rasterize::{winsorize, GridCellObservation, WinsorSpec};

#[derive(Debug, Clone, Copy)]
pub struct EstimationSettings {
    pub conley_cutoff_m: f64,
    pub winsor_upper_pct: f64,
    pub conley_path: ConleyPath,
}

impl Default for EstimationSettings {
    fn default() -> Self {
        Self {
            conley_cutoff_m: 3_000.0,
            winsor_upper_pct: 99.0,
            conley_path: ConleyPath::Binned,
        }
    }
}

/// One estimated coefficient with Conley inference attached.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate {
    pub coefficient: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    pub t_stat: f64,
    pub p_value: f64,
    pub df: usize,
    pub n: usize,
}

impl EffectEstimate {
    pub(super) fn from_fit(coef: f64, se: f64, n: usize, p: usize) -> Self {
        let df = n - p;
        let t_stat = if se > 0.0 { coef / se } else { f64::NAN };
        let p_value = if t_stat.is_finite() {
            let t = StudentsT::new(0.0, 1.0, df as f64).expect("valid df");
            2.0 * (1.0 - t.cdf(t_stat.abs()))
        } else {
            f64::NAN
        };
        Self {
            coefficient: coef,
            se,
            ci95: (coef - CRITICAL_95 * se, coef + CRITICAL_95 * se),
            t_stat,
            p_value,
            df,
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedEffect {
    pub label: String,
    pub estimate: EffectEstimate,
}

/// Effects per treatment-intensity bin, x = 0 the implicit reference with
/// effect identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedEffects {
    pub bins: Vec<BinnedEffect>,
    pub dropped_bins: Vec<String>,
    pub n: usize,
}

pub(super) fn outcome_vector(cells: &[GridCellObservation], proxy: Proxy) -> Vec<f64> {
    cells
        .iter()
        .map(|c| match proxy {
            Proxy::Footprint => c.y_footprint,
            Proxy::TinArea => c.y_tin,
            Proxy::NightLight => c.y_night,
        })
        .collect()
}

pub(super) fn winsorized_outcome(
    cells: &[GridCellObservation],
    proxy: Proxy,
    upper_pct: f64,
) -> Result<Vec<f64>, EconError> {
    Ok(winsorize(
        &outcome_vector(cells, proxy),
        &WinsorSpec::upper(upper_pct),
    )?)
}

/// Bin labels and member predicate for x in {1, 2, 2+}.
const BIN_DEFS: [(&str, fn(u32) -> bool); 3] = [
    ("x=1", |x| x == 1),
    ("x=2", |x| x == 2),
    ("x=2+", |x| x >= 3),
];

pub(super) fn binned_x_terms(x: &[u32]) -> (Vec<(String, Vec<f64>)>, Vec<String>) {
    let mut terms = Vec::new();
    let mut dropped = Vec::new();
    for (label, member) in BIN_DEFS {
        let col: Vec<f64> = x.iter().map(|&v| member(v) as u8 as f64).collect();
        if col.iter().any(|&v| v > 0.0) {
            terms.push((label.to_string(), col));
        } else {
            dropped.push(label.to_string());
        }
    }
    (terms, dropped)
}

pub(super) fn fit_terms(
    y: &[f64],
    x_terms: &[(String, Vec<f64>)],
    e: &[u32],
    coords: &[GeoPoint],
    settings: &EstimationSettings,
    index: Option<&NeighborIndex>,
) -> Result<(OlsFit, Vec<f64>), EconError> {
    let fit = ols_with_categorical_controls(y, x_terms, e)?;
    let se = match index {
        Some(idx) => conley_se_with_index(&fit, idx),
        None => conley_se(&fit, coords, settings.conley_cutoff_m, settings.conley_path)?,
    };
    Ok((fit, se))
}

pub(super) fn pooled_from_parts(
    y: &[f64],
    x: &[u32],
    e: &[u32],
    coords: &[GeoPoint],
    settings: &EstimationSettings,
    index: Option<&NeighborIndex>,
) -> Result<EffectEstimate, EconError> {
    let x_col: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let terms = vec![("x".to_string(), x_col)];
    let (fit, se) = fit_terms(y, &terms, e, coords, settings, index)?;
    Ok(EffectEstimate::from_fit(fit.coef[0], se[0], fit.n, fit.p))
}

pub(super) fn binned_from_parts(
    y: &[f64],
    x: &[u32],
    e: &[u32],
    coords: &[GeoPoint],
    settings: &EstimationSettings,
    index: Option<&NeighborIndex>,
) -> Result<BinnedEffects, EconError> {
    let (terms, dropped) = binned_x_terms(x);
    let (fit, se) = fit_terms(y, &terms, e, coords, settings, index)?;
    let bins = terms
        .iter()
        .enumerate()
        .map(|(k, (label, _))| BinnedEffect {
            label: label.clone(),
            estimate: EffectEstimate::from_fit(fit.coef[k], se[k], fit.n, fit.p),
        })
        .collect();
    Ok(BinnedEffects {
        bins,
        dropped_bins: dropped,
        n: fit.n,
    })
}

fn parts(cells: &[GridCellObservation]) -> (Vec<u32>, Vec<u32>, Vec<GeoPoint>) {
    let x = cells.iter().map(|c| c.x).collect();
    let e = cells.iter().map(|c| c.e).collect();
    let coords = cells.iter().map(|c| c.centroid).collect();
    (x, e, coords)
}

/// Pooled effect: a single slope on the treated-household count.
pub fn estimate_pooled(
    cells: &[GridCellObservation],
    proxy: Proxy,
    settings: &EstimationSettings,
) -> Result<EffectEstimate, EconError> {
    let y = winsorized_outcome(cells, proxy, settings.winsor_upper_pct)?;
    let (x, e, coords) = parts(cells);
    pooled_from_parts(&y, &x, &e, &coords, settings, None)
}

/// Binned effects for x in {1, 2, 2+} against the x = 0 reference.
pub fn estimate_binned(
    cells: &[GridCellObservation],
    proxy: Proxy,
    settings: &EstimationSettings,
) -> Result<BinnedEffects, EconError> {
    let y = winsorized_outcome(cells, proxy, settings.winsor_upper_pct)?;
    let (x, e, coords) = parts(cells);
    binned_from_parts(&y, &x, &e, &coords, settings, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{cell_index, CellId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cell_at(i: usize, x: u32, e: u32, y: f64) -> GridCellObservation {
        // Spread cells far apart so Conley reduces to HC0-like behavior.
        let lon = 34.0 + (i % 100) as f64 * 0.05;
        let lat = -2.0 + (i / 100) as f64 * 0.05;
        let p = GeoPoint::new(lon, lat).unwrap();
        let cell: CellId = cell_index(p, 0.001).unwrap();
        GridCellObservation {
            cell,
            centroid: p,
            x,
            e,
            y_footprint: y,
            y_tin: y * 0.5,
            y_night: 0.1,
        }
    }

    fn synthetic_cells(
        rng: &mut ChaCha8Rng,
        n: usize,
        bin_effects: [f64; 4],
        noise: f64,
    ) -> Vec<GridCellObservation> {
        (0..n)
            .map(|i| {
                let e = rng.gen_range(1..=4u32);
                let x = rng.gen_range(0..=e);
                let base = 10.0 + 3.0 * e as f64;
                let effect = match x {
                    0 => bin_effects[0],
                    1 => bin_effects[1],
                    2 => bin_effects[2],
                    _ => bin_effects[3],
                };
                let y = base + effect + rng.gen_range(-noise..noise);
                cell_at(i, x, e, y)
            })
            .collect()
    }

    #[test]
    fn binned_recovers_planted_effects() {
        // Noise dominates the planted effects so the upper-tail winsorization
        // stays effect-neutral, as in outcomes at production scale. Joint
        // coverage of three 95% intervals is checked across seeds.
        let mut joint_covered = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cells = synthetic_cells(&mut rng, 2_000, [0.0, 5.0, 10.0, 15.0], 25.0);
            let got =
                estimate_binned(&cells, Proxy::Footprint, &EstimationSettings::default()).unwrap();
            assert_eq!(got.bins.len(), 3);
            let all = [5.0, 10.0, 15.0].iter().zip(&got.bins).all(|(planted, bin)| {
                let (lo, hi) = bin.estimate.ci95;
                lo <= *planted && *planted <= hi
            });
            if all {
                joint_covered += 1;
            }
        }
        assert!(joint_covered >= 15, "joint coverage {joint_covered}/20");
    }

    #[test]
    fn binned_null_covers_zero_most_seeds() {
        // Each bin's 95% interval covers the true zero effect in at least
        // 90 of 100 seeded worlds.
        let mut covered = std::collections::HashMap::<String, usize>::new();
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cells = synthetic_cells(&mut rng, 1_500, [0.0; 4], 5.0);
            let got =
                estimate_binned(&cells, Proxy::Footprint, &EstimationSettings::default()).unwrap();
            for b in &got.bins {
                if b.estimate.ci95.0 <= 0.0 && 0.0 <= b.estimate.ci95.1 {
                    *covered.entry(b.label.clone()).or_insert(0) += 1;
                }
            }
        }
        for (label, n) in &covered {
            assert!(*n >= 90, "{label} covered {n}/100");
        }
        assert_eq!(covered.len(), 3);
    }

    #[test]
    fn empty_bin_dropped_with_warning() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cells: Vec<GridCellObservation> = (0..300)
            .map(|i| {
                let e = rng.gen_range(1..=2u32);
                let x = if rng.gen_bool(0.5) { 1.min(e) } else { 0 };
                cell_at(i, x, e, 20.0 + rng.gen::<f64>())
            })
            .collect();
        let got = estimate_binned(&cells, Proxy::Footprint, &EstimationSettings::default()).unwrap();
        assert_eq!(got.bins.len(), 1);
        assert_eq!(got.dropped_bins, vec!["x=2", "x=2+"]);
    }

    #[test]
    fn pooled_outcome_scaling_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cells = synthetic_cells(&mut rng, 800, [0.0, 4.0, 8.0, 12.0], 3.0);
        let base = estimate_pooled(&cells, Proxy::Footprint, &EstimationSettings::default()).unwrap();

        let mut doubled = cells.clone();
        for c in &mut doubled {
            c.y_footprint *= 2.0;
        }
        let twice =
            estimate_pooled(&doubled, Proxy::Footprint, &EstimationSettings::default()).unwrap();
        assert!((twice.coefficient - 2.0 * base.coefficient).abs() < 1e-9);
        assert!((twice.se - 2.0 * base.se).abs() < 1e-9);
        assert!((twice.ci95.0 - 2.0 * base.ci95.0).abs() < 1e-8);
        assert!((twice.p_value - base.p_value).abs() < 1e-9);
    }

    #[test]
    fn constant_x_is_rank_error() {
        let cells: Vec<GridCellObservation> =
            (0..100).map(|i| cell_at(i, 1, 1, 5.0 + i as f64)).collect();
        assert!(matches!(
            estimate_pooled(&cells, Proxy::Footprint, &EstimationSettings::default()),
            Err(EconError::RankDeficient { .. })
        ));
    }

}
