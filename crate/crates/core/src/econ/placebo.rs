//! Placebo randomization: re-draw the two-tier village assignment, recompute
//! placebo treatment intensity, and re-estimate the specification.
//!
//! Each draw assigns half of the village groups (floor on odd counts) to the
//! high-saturation tier, treats 2/3 of villages within high groups and 1/3
//! within low groups (counts rounded to the nearest village), and marks every
//! eligible household in a placebo-treated village as placebo-treated,
//! mirroring the original design. Eligibility, outcomes, and the retained
//! cell set never change across draws.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::conley::build_neighbor_index;
use super::effects::{
    binned_from_parts, pooled_from_parts, winsorized_outcome, BinnedEffects, EffectEstimate,
    EstimationSettings,
};
use super::EconError;
use crate::geo::cell_index;
use crate::ingest::{HouseholdRecord, VillageRecord};
use crate::measures::Proxy;
use crate::rasterize::GridCellObservation;

/// Village treatment fractions within the high- and low-saturation tiers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoTierScheme {
    pub treat_frac_high: f64,
    pub treat_frac_low: f64,
}

impl Default for TwoTierScheme {
    fn default() -> Self {
        Self {
            treat_frac_high: 2.0 / 3.0,
            treat_frac_low: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlaceboDraw {
    pub draw: usize,
    /// Aligned to `PlaceboRun::group_ids`.
    pub high_groups: Vec<bool>,
    /// Aligned to `PlaceboRun::village_ids`.
    pub treated_villages: Vec<bool>,
    pub pooled: EffectEstimate,
    pub binned: BinnedEffects,
}

#[derive(Debug, Clone)]
pub struct PlaceboRun {
    pub group_ids: Vec<String>,
    pub village_ids: Vec<String>,
    pub draws: Vec<PlaceboDraw>,
}

pub fn placebo_run(
    villages: &[VillageRecord],
    census: &[HouseholdRecord],
    cells: &[GridCellObservation],
    proxy: Proxy,
    scheme: &TwoTierScheme,
    settings: &EstimationSettings,
    n_sims: usize,
    seed: u64,
) -> Result<PlaceboRun, EconError> {
    if cells.is_empty() {
        return Err(EconError::EmptyOutcome);
    }
    for frac in [scheme.treat_frac_high, scheme.treat_frac_low] {
        if !(0.0..=1.0).contains(&frac) {
            return Err(EconError::Placebo(format!(
                "treatment fraction {frac} outside [0, 1]"
            )));
        }
    }

    // Deterministic village and group orderings.
    let mut village_order: Vec<usize> = (0..villages.len()).collect();
    village_order.sort_by(|&a, &b| villages[a].village_id.cmp(&villages[b].village_id));
    let village_ids: Vec<String> = village_order
        .iter()
        .map(|&i| villages[i].village_id.clone())
        .collect();
    let village_slot: std::collections::HashMap<&str, usize> = village_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let mut group_ids: Vec<String> = villages
        .iter()
        .map(|v| v.saturation_group_id.clone())
        .collect();
    group_ids.sort();
    group_ids.dedup();
    let group_slot: std::collections::HashMap<&str, usize> = group_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut villages_by_group: Vec<Vec<usize>> = vec![Vec::new(); group_ids.len()];
    for (slot, &vi) in village_order.iter().enumerate() {
        let g = group_slot[villages[vi].saturation_group_id.as_str()];
        villages_by_group[g].push(slot);
    }

    // Eligible households -> (retained cell slot, village slot), computed once.
    let res = cells[0].cell.res;
    let cell_slot: std::collections::HashMap<_, usize> =
        cells.iter().enumerate().map(|(i, c)| (c.cell, i)).collect();
    let mut eligible_households: Vec<(usize, usize)> = Vec::new();
    for hh in census.iter().filter(|h| h.eligible) {
        let Some(&vslot) = village_slot.get(hh.village_id.as_str()) else {
            return Err(EconError::Placebo(format!(
                "census household {:?} references village {:?} absent from the villages table",
                hh.household_id, hh.village_id
            )));
        };
        if let Some(&cslot) = cell_slot.get(&cell_index(hh.location, res)?) {
            eligible_households.push((cslot, vslot));
        }
    }

    // Shared, draw-invariant pieces.
    let y = winsorized_outcome(cells, proxy, settings.winsor_upper_pct)?;
    let e: Vec<u32> = cells.iter().map(|c| c.e).collect();
    let coords: Vec<_> = cells.iter().map(|c| c.centroid).collect();
    let index = build_neighbor_index(&coords, settings.conley_cutoff_m)?;

    let n_groups = group_ids.len();
    let n_high = n_groups / 2; // floor on odd counts

    let draws: Result<Vec<PlaceboDraw>, EconError> = (0..n_sims)
        .into_par_iter()
        .map(|draw| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(draw as u64 + 1);

            let mut group_order: Vec<usize> = (0..n_groups).collect();
            group_order.shuffle(&mut rng);
            let mut high_groups = vec![false; n_groups];
            for &g in group_order.iter().take(n_high) {
                high_groups[g] = true;
            }

            let mut treated_villages = vec![false; village_ids.len()];
            for (g, members) in villages_by_group.iter().enumerate() {
                let frac = if high_groups[g] {
                    scheme.treat_frac_high
                } else {
                    scheme.treat_frac_low
                };
                let mut order = members.clone();
                order.shuffle(&mut rng);
                let n_treat = (frac * members.len() as f64).round() as usize;
                for &slot in order.iter().take(n_treat) {
                    treated_villages[slot] = true;
                }
            }

            let mut x = vec![0u32; cells.len()];
            for &(cslot, vslot) in &eligible_households {
                if treated_villages[vslot] {
                    x[cslot] += 1;
                }
            }

            let pooled = pooled_from_parts(&y, &x, &e, &coords, settings, Some(&index))?;
            let binned = binned_from_parts(&y, &x, &e, &coords, settings, Some(&index))?;
            Ok(PlaceboDraw {
                draw,
                high_groups,
                treated_villages,
                pooled,
                binned,
            })
        })
        .collect();

    Ok(PlaceboRun {
        group_ids,
        village_ids,
        draws: draws?,
    })
}
