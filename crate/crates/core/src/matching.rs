//! Heuristic three-way linkage between buildings, census coordinates, and
//! survey records.
//!
//! Buildings attach to their nearest census coordinate within the match
//! radius (several buildings may share a household). Surveys attach the same
//! way, but a census coordinate keeps only its closest survey; exact distance
//! ties keep the lexicographically smaller survey key. Engel observations are
//! built only from census coordinates holding both sides.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::geo::{haversine_distance, GeoPoint};
use crate::ingest::{Arm, HouseholdRecord, IngestError, NightRaster, SurveyRecord};
use crate::measures::{Proxy, Welfare};
use crate::rasterize::{winsorize_by_group, RasterizeError, WinsorSpec};
use crate::roof::BuildingFeature;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("match radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("no Engel observations left after filter {0:?}")]
    EmptyAfterFilter(&'static str),
    #[error("winsorization: {0}")]
    Winsor(#[from] RasterizeError),
    #[error("night raster at census coordinate: {0}")]
    Night(#[from] IngestError),
    #[error("matched table {path}: {message}")]
    Table { path: String, message: String },
}

/// Uniform-grid spatial index for nearest-neighbor queries under a fixed
/// radius. Buckets are sized so any point within the query radius lies in the
/// 3x3 bucket neighborhood; candidates are then filtered by exact haversine
/// distance. Ties resolve to the lower point index.
pub struct SpatialIndex {
    points: Vec<GeoPoint>,
    buckets: HashMap<(i64, i64), Vec<u32>>,
    dlon: f64,
    dlat: f64,
    radius_m: f64,
}

const METERS_PER_DEG_LAT: f64 = 111_194.93; // pi * R / 180

impl SpatialIndex {
    pub fn build(points: Vec<GeoPoint>, radius_m: f64) -> Result<Self, MatchError> {
        if !(radius_m > 0.0) {
            return Err(MatchError::BadRadius(radius_m));
        }
        let max_abs_lat = points
            .iter()
            .map(|p| p.lat().abs())
            .fold(0.0f64, f64::max)
            .min(89.0);
        let dlat = radius_m / METERS_PER_DEG_LAT;
        let dlon = radius_m / (METERS_PER_DEG_LAT * max_abs_lat.to_radians().cos());
        let mut buckets: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            let key = ((p.lon() / dlon).floor() as i64, (p.lat() / dlat).floor() as i64);
            buckets.entry(key).or_default().push(i as u32);
        }
        Ok(Self {
            points,
            buckets,
            dlon,
            dlat,
            radius_m,
        })
    }

    /// Nearest indexed point within the radius, with its distance.
    pub fn nearest_within(&self, p: GeoPoint) -> Option<(usize, f64)> {
        let kc = (p.lon() / self.dlon).floor() as i64;
        let kr = (p.lat() / self.dlat).floor() as i64;
        let mut best: Option<(usize, f64)> = None;
        for dc in -1..=1 {
            for dr in -1..=1 {
                let Some(bucket) = self.buckets.get(&(kc + dc, kr + dr)) else {
                    continue;
                };
                for &i in bucket {
                    let d = haversine_distance(p, self.points[i as usize]);
                    if d > self.radius_m {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bi, bd)) => d < bd || (d == bd && (i as usize) < bi),
                    };
                    if better {
                        best = Some((i as usize, d));
                    }
                }
            }
        }
        best
    }
}

/// Building-side assignment: for each census index, the buildings whose
/// centroid resolves to it.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildingMatchSide {
    pub by_census: Vec<Vec<u32>>,
    pub matched: usize,
    pub unmatched: usize,
}

/// Survey-side assignment: at most one survey per census coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyMatchSide {
    pub by_census: Vec<Option<u32>>,
    pub matched: usize,
    pub unmatched_out_of_radius: usize,
    pub unmatched_lost_collision: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub buildings: BuildingMatchSide,
    pub survey: SurveyMatchSide,
}

/// Assign every building to its closest census coordinate if within
/// `radius_m` (strictly greater distances stay unmatched).
pub fn match_buildings_to_census(
    buildings: &[BuildingFeature],
    census: &[HouseholdRecord],
    radius_m: f64,
) -> Result<BuildingMatchSide, MatchError> {
    let index = SpatialIndex::build(census.iter().map(|h| h.location).collect(), radius_m)?;
    let assignments: Vec<Option<usize>> = buildings
        .par_iter()
        .map(|b| index.nearest_within(b.centroid).map(|(i, _)| i))
        .collect();

    let mut by_census = vec![Vec::new(); census.len()];
    let mut matched = 0;
    let mut unmatched = 0;
    for (bi, a) in assignments.iter().enumerate() {
        match a {
            Some(ci) => {
                by_census[*ci].push(bi as u32);
                matched += 1;
            }
            None => unmatched += 1,
        }
    }
    Ok(BuildingMatchSide {
        by_census,
        matched,
        unmatched,
    })
}

/// Assign each survey to its closest census coordinate within `radius_m`;
/// collisions keep the closest survey, exact ties the lexicographically
/// smaller survey key.
pub fn match_survey_to_census(
    survey: &[SurveyRecord],
    census: &[HouseholdRecord],
    radius_m: f64,
) -> Result<SurveyMatchSide, MatchError> {
    let index = SpatialIndex::build(census.iter().map(|h| h.location).collect(), radius_m)?;
    let assignments: Vec<Option<(usize, f64)>> = survey
        .par_iter()
        .map(|s| index.nearest_within(s.location))
        .collect();

    let mut by_census: Vec<Option<u32>> = vec![None; census.len()];
    let mut best_dist: Vec<f64> = vec![f64::INFINITY; census.len()];
    let mut unmatched_out_of_radius = 0;
    let mut unmatched_lost_collision = 0;
    for (si, a) in assignments.iter().enumerate() {
        let Some((ci, d)) = a else {
            unmatched_out_of_radius += 1;
            continue;
        };
        match by_census[*ci] {
            None => {
                by_census[*ci] = Some(si as u32);
                best_dist[*ci] = *d;
            }
            Some(prev) => {
                let keep_new = *d < best_dist[*ci]
                    || (*d == best_dist[*ci]
                        && survey[si].survey_id < survey[prev as usize].survey_id);
                if keep_new {
                    by_census[*ci] = Some(si as u32);
                    best_dist[*ci] = *d;
                }
                unmatched_lost_collision += 1;
            }
        }
    }
    let matched = by_census.iter().filter(|s| s.is_some()).count();
    Ok(SurveyMatchSide {
        by_census,
        matched,
        unmatched_out_of_radius,
        unmatched_lost_collision,
    })
}

/// One fully matched household: census coordinate with at least one building
/// and exactly one survey.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedRecord {
    pub census_id: String,
    pub survey_id: String,
    pub arm: Arm,
    pub is_renter: bool,
    pub n_buildings: usize,
    pub q_footprint: f64,
    pub q_tin: f64,
    pub q_night: f64,
    pub w_expenditure: f64,
    pub w_housing: f64,
    pub w_non_housing: f64,
    pub w_total: f64,
}

impl MatchedRecord {
    pub fn q(&self, proxy: Proxy) -> f64 {
        match proxy {
            Proxy::Footprint => self.q_footprint,
            Proxy::TinArea => self.q_tin,
            Proxy::NightLight => self.q_night,
        }
    }

    pub fn w(&self, welfare: Welfare) -> f64 {
        match welfare {
            Welfare::TotalAssets => self.w_total,
            Welfare::HousingAssets => self.w_housing,
            Welfare::NonHousingAssets => self.w_non_housing,
            Welfare::Expenditure => self.w_expenditure,
        }
    }
}

/// Join the two match sides into the audit table. Per-household building
/// metrics are sums over member buildings (in building index order); night
/// light is sampled at the census coordinate since it has no building
/// identity.
pub fn build_matched_table(
    census: &[HouseholdRecord],
    buildings: &[BuildingFeature],
    survey: &[SurveyRecord],
    night: &NightRaster,
    matches: &MatchResult,
) -> Result<Vec<MatchedRecord>, MatchError> {
    let mut out = Vec::new();
    for (ci, hh) in census.iter().enumerate() {
        let Some(si) = matches.survey.by_census[ci] else {
            continue;
        };
        let members = &matches.buildings.by_census[ci];
        if members.is_empty() {
            continue;
        }
        let s = &survey[si as usize];
        let mut q_footprint = 0.0;
        let mut q_tin = 0.0;
        for &bi in members {
            let b = &buildings[bi as usize];
            q_footprint += b.footprint_m2;
            if b.material == crate::roof::Material::Tin {
                q_tin += b.footprint_m2;
            }
        }
        out.push(MatchedRecord {
            census_id: hh.household_id.clone(),
            survey_id: s.survey_id.clone(),
            arm: s.arm,
            is_renter: s.is_renter,
            n_buildings: members.len(),
            q_footprint,
            q_tin,
            q_night: night.sample(hh.location)?,
            w_expenditure: s.annual_expenditure,
            w_housing: s.housing_assets,
            w_non_housing: s.non_housing_assets,
            w_total: s.total_assets,
        });
    }
    Ok(out)
}

/// One matched household ready for Engel fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct EngelObservation {
    pub household: String,
    pub w: f64,
    pub q: f64,
    pub arm: Arm,
}

/// Filters applied when building Engel observations. Welfare is winsorized
/// two-sided (debt outliers exist on the left), proxies upper-tail only; both
/// within the eligibility stratum (eligible arms pooled vs. ineligible).
#[derive(Debug, Clone, Copy)]
pub struct EngelFilters {
    pub exclude_renters: bool,
    pub welfare_winsor: WinsorSpec,
    pub proxy_winsor: WinsorSpec,
}

impl Default for EngelFilters {
    fn default() -> Self {
        Self {
            exclude_renters: true,
            welfare_winsor: WinsorSpec::two_sided(1.0, 99.0),
            proxy_winsor: WinsorSpec::upper(99.0),
        }
    }
}

pub fn build_engel_observations(
    table: &[MatchedRecord],
    proxy: Proxy,
    welfare: Welfare,
    filters: &EngelFilters,
) -> Result<Vec<EngelObservation>, MatchError> {
    if table.is_empty() {
        return Err(MatchError::EmptyAfterFilter("matched_triples"));
    }
    let rows: Vec<&MatchedRecord> = if filters.exclude_renters {
        table.iter().filter(|r| !r.is_renter).collect()
    } else {
        table.iter().collect()
    };
    if rows.is_empty() {
        return Err(MatchError::EmptyAfterFilter("exclude_renters"));
    }

    let strata: Vec<u8> = rows
        .iter()
        .map(|r| (r.arm == Arm::Ineligible) as u8)
        .collect();
    let w_raw: Vec<f64> = rows.iter().map(|r| r.w(welfare)).collect();
    let q_raw: Vec<f64> = rows.iter().map(|r| r.q(proxy)).collect();
    let w = winsorize_by_group(&w_raw, &strata, &filters.welfare_winsor)?;
    let q = winsorize_by_group(&q_raw, &strata, &filters.proxy_winsor)?;

    Ok(rows
        .iter()
        .zip(w.into_iter().zip(q))
        .map(|(r, (w, q))| EngelObservation {
            household: r.census_id.clone(),
            w,
            q,
            arm: r.arm,
        })
        .collect())
}

pub fn write_matched_table(table: &[MatchedRecord], path: &Path) -> Result<(), MatchError> {
    let err = |message: String| MatchError::Table {
        path: path.display().to_string(),
        message,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(e.to_string()))?;
    w.write_record([
        "census_id",
        "survey_id",
        "arm",
        "is_renter",
        "n_buildings",
        "q_footprint",
        "q_tin",
        "q_night",
        "w_expenditure",
        "w_housing",
        "w_non_housing",
        "w_total",
    ])
    .map_err(|e| err(e.to_string()))?;
    for r in table {
        w.write_record([
            r.census_id.clone(),
            r.survey_id.clone(),
            r.arm.as_str().to_string(),
            r.is_renter.to_string(),
            r.n_buildings.to_string(),
            r.q_footprint.to_string(),
            r.q_tin.to_string(),
            r.q_night.to_string(),
            r.w_expenditure.to_string(),
            r.w_housing.to_string(),
            r.w_non_housing.to_string(),
            r.w_total.to_string(),
        ])
        .map_err(|e| err(e.to_string()))?;
    }
    w.flush().map_err(|e| err(e.to_string()))
}

pub fn read_matched_table(path: &Path) -> Result<Vec<MatchedRecord>, MatchError> {
    let err = |message: String| MatchError::Table {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let f = |j: usize| -> Result<f64, MatchError> {
            rec[j]
                .parse()
                .map_err(|_| err(format!("row {}: bad number {:?}", i + 2, &rec[j])))
        };
        out.push(MatchedRecord {
            census_id: rec[0].to_string(),
            survey_id: rec[1].to_string(),
            arm: Arm::parse(&rec[2]).ok_or_else(|| err(format!("row {}: bad arm", i + 2)))?,
            is_renter: rec[3]
                .parse()
                .map_err(|_| err(format!("row {}: bad is_renter", i + 2)))?,
            n_buildings: rec[4]
                .parse()
                .map_err(|_| err(format!("row {}: bad n_buildings", i + 2)))?,
            q_footprint: f(5)?,
            q_tin: f(6)?,
            q_night: f(7)?,
            w_expenditure: f(8)?,
            w_housing: f(9)?,
            w_non_housing: f(10)?,
            w_total: f(11)?,
        });
    }
    Ok(out)
}
