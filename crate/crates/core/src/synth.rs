//! Synthetic-RCT world generator.
//!
//! Produces census, villages, survey, buildings, and night-raster files with
//! known ground-truth parameters, in exactly the formats the ingest stage
//! consumes. Treated households receive the planted wealth effect before any
//! downstream quantity is generated, so household footprint and tin area
//! respond to treatment only through wealth; `corrupt_tin_shift` adds the one
//! deliberate exception, a direct tin shift for the treatment arm that
//! violates the scaling assumption.
//!
//! Ground truth is returned to the caller and written wherever the caller
//! chooses; the pipeline never reads it.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use thiserror::Error;

use crate::geo::{GeoError, GeoPoint, PixelPolygon, TileGeoref, WEB_MERCATOR_M_PER_PX_Z0};
use crate::ingest::{self, BuildingFeatureRaw, IngestError};
use crate::kv::{KvDoc, KvError};

const METERS_PER_DEG: f64 = 111_194.93;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible config: {0}")]
    Infeasible(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

/// Linear relationship between wealth and a per-household quantity, with
/// Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngelParams {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_village_groups: usize,
    pub n_villages: usize,
    pub households_per_village_mean: f64,
    pub eligible_fraction: f64,
    pub treat_frac_high: f64,
    pub treat_frac_low: f64,
    /// Wealth is log-normal; treated households get `tau_w_star` added.
    pub wealth_log_mean: f64,
    pub wealth_log_sd: f64,
    pub ineligible_wealth_log_mean: f64,
    pub tau_w_star: f64,
    pub footprint: EngelParams,
    pub tin: EngelParams,
    /// Direct treatment-arm shift of tin area (the Engel violation); zero in
    /// clean worlds.
    pub corrupt_tin_shift: f64,
    /// Geography: study-area center, village lattice, household scatter.
    pub center_lon: f64,
    pub center_lat: f64,
    pub village_spacing_deg: f64,
    pub village_jitter_deg: f64,
    pub household_scatter_deg: f64,
    pub building_offset_m: f64,
    pub survey_gps_error_m: f64,
    pub n_survey_eligible: usize,
    pub n_survey_ineligible: usize,
    pub renters_treatment: usize,
    pub renters_control: usize,
    pub renters_ineligible: usize,
    pub n_gps_outliers: usize,
    pub n_gps_missing: usize,
    pub zoom: u32,
    /// Fraction of thatched roofs repainted (affects color only, not area).
    pub painted_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_village_groups: 68,
            n_villages: 653,
            households_per_village_mean: 100.0,
            eligible_fraction: 1.0 / 3.0,
            treat_frac_high: 2.0 / 3.0,
            treat_frac_low: 1.0 / 3.0,
            wealth_log_mean: 2_000.0f64.ln(),
            wealth_log_sd: 0.5,
            ineligible_wealth_log_mean: 3_200.0f64.ln(),
            tau_w_star: 0.0,
            footprint: EngelParams {
                alpha: 25.0,
                beta: 0.0186,
                sigma: 12.0,
            },
            tin: EngelParams {
                alpha: 2.0,
                beta: 0.012,
                sigma: 5.0,
            },
            corrupt_tin_shift: 0.0,
            center_lon: 34.2,
            center_lat: 0.0,
            village_spacing_deg: 0.017,
            village_jitter_deg: 0.004,
            household_scatter_deg: 0.002,
            building_offset_m: 10.0,
            survey_gps_error_m: 5.0,
            n_survey_eligible: 4_578,
            n_survey_ineligible: 1_821,
            renters_treatment: 31,
            renters_control: 32,
            renters_ineligible: 55,
            n_gps_outliers: 58,
            n_gps_missing: 4,
            zoom: 19,
            painted_fraction: 0.04,
        }
    }
}

impl SynthConfig {
    /// A smaller world with the same structure, for fast tests.
    pub fn small(seed: u64) -> Self {
        Self {
            seed,
            n_village_groups: 12,
            n_villages: 60,
            households_per_village_mean: 40.0,
            n_survey_eligible: 500,
            n_survey_ineligible: 160,
            renters_treatment: 4,
            renters_control: 4,
            renters_ineligible: 6,
            n_gps_outliers: 6,
            n_gps_missing: 2,
            ..Self::default()
        }
    }
}

/// File layout of a generated world.
#[derive(Debug, Clone)]
pub struct WorldPaths {
    pub census: PathBuf,
    pub villages: PathBuf,
    pub survey: PathBuf,
    pub buildings: PathBuf,
    pub night: PathBuf,
}

impl WorldPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            census: dir.join("census.csv"),
            villages: dir.join("villages.csv"),
            survey: dir.join("survey.csv"),
            buildings: dir.join("buildings.geojson"),
            night: dir.join("night.grid"),
        }
    }
}

/// Everything the acceptance oracle needs to score a pipeline run. Never read
/// by the pipeline itself.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub seed: u64,
    pub tau_w_star: f64,
    pub footprint: EngelParams,
    pub tin: EngelParams,
    pub implied_tau_q_footprint: f64,
    pub implied_tau_q_tin: f64,
    pub corrupt_tin_shift: f64,
    pub n_households: usize,
    pub n_eligible: usize,
    pub n_treated: usize,
    pub n_villages: usize,
    pub n_groups: usize,
    pub n_buildings: usize,
    pub n_survey: usize,
    pub injected_gps_outliers: usize,
    pub injected_gps_missing: usize,
    pub renters_treatment: usize,
    pub renters_control: usize,
    pub renters_ineligible: usize,
}

impl GroundTruth {
    pub fn to_doc(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("seed", self.seed);
        doc.set("tau_w_star", self.tau_w_star);
        doc.set("footprint.alpha", self.footprint.alpha);
        doc.set("footprint.beta", self.footprint.beta);
        doc.set("footprint.sigma", self.footprint.sigma);
        doc.set("tin.alpha", self.tin.alpha);
        doc.set("tin.beta", self.tin.beta);
        doc.set("tin.sigma", self.tin.sigma);
        doc.set("implied_tau_q_footprint", self.implied_tau_q_footprint);
        doc.set("implied_tau_q_tin", self.implied_tau_q_tin);
        doc.set("corrupt_tin_shift", self.corrupt_tin_shift);
        doc.set("n_households", self.n_households);
        doc.set("n_eligible", self.n_eligible);
        doc.set("n_treated", self.n_treated);
        doc.set("n_villages", self.n_villages);
        doc.set("n_groups", self.n_groups);
        doc.set("n_buildings", self.n_buildings);
        doc.set("n_survey", self.n_survey);
        doc.set("injected_gps_outliers", self.injected_gps_outliers);
        doc.set("injected_gps_missing", self.injected_gps_missing);
        doc.set("renters_treatment", self.renters_treatment);
        doc.set("renters_control", self.renters_control);
        doc.set("renters_ineligible", self.renters_ineligible);
        doc
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        Ok(self.to_doc().save(path)?)
    }
}

struct Household {
    id: String,
    village: usize,
    true_loc: (f64, f64),
    /// What the census file reports: true, outlier-corrupted, or missing.
    census_loc: Option<(f64, f64)>,
    eligible: bool,
    treated: bool,
    wealth: f64,
    footprint: f64,
    tin_area: f64,
}

fn validate(config: &SynthConfig) -> Result<(), SynthError> {
    let c = config;
    let fail = |msg: String| Err(SynthError::Infeasible(msg));
    if c.n_village_groups == 0 || c.n_villages < c.n_village_groups {
        return fail(format!(
            "need at least one village per group ({} villages, {} groups)",
            c.n_villages, c.n_village_groups
        ));
    }
    if !(c.eligible_fraction > 0.0 && c.eligible_fraction <= 1.0) {
        return fail(format!("eligible_fraction {} outside (0, 1]", c.eligible_fraction));
    }
    for (name, frac) in [
        ("treat_frac_high", c.treat_frac_high),
        ("treat_frac_low", c.treat_frac_low),
    ] {
        if !(0.0..=1.0).contains(&frac) {
            return fail(format!("{name} {frac} outside [0, 1]"));
        }
    }
    if c.households_per_village_mean <= 0.0 {
        return fail("households_per_village_mean must be positive".into());
    }
    if c.footprint.beta <= 0.0 {
        return fail("footprint.beta must be positive".into());
    }
    if c.corrupt_tin_shift < 0.0 {
        return fail("corrupt_tin_shift must be nonnegative".into());
    }
    Ok(())
}

/// Square pixel polygon of the given ground area, centered on its own tile.
/// One extra vertex sits exactly on an edge so the simplification stage has
/// something to remove without perturbing the area.
fn square_polygon(
    location: GeoPoint,
    area_m2: f64,
    zoom: u32,
    rng: &mut ChaCha8Rng,
) -> Result<PixelPolygon, GeoError> {
    let georef = TileGeoref {
        center: location,
        zoom,
        width_px: 640.0,
        height_px: 640.0,
    };
    let mpp_ground = (WEB_MERCATOR_M_PER_PX_Z0 / f64::powi(2.0, zoom as i32))
        * location.lat().to_radians().cos();
    let half = area_m2.sqrt() / mpp_ground / 2.0;
    let (cx, cy) = (320.0, 320.0);
    let mid = rng.gen_range(-0.9..0.9) * half;
    let ring = vec![
        [cx - half, cy - half],
        [cx + mid, cy - half], // collinear midpoint, removed by simplification
        [cx + half, cy - half],
        [cx + half, cy + half],
        [cx - half, cy + half],
    ];
    PixelPolygon::new(ring, georef)
}

fn offset_deg(base: (f64, f64), east_m: f64, north_m: f64) -> (f64, f64) {
    (
        base.0 + east_m / (METERS_PER_DEG * base.1.to_radians().cos()),
        base.1 + north_m / METERS_PER_DEG,
    )
}

/// Generate a world and write its five input files into `dir`.
pub fn generate_world(config: &SynthConfig, dir: &Path) -> Result<GroundTruth, SynthError> {
    validate(config)?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let paths = WorldPaths::in_dir(dir);
    std::fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.display().to_string(),
        source,
    })?;

    // Villages on a jittered lattice; consecutive villages share a group so
    // groups are geographically contiguous.
    let grid = (c.n_villages as f64).sqrt().ceil() as usize;
    let extent = grid as f64 * c.village_spacing_deg;
    let base_per_group = c.n_villages / c.n_village_groups;
    let groups_with_extra = c.n_villages % c.n_village_groups;

    let mut village_centers: Vec<(f64, f64)> = Vec::with_capacity(c.n_villages);
    let mut village_group: Vec<usize> = Vec::with_capacity(c.n_villages);
    {
        let mut g = 0usize;
        let mut in_group = 0usize;
        for v in 0..c.n_villages {
            let lon = c.center_lon - extent / 2.0
                + (v % grid) as f64 * c.village_spacing_deg
                + rng.gen_range(-c.village_jitter_deg..c.village_jitter_deg);
            let lat = c.center_lat - extent / 2.0
                + (v / grid) as f64 * c.village_spacing_deg
                + rng.gen_range(-c.village_jitter_deg..c.village_jitter_deg);
            village_centers.push((lon, lat));
            village_group.push(g);
            in_group += 1;
            let group_size = base_per_group + (g < groups_with_extra) as usize;
            if in_group == group_size {
                g += 1;
                in_group = 0;
            }
        }
    }

    // Two-tier treatment assignment at the village level.
    let n_high = c.n_village_groups / 2;
    let mut group_order: Vec<usize> = (0..c.n_village_groups).collect();
    group_order.shuffle(&mut rng);
    let mut group_high = vec![false; c.n_village_groups];
    for &g in group_order.iter().take(n_high) {
        group_high[g] = true;
    }
    let mut village_treated = vec![false; c.n_villages];
    for g in 0..c.n_village_groups {
        let members: Vec<usize> = (0..c.n_villages).filter(|&v| village_group[v] == g).collect();
        let frac = if group_high[g] {
            c.treat_frac_high
        } else {
            c.treat_frac_low
        };
        let mut order = members.clone();
        order.shuffle(&mut rng);
        let n_treat = (frac * members.len() as f64).round() as usize;
        for &v in order.iter().take(n_treat) {
            village_treated[v] = true;
        }
    }

    // Households.
    let poisson = Poisson::new(c.households_per_village_mean)
        .map_err(|e| SynthError::Infeasible(format!("household count distribution: {e}")))?;
    let scatter = Normal::new(0.0, c.household_scatter_deg).expect("scatter sd");
    let wealth_eligible = LogNormal::new(c.wealth_log_mean, c.wealth_log_sd).expect("lognormal");
    let wealth_ineligible =
        LogNormal::new(c.ineligible_wealth_log_mean, c.wealth_log_sd).expect("lognormal");
    let noise_f = Normal::new(0.0, c.footprint.sigma.max(1e-300)).expect("sigma");
    let noise_t = Normal::new(0.0, c.tin.sigma.max(1e-300)).expect("sigma");

    let mut households: Vec<Household> = Vec::new();
    for v in 0..c.n_villages {
        let n_hh = poisson.sample(&mut rng) as usize;
        let (vlon, vlat) = village_centers[v];
        for _ in 0..n_hh {
            let true_loc = (
                vlon + scatter.sample(&mut rng),
                vlat + scatter.sample(&mut rng),
            );
            let eligible = rng.gen_bool(c.eligible_fraction);
            let treated = eligible && village_treated[v];
            let base_wealth = if eligible {
                wealth_eligible.sample(&mut rng)
            } else {
                wealth_ineligible.sample(&mut rng)
            };
            let wealth = base_wealth + if treated { c.tau_w_star } else { 0.0 };

            let footprint = (c.footprint.alpha
                + c.footprint.beta * wealth
                + if c.footprint.sigma > 0.0 {
                    noise_f.sample(&mut rng)
                } else {
                    0.0
                })
            .max(5.0);
            let mut tin_area = (c.tin.alpha
                + c.tin.beta * wealth
                + if c.tin.sigma > 0.0 {
                    noise_t.sample(&mut rng)
                } else {
                    0.0
                })
            .clamp(0.0, footprint);
            if treated && c.corrupt_tin_shift > 0.0 {
                tin_area = (tin_area + c.corrupt_tin_shift).min(footprint);
            }

            households.push(Household {
                id: format!("hh{:07}", households.len()),
                village: v,
                true_loc,
                census_loc: Some(true_loc),
                eligible,
                treated,
                wealth,
                footprint,
                tin_area,
            });
        }
    }
    let n_households = households.len();
    if n_households < c.n_gps_outliers + c.n_gps_missing {
        return Err(SynthError::Infeasible(format!(
            "{} households cannot absorb {} corrupted coordinates",
            n_households,
            c.n_gps_outliers + c.n_gps_missing
        )));
    }

    // Inject GPS corruptions: distinct households, outliers strictly beyond
    // the 2 km imputation rule, then missing coordinates.
    let corrupt_idx =
        rand::seq::index::sample(&mut rng, n_households, c.n_gps_outliers + c.n_gps_missing)
            .into_vec();
    for (k, &i) in corrupt_idx.iter().enumerate() {
        let (vlon, vlat) = village_centers[households[i].village];
        if k < c.n_gps_outliers {
            let bearing = rng.gen_range(0.0..std::f64::consts::TAU);
            let dist = rng.gen_range(2_300.0..4_500.0);
            households[i].census_loc = Some(offset_deg(
                (vlon, vlat),
                dist * bearing.cos(),
                dist * bearing.sin(),
            ));
        } else {
            households[i].census_loc = None;
        }
    }

    // Buildings: a tin and/or a thatched structure per household, footprints
    // exactly matching the planted household quantities.
    let mut buildings: Vec<BuildingFeatureRaw> = Vec::new();
    let mut push_building = |rng: &mut ChaCha8Rng,
                             hh: &Household,
                             idx: &mut usize,
                             area: f64,
                             tin: bool,
                             painted: bool|
     -> Result<(), SynthError> {
        let east = rng.gen_range(-c.building_offset_m..c.building_offset_m);
        let north = rng.gen_range(-c.building_offset_m..c.building_offset_m);
        let (lon, lat) = offset_deg(hh.true_loc, east, north);
        let location = GeoPoint::new(lon, lat)?;
        let polygon = square_polygon(location, area, c.zoom, rng)?;
        let jitter = |rng: &mut ChaCha8Rng, base: f64, spread: f64| {
            (base + rng.gen_range(-spread..spread)).clamp(0.0, 255.0)
        };
        let mean_rgb = if tin {
            [
                jitter(rng, 205.0, 10.0),
                jitter(rng, 205.0, 10.0),
                jitter(rng, 208.0, 10.0),
            ]
        } else if painted {
            if rng.gen_bool(0.5) {
                [jitter(rng, 60.0, 10.0), jitter(rng, 140.0, 10.0), jitter(rng, 70.0, 10.0)]
            } else {
                [jitter(rng, 70.0, 10.0), jitter(rng, 90.0, 10.0), jitter(rng, 160.0, 10.0)]
            }
        } else {
            [
                jitter(rng, 120.0, 10.0),
                jitter(rng, 85.0, 8.0),
                jitter(rng, 55.0, 8.0),
            ]
        };
        buildings.push(BuildingFeatureRaw {
            id: format!("b{:07}", *idx),
            polygon,
            mean_rgb,
            confidence: Some(0.8 + 0.1 * rng.gen::<f64>()),
        });
        *idx += 1;
        Ok(())
    };

    let mut b_idx = 0usize;
    const MIN_STRUCTURE_M2: f64 = 2.0;
    for hh in &households {
        let tin = hh.tin_area;
        let rest = hh.footprint - tin;
        let painted = rng.gen_bool(c.painted_fraction);
        if tin >= MIN_STRUCTURE_M2 && rest >= MIN_STRUCTURE_M2 {
            push_building(&mut rng, hh, &mut b_idx, tin, true, false)?;
            push_building(&mut rng, hh, &mut b_idx, rest, false, painted)?;
        } else if tin >= MIN_STRUCTURE_M2 {
            push_building(&mut rng, hh, &mut b_idx, hh.footprint, true, false)?;
        } else {
            push_building(&mut rng, hh, &mut b_idx, hh.footprint, false, painted)?;
        }
    }

    // Survey sample: eligible households (both arms) plus an ineligible
    // comparison sample; renters flagged per arm.
    let eligible_idx: Vec<usize> = (0..n_households).filter(|&i| households[i].eligible).collect();
    let ineligible_idx: Vec<usize> =
        (0..n_households).filter(|&i| !households[i].eligible).collect();
    let n_se = c.n_survey_eligible.min(eligible_idx.len());
    let n_si = c.n_survey_ineligible.min(ineligible_idx.len());
    let mut survey_members: Vec<usize> =
        rand::seq::index::sample(&mut rng, eligible_idx.len(), n_se)
            .into_iter()
            .map(|k| eligible_idx[k])
            .collect();
    survey_members.extend(
        rand::seq::index::sample(&mut rng, ineligible_idx.len(), n_si)
            .into_iter()
            .map(|k| ineligible_idx[k]),
    );
    survey_members.sort_unstable();

    // Renter flags: the last k sampled per arm.
    let mut renter_flags = vec![false; survey_members.len()];
    for (arm_flag, quota) in [
        ("treatment", c.renters_treatment),
        ("control", c.renters_control),
        ("ineligible", c.renters_ineligible),
    ] {
        let mut remaining = quota;
        for (slot, &i) in survey_members.iter().enumerate().rev() {
            if remaining == 0 {
                break;
            }
            let hh = &households[i];
            let arm = if hh.treated {
                "treatment"
            } else if hh.eligible {
                "control"
            } else {
                "ineligible"
            };
            if arm == arm_flag && !renter_flags[slot] {
                renter_flags[slot] = true;
                remaining -= 1;
            }
        }
    }

    // Write villages.csv.
    {
        let mut w = csv::Writer::from_path(&paths.villages).map_err(csv_err(&paths.villages))?;
        w.write_record(["village_id", "lon", "lat", "group_id"])
            .map_err(csv_err(&paths.villages))?;
        for v in 0..c.n_villages {
            w.write_record([
                format!("v{v:04}"),
                village_centers[v].0.to_string(),
                village_centers[v].1.to_string(),
                format!("g{:03}", village_group[v]),
            ])
            .map_err(csv_err(&paths.villages))?;
        }
        w.flush().map_err(io_err(&paths.villages))?;
    }

    // Write census.csv.
    {
        let mut w = csv::Writer::from_path(&paths.census).map_err(csv_err(&paths.census))?;
        w.write_record(["household_id", "village_id", "lon", "lat", "eligible", "treated"])
            .map_err(csv_err(&paths.census))?;
        for hh in &households {
            let (lon, lat) = match hh.census_loc {
                Some((lon, lat)) => (lon.to_string(), lat.to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([
                hh.id.clone(),
                format!("v{:04}", hh.village),
                lon,
                lat,
                hh.eligible.to_string(),
                hh.treated.to_string(),
            ])
            .map_err(csv_err(&paths.census))?;
        }
        w.flush().map_err(io_err(&paths.census))?;
    }

    // Write survey.csv. Wealth decomposes into housing and non-housing
    // shares; renters hold no housing assets. Expenditure is a noisy share of
    // wealth.
    {
        let mut w = csv::Writer::from_path(&paths.survey).map_err(csv_err(&paths.survey))?;
        w.write_record([
            "survey_id",
            "lon",
            "lat",
            "annual_expenditure",
            "housing_assets",
            "non_housing_assets",
            "total_assets",
            "is_renter",
            "arm",
        ])
        .map_err(csv_err(&paths.survey))?;
        for (slot, &i) in survey_members.iter().enumerate() {
            let hh = &households[i];
            let east = rng.gen_range(-c.survey_gps_error_m..=c.survey_gps_error_m);
            let north = rng.gen_range(-c.survey_gps_error_m..=c.survey_gps_error_m);
            let (lon, lat) = offset_deg(hh.true_loc, east, north);
            let arm = if hh.treated {
                "treatment"
            } else if hh.eligible {
                "control"
            } else {
                "ineligible"
            };
            let is_renter = renter_flags[slot];
            let housing_share = if is_renter { 0.0 } else { rng.gen_range(0.25..0.5) };
            let housing = housing_share * hh.wealth;
            let non_housing = hh.wealth - housing;
            let expenditure = 0.55 * hh.wealth * (rng.gen_range(-0.1..0.1f64)).exp();
            w.write_record([
                format!("s{slot:06}"),
                lon.to_string(),
                lat.to_string(),
                expenditure.to_string(),
                housing.to_string(),
                non_housing.to_string(),
                hh.wealth.to_string(),
                is_renter.to_string(),
                arm.to_string(),
            ])
            .map_err(csv_err(&paths.survey))?;
        }
        w.flush().map_err(io_err(&paths.survey))?;
    }

    ingest::write_buildings(&buildings, &paths.buildings)?;
    write_night_grid(c, extent, &paths.night)?;

    let n_eligible = households.iter().filter(|h| h.eligible).count();
    let n_treated = households.iter().filter(|h| h.treated).count();
    Ok(GroundTruth {
        seed: c.seed,
        tau_w_star: c.tau_w_star,
        footprint: c.footprint,
        tin: c.tin,
        implied_tau_q_footprint: c.footprint.beta * c.tau_w_star,
        implied_tau_q_tin: c.tin.beta * c.tau_w_star,
        corrupt_tin_shift: c.corrupt_tin_shift,
        n_households,
        n_eligible,
        n_treated,
        n_villages: c.n_villages,
        n_groups: c.n_village_groups,
        n_buildings: buildings.len(),
        n_survey: survey_members.len(),
        injected_gps_outliers: c.n_gps_outliers,
        injected_gps_missing: c.n_gps_missing,
        renters_treatment: c.renters_treatment,
        renters_control: c.renters_control,
        renters_ineligible: c.renters_ineligible,
    })
}

/// Same world with a direct tin-area shift for the treatment arm.
pub fn corrupt_engel(
    config: &SynthConfig,
    shift: f64,
    dir: &Path,
) -> Result<GroundTruth, SynthError> {
    let mut c = config.clone();
    c.corrupt_tin_shift = shift;
    generate_world(&c, dir)
}

/// VIIRS-like monthly night-light grid: a smooth base with a few fixed town
/// bumps and seasonal noise, independent of treatment. A sparse deterministic
/// pattern of nodata cells exercises the averaging rules without ever
/// blanking a cell in every layer.
fn write_night_grid(c: &SynthConfig, extent: f64, path: &Path) -> Result<(), SynthError> {
    let res = 1.0 / 240.0; // 15 arc seconds
    let margin = 0.05;
    let xll = c.center_lon - extent / 2.0 - margin;
    let yll = c.center_lat - extent / 2.0 - margin;
    let span = extent + 2.0 * margin;
    let ncols = (span / res).ceil() as usize + 1;
    let nrows = (span / res).ceil() as usize + 1;
    let nlayers = 12;
    let nodata = -9999.0;

    let towns = [
        (c.center_lon - extent * 0.2, c.center_lat - extent * 0.1, 6.0),
        (c.center_lon + extent * 0.25, c.center_lat + extent * 0.2, 9.0),
        (c.center_lon + extent * 0.05, c.center_lat - extent * 0.3, 4.0),
    ];
    let sigma = 0.02;

    let mut out = String::with_capacity(nlayers * nrows * ncols * 8);
    use std::fmt::Write as _;
    let _ = writeln!(out, "ncols {ncols}");
    let _ = writeln!(out, "nrows {nrows}");
    let _ = writeln!(out, "xllcorner {xll}");
    let _ = writeln!(out, "yllcorner {yll}");
    let _ = writeln!(out, "cellsize {res}");
    let _ = writeln!(out, "NODATA_value {nodata}");
    let _ = writeln!(out, "nlayers {nlayers}");
    for layer in 0..nlayers {
        let seasonal = 0.05 * (layer as f64 / nlayers as f64 * std::f64::consts::TAU).sin();
        for file_row in 0..nrows {
            let row = nrows - 1 - file_row; // file rows run north to south
            let lat = yll + (row as f64 + 0.5) * res;
            for col in 0..ncols {
                if col > 0 {
                    out.push(' ');
                }
                if (col * 31 + row * 17 + layer * 7) % 97 == 0 {
                    let _ = write!(out, "{nodata}");
                    continue;
                }
                let lon = xll + (col as f64 + 0.5) * res;
                let mut v = 0.3 + seasonal;
                for &(tx, ty, amp) in &towns {
                    let d2 = (lon - tx).powi(2) + (lat - ty).powi(2);
                    v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> SynthError + '_ {
    move |e| SynthError::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::Other, e),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{
        load_buildings, load_census, load_night_raster, load_survey, load_villages,
        CensusColumns, SurveyColumns, VillageColumns, GPS_OUTLIER_M,
    };

    fn tiny() -> SynthConfig {
        SynthConfig {
            n_village_groups: 4,
            n_villages: 12,
            households_per_village_mean: 25.0,
            n_survey_eligible: 60,
            n_survey_ineligible: 20,
            renters_treatment: 2,
            renters_control: 2,
            renters_ineligible: 2,
            n_gps_outliers: 5,
            n_gps_missing: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { seed: 9, ..tiny() };
        let t1 = generate_world(&cfg, dir1.path()).unwrap();
        let t2 = generate_world(&cfg, dir2.path()).unwrap();
        assert_eq!(t1, t2);
        for name in ["census.csv", "villages.csv", "survey.csv", "buildings.geojson", "night.grid"]
        {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn corrupt_shift_zero_matches_clean_world() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { seed: 4, ..tiny() };
        generate_world(&cfg, dir1.path()).unwrap();
        corrupt_engel(&cfg, 0.0, dir2.path()).unwrap();
        let a = std::fs::read(dir1.path().join("buildings.geojson")).unwrap();
        let b = std::fs::read(dir2.path().join("buildings.geojson")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn world_round_trips_through_ingest_with_planted_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { seed: 31, ..tiny() };
        let truth = generate_world(&cfg, dir.path()).unwrap();
        let paths = WorldPaths::in_dir(dir.path());

        let villages = load_villages(&paths.villages, &VillageColumns::default()).unwrap();
        assert_eq!(villages.len(), truth.n_villages);

        let (census, report) =
            load_census(&paths.census, &villages, &CensusColumns::default(), GPS_OUTLIER_M)
                .unwrap();
        assert_eq!(census.len(), truth.n_households);
        assert!(report.skipped.is_empty());
        assert_eq!(report.count("imputed_outlier"), truth.injected_gps_outliers);
        assert_eq!(report.count("imputed_missing"), truth.injected_gps_missing);
        assert_eq!(report.count("treated"), truth.n_treated);
        assert_eq!(report.count("eligible"), truth.n_eligible);
        // After imputation nothing is farther than the rule.
        for hh in &census {
            let v = villages
                .iter()
                .find(|v| v.village_id == hh.village_id)
                .unwrap();
            let d = crate::geo::haversine_distance(hh.location, v.centroid);
            assert!(hh.location_imputed || d <= GPS_OUTLIER_M);
        }

        let (survey, sreport) =
            load_survey(&paths.survey, &SurveyColumns::default(), 0.01).unwrap();
        assert_eq!(survey.len(), truth.n_survey);
        assert!(sreport.skipped.is_empty());
        assert_eq!(
            sreport.count("renters"),
            truth.renters_treatment + truth.renters_control + truth.renters_ineligible
        );

        let (buildings, breport) = load_buildings(&paths.buildings).unwrap();
        assert_eq!(buildings.len(), truth.n_buildings);
        assert!(breport.skipped.is_empty());

        let night = load_night_raster(&paths.night).unwrap();
        for v in &villages {
            assert!(night.sample(v.centroid).is_ok());
        }
    }

    #[test]
    fn treatment_structure_matches_two_tier_scheme() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { seed: 8, ..tiny() };
        generate_world(&cfg, dir.path()).unwrap();
        let paths = WorldPaths::in_dir(dir.path());
        let villages = load_villages(&paths.villages, &VillageColumns::default()).unwrap();
        let (census, _) =
            load_census(&paths.census, &villages, &CensusColumns::default(), GPS_OUTLIER_M)
                .unwrap();

        // treated implies eligible, and treatment is village-level.
        let mut treated_villages = std::collections::HashSet::new();
        let mut control_villages = std::collections::HashSet::new();
        for hh in &census {
            assert!(!hh.treated || hh.eligible);
            if hh.eligible {
                if hh.treated {
                    treated_villages.insert(hh.village_id.clone());
                } else {
                    control_villages.insert(hh.village_id.clone());
                }
            }
        }
        assert!(treated_villages.is_disjoint(&control_villages));

        // Realized per-group treated fractions are within one village of the
        // 2/3 and 1/3 targets.
        let mut by_group: std::collections::HashMap<String, (usize, usize)> =
            std::collections::HashMap::new();
        for v in &villages {
            let e = by_group.entry(v.saturation_group_id.clone()).or_default();
            e.1 += 1;
            if treated_villages.contains(&v.village_id) {
                e.0 += 1;
            }
        }
        for (g, (treated, total)) in &by_group {
            let t = *treated as f64;
            let n = *total as f64;
            let near_high = (t - n * 2.0 / 3.0).abs() <= 1.0;
            let near_low = (t - n / 3.0).abs() <= 1.0;
            assert!(near_high || near_low, "group {g}: {treated}/{total}");
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.eligible_fraction = 0.0;
        assert!(matches!(
            generate_world(&cfg, dir.path()),
            Err(SynthError::Infeasible(_))
        ));
        let mut cfg = tiny();
        cfg.n_villages = 2;
        cfg.n_village_groups = 4;
        assert!(matches!(
            generate_world(&cfg, dir.path()),
            Err(SynthError::Infeasible(_))
        ));
    }
}
