//! Parse, validate, and repair the four input datasets.
//!
//! Census, villages, and the endline survey are CSV with config-declared
//! column names; buildings are a GeoJSON-style feature collection (pixel
//! space with a tile georeference, or directly in degrees); night light is an
//! ASCII-grid raster with optional monthly layers. Inputs are never mutated:
//! every repair (GPS imputation, skipped row, dropped feature) lands in an
//! `IngestReport` with row identifiers.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, GeoPoint, PixelPolygon, TileGeoref};

/// Households farther than this from their village centroid get the centroid
/// imputed (GPS device error rule).
pub const GPS_OUTLIER_M: f64 = 2_000.0;

/// Default ceiling on the fraction of malformed rows before a load is
/// considered failed.
pub const DEFAULT_SKIP_THRESHOLD: f64 = 0.001;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: String, column: String },
    #[error("{path}: {count} rows reference unknown villages (first: row {first_row} -> {first_village:?})")]
    UnknownVillages {
        path: String,
        count: usize,
        first_row: usize,
        first_village: String,
    },
    #[error("{0}: duplicate village id {1:?}")]
    DuplicateVillage(String, String),
    #[error("{path}: invalid GeoJSON: {message}")]
    Json { path: String, message: String },
    #[error("{path}: raster header: {message}")]
    RasterHeader { path: String, message: String },
    #[error("{path}: raster data: expected {expected} values, found {found}")]
    RasterShape {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("point ({lon}, {lat}) outside raster extent")]
    OutsideRaster { lon: f64, lat: f64 },
    #[error("raster cell ({col}, {row}) has no data in any layer")]
    AllNoData { col: usize, row: usize },
}

/// One census row.
#[derive(Debug, Clone)]
pub struct HouseholdRecord {
    pub household_id: String,
    pub village_id: String,
    pub location: GeoPoint,
    pub eligible: bool,
    pub treated: bool,
    pub location_imputed: bool,
}

#[derive(Debug, Clone)]
pub struct VillageRecord {
    pub village_id: String,
    pub centroid: GeoPoint,
    pub saturation_group_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Treatment,
    Control,
    Ineligible,
}

impl Arm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arm::Treatment => "treatment",
            Arm::Control => "control",
            Arm::Ineligible => "ineligible",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "treatment" => Some(Arm::Treatment),
            "control" => Some(Arm::Control),
            "ineligible" => Some(Arm::Ineligible),
            _ => None,
        }
    }
}

/// One endline survey row. Currency fields are USD PPP; negatives allowed
/// (net debt).
#[derive(Debug, Clone)]
pub struct SurveyRecord {
    pub survey_id: String,
    pub location: GeoPoint,
    pub annual_expenditure: f64,
    pub housing_assets: f64,
    pub non_housing_assets: f64,
    pub total_assets: f64,
    pub is_renter: bool,
    pub arm: Arm,
}

/// A building prediction before enrichment.
#[derive(Debug, Clone)]
pub struct BuildingFeatureRaw {
    pub id: String,
    pub polygon: PixelPolygon,
    pub mean_rgb: [f64; 3],
    pub confidence: Option<f64>,
}

/// Repairs and skips recorded during one load.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub source: String,
    pub rows_total: usize,
    pub rows_used: usize,
    pub skipped: Vec<(usize, String)>,
    pub tallies: BTreeMap<String, usize>,
}

impl IngestReport {
    fn new(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            ..Default::default()
        }
    }

    fn skip(&mut self, row: usize, reason: impl Into<String>) {
        self.skipped.push((row, reason.into()));
    }

    pub fn tally(&mut self, key: &str, n: usize) {
        *self.tallies.entry(key.to_string()).or_insert(0) += n;
    }

    pub fn count(&self, key: &str) -> usize {
        self.tallies.get(key).copied().unwrap_or(0)
    }

    pub fn skip_fraction(&self) -> f64 {
        if self.rows_total == 0 {
            0.0
        } else {
            self.skipped.len() as f64 / self.rows_total as f64
        }
    }

    /// True when the malformed-row fraction is above the configured ceiling.
    pub fn exceeds_threshold(&self, threshold: f64) -> bool {
        self.skip_fraction() > threshold
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "source = {}", self.source);
        let _ = writeln!(out, "rows_total = {}", self.rows_total);
        let _ = writeln!(out, "rows_used = {}", self.rows_used);
        let _ = writeln!(out, "rows_skipped = {}", self.skipped.len());
        for (k, v) in &self.tallies {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (row, reason) in self.skipped.iter().take(50) {
            let _ = writeln!(out, "skipped_row = {row}: {reason}");
        }
        if self.skipped.len() > 50 {
            let _ = writeln!(out, "skipped_row = ... {} more", self.skipped.len() - 50);
        }
        out
    }
}

/// Column-name mappings; the field survey schema is site-specific, so header
/// names come from the run config rather than being hard-coded.
#[derive(Debug, Clone)]
pub struct CensusColumns {
    pub household_id: String,
    pub village_id: String,
    pub lon: String,
    pub lat: String,
    pub eligible: String,
    pub treated: String,
}

impl Default for CensusColumns {
    fn default() -> Self {
        Self {
            household_id: "household_id".into(),
            village_id: "village_id".into(),
            lon: "lon".into(),
            lat: "lat".into(),
            eligible: "eligible".into(),
            treated: "treated".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VillageColumns {
    pub village_id: String,
    pub lon: String,
    pub lat: String,
    pub group_id: String,
}

impl Default for VillageColumns {
    fn default() -> Self {
        Self {
            village_id: "village_id".into(),
            lon: "lon".into(),
            lat: "lat".into(),
            group_id: "group_id".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurveyColumns {
    pub survey_id: String,
    pub lon: String,
    pub lat: String,
    pub annual_expenditure: String,
    pub housing_assets: String,
    pub non_housing_assets: String,
    pub total_assets: String,
    pub is_renter: String,
    pub arm: String,
}

impl Default for SurveyColumns {
    fn default() -> Self {
        Self {
            survey_id: "survey_id".into(),
            lon: "lon".into(),
            lat: "lat".into(),
            annual_expenditure: "annual_expenditure".into(),
            housing_assets: "housing_assets".into(),
            non_housing_assets: "non_housing_assets".into(),
            total_assets: "total_assets".into(),
            is_renter: "is_renter".into(),
            arm: "arm".into(),
        }
    }
}

struct HeaderIndex {
    map: HashMap<String, usize>,
    path: String,
}

impl HeaderIndex {
    fn new(headers: &csv::StringRecord, path: &str) -> Self {
        let map = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_string(), i))
            .collect();
        Self {
            map,
            path: path.to_string(),
        }
    }

    fn col(&self, name: &str) -> Result<usize, IngestError> {
        self.map.get(name).copied().ok_or_else(|| IngestError::MissingColumn {
            path: self.path.clone(),
            column: name.to_string(),
        })
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>, IngestError> {
    csv::Reader::from_path(path).map_err(|source| IngestError::Csv {
        path: path.display().to_string(),
        source,
    })
}

fn parse_bool(raw: &str) -> Option<bool> {
    match raw.trim() {
        "true" | "1" | "TRUE" | "True" => Some(true),
        "false" | "0" | "FALSE" | "False" => Some(false),
        _ => None,
    }
}

pub fn load_villages(
    path: &Path,
    cols: &VillageColumns,
) -> Result<Vec<VillageRecord>, IngestError> {
    let mut reader = open_csv(path)?;
    let path_s = path.display().to_string();
    let headers = reader
        .headers()
        .map_err(|source| IngestError::Csv {
            path: path_s.clone(),
            source,
        })?
        .clone();
    let idx = HeaderIndex::new(&headers, &path_s);
    let (c_id, c_lon, c_lat, c_grp) = (
        idx.col(&cols.village_id)?,
        idx.col(&cols.lon)?,
        idx.col(&cols.lat)?,
        idx.col(&cols.group_id)?,
    );

    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|source| IngestError::Csv {
            path: path_s.clone(),
            source,
        })?;
        let id = rec[c_id].to_string();
        if seen.insert(id.clone(), i).is_some() {
            return Err(IngestError::DuplicateVillage(path_s, id));
        }
        let lon: f64 = rec[c_lon].parse().map_err(|_| IngestError::RasterHeader {
            path: path_s.clone(),
            message: format!("village row {}: bad longitude {:?}", i + 2, &rec[c_lon]),
        })?;
        let lat: f64 = rec[c_lat].parse().map_err(|_| IngestError::RasterHeader {
            path: path_s.clone(),
            message: format!("village row {}: bad latitude {:?}", i + 2, &rec[c_lat]),
        })?;
        let centroid = GeoPoint::new(lon, lat).map_err(|e| IngestError::RasterHeader {
            path: path_s.clone(),
            message: format!("village row {}: {e}", i + 2),
        })?;
        out.push(VillageRecord {
            village_id: id,
            centroid,
            saturation_group_id: rec[c_grp].to_string(),
        });
    }
    Ok(out)
}

/// Load the census, imputing village centroids for missing GPS coordinates
/// and for households strictly farther than `outlier_m` from their village
/// centroid. Unknown village ids are a hard error; malformed rows are skipped
/// and reported.
pub fn load_census(
    path: &Path,
    villages: &[VillageRecord],
    cols: &CensusColumns,
    outlier_m: f64,
) -> Result<(Vec<HouseholdRecord>, IngestReport), IngestError> {
    let mut reader = open_csv(path)?;
    let path_s = path.display().to_string();
    let headers = reader
        .headers()
        .map_err(|source| IngestError::Csv {
            path: path_s.clone(),
            source,
        })?
        .clone();
    let idx = HeaderIndex::new(&headers, &path_s);
    let c_hh = idx.col(&cols.household_id)?;
    let c_vid = idx.col(&cols.village_id)?;
    let c_lon = idx.col(&cols.lon)?;
    let c_lat = idx.col(&cols.lat)?;
    let c_eli = idx.col(&cols.eligible)?;
    let c_trt = idx.col(&cols.treated)?;

    let village_by_id: HashMap<&str, &VillageRecord> =
        villages.iter().map(|v| (v.village_id.as_str(), v)).collect();

    let mut report = IngestReport::new(format!("census:{path_s}"));
    let mut unknown: Vec<(usize, String)> = Vec::new();
    let mut seen_ids: HashMap<String, ()> = HashMap::new();
    let mut out = Vec::new();

    for (i, rec) in reader.records().enumerate() {
        let row = i + 2; // 1-based, header is row 1
        report.rows_total += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                report.skip(row, format!("unreadable row: {e}"));
                continue;
            }
        };
        let household_id = rec[c_hh].to_string();
        if household_id.is_empty() {
            report.skip(row, "empty household_id");
            continue;
        }
        if seen_ids.insert(household_id.clone(), ()).is_some() {
            report.skip(row, format!("duplicate household_id {household_id:?}"));
            continue;
        }
        let village_id = rec[c_vid].to_string();
        let Some(village) = village_by_id.get(village_id.as_str()) else {
            unknown.push((row, village_id));
            continue;
        };
        let (Some(eligible), Some(treated)) = (parse_bool(&rec[c_eli]), parse_bool(&rec[c_trt]))
        else {
            report.skip(row, "unparseable eligible/treated flag");
            continue;
        };
        if treated && !eligible {
            report.skip(row, "treated household marked ineligible");
            continue;
        }

        let lon_raw = rec[c_lon].trim();
        let lat_raw = rec[c_lat].trim();
        let parsed = if lon_raw.is_empty() || lat_raw.is_empty() {
            None
        } else {
            match (lon_raw.parse::<f64>(), lat_raw.parse::<f64>()) {
                (Ok(lon), Ok(lat)) => match GeoPoint::new(lon, lat) {
                    Ok(p) => Some(p),
                    Err(_) => {
                        report.skip(row, format!("coordinate out of range ({lon}, {lat})"));
                        continue;
                    }
                },
                _ => {
                    report.skip(row, "unparseable coordinate");
                    continue;
                }
            }
        };

        let (location, imputed) = match parsed {
            None => {
                report.tally("imputed_missing", 1);
                (village.centroid, true)
            }
            Some(p) => {
                if geo::haversine_distance(p, village.centroid) > outlier_m {
                    report.tally("imputed_outlier", 1);
                    (village.centroid, true)
                } else {
                    (p, false)
                }
            }
        };

        if eligible {
            report.tally("eligible", 1);
        }
        if treated {
            report.tally("treated", 1);
        }
        out.push(HouseholdRecord {
            household_id,
            village_id,
            location,
            eligible,
            treated,
            location_imputed: imputed,
        });
    }

    if !unknown.is_empty() {
        let (first_row, first_village) = unknown[0].clone();
        return Err(IngestError::UnknownVillages {
            path: path_s,
            count: unknown.len(),
            first_row,
            first_village,
        });
    }
    report.rows_used = out.len();
    Ok((out, report))
}

/// Load the endline survey. Renters are flagged, not dropped; the exclusion
/// is applied downstream where Engel observations are built.
pub fn load_survey(
    path: &Path,
    cols: &SurveyColumns,
    assets_tolerance: f64,
) -> Result<(Vec<SurveyRecord>, IngestReport), IngestError> {
    let mut reader = open_csv(path)?;
    let path_s = path.display().to_string();
    let headers = reader
        .headers()
        .map_err(|source| IngestError::Csv {
            path: path_s.clone(),
            source,
        })?
        .clone();
    let idx = HeaderIndex::new(&headers, &path_s);
    let c_id = idx.col(&cols.survey_id)?;
    let c_lon = idx.col(&cols.lon)?;
    let c_lat = idx.col(&cols.lat)?;
    let c_exp = idx.col(&cols.annual_expenditure)?;
    let c_ha = idx.col(&cols.housing_assets)?;
    let c_na = idx.col(&cols.non_housing_assets)?;
    let c_ta = idx.col(&cols.total_assets)?;
    let c_rent = idx.col(&cols.is_renter)?;
    let c_arm = idx.col(&cols.arm)?;

    let mut report = IngestReport::new(format!("survey:{path_s}"));
    let mut out = Vec::new();

    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        report.rows_total += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                report.skip(row, format!("unreadable row: {e}"));
                continue;
            }
        };

        let mut currency = |col: usize, name: &str| -> Option<f64> {
            match rec[col].trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Some(v),
                _ => {
                    report.skip(row, format!("unparseable currency field {name}"));
                    None
                }
            }
        };
        let Some(expenditure) = currency(c_exp, "annual_expenditure") else {
            continue;
        };
        let Some(housing) = currency(c_ha, "housing_assets") else {
            continue;
        };
        let Some(non_housing) = currency(c_na, "non_housing_assets") else {
            continue;
        };
        let Some(total) = currency(c_ta, "total_assets") else {
            continue;
        };
        if (total - (housing + non_housing)).abs() > assets_tolerance {
            report.skip(
                row,
                format!(
                    "total_assets {total} != housing {housing} + non_housing {non_housing} (tolerance {assets_tolerance})"
                ),
            );
            continue;
        }
        let (lon, lat) = match (rec[c_lon].parse::<f64>(), rec[c_lat].parse::<f64>()) {
            (Ok(lon), Ok(lat)) => (lon, lat),
            _ => {
                report.skip(row, "unparseable coordinate");
                continue;
            }
        };
        let Ok(location) = GeoPoint::new(lon, lat) else {
            report.skip(row, format!("coordinate out of range ({lon}, {lat})"));
            continue;
        };
        let Some(is_renter) = parse_bool(&rec[c_rent]) else {
            report.skip(row, "unparseable renter flag");
            continue;
        };
        let Some(arm) = Arm::parse(rec[c_arm].trim()) else {
            report.skip(row, format!("unknown arm {:?}", &rec[c_arm]));
            continue;
        };

        report.tally(&format!("arm_{}", arm.as_str()), 1);
        if is_renter {
            report.tally("renters", 1);
        }
        out.push(SurveyRecord {
            survey_id: rec[c_id].to_string(),
            location,
            annual_expenditure: expenditure,
            housing_assets: housing,
            non_housing_assets: non_housing,
            total_assets: total,
            is_renter,
            arm,
        });
    }
    report.rows_used = out.len();
    Ok((out, report))
}

// GeoJSON-style feature collection for buildings.

#[derive(Debug, Serialize, Deserialize)]
struct GjCollection {
    #[serde(rename = "type")]
    kind: String,
    features: Vec<GjFeature>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GjFeature {
    #[serde(rename = "type")]
    kind: String,
    geometry: GjGeometry,
    properties: GjProps,
}

#[derive(Debug, Serialize, Deserialize)]
struct GjGeometry {
    #[serde(rename = "type")]
    kind: String,
    coordinates: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct GjProps {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_rgb: Option<[f64; 3]>,
    /// "pixel" (with tile georeference) or "degree".
    #[serde(skip_serializing_if = "Option::is_none")]
    space: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tile_lon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tile_lat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    zoom: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tile_width_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tile_height_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
}

/// Reference zoom used when normalizing degree-space rings to pixel space.
const DEGREE_NORMALIZE_ZOOM: u32 = 19;

/// Load building predictions. Pixel-space features carry their tile
/// georeference; degree-space rings are normalized to pixel space around a
/// synthetic tile centered on the ring. Invalid features are dropped and
/// counted, never repaired.
pub fn load_buildings(
    path: &Path,
) -> Result<(Vec<BuildingFeatureRaw>, IngestReport), IngestError> {
    let path_s = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path_s.clone(),
        source,
    })?;
    let collection: GjCollection =
        serde_json::from_str(&text).map_err(|e| IngestError::Json {
            path: path_s.clone(),
            message: e.to_string(),
        })?;
    if collection.kind != "FeatureCollection" {
        return Err(IngestError::Json {
            path: path_s,
            message: format!("expected FeatureCollection, got {:?}", collection.kind),
        });
    }

    let mut report = IngestReport::new(format!("buildings:{path_s}"));
    let mut out = Vec::new();
    for (i, feat) in collection.features.into_iter().enumerate() {
        report.rows_total += 1;
        let id = feat
            .properties
            .id
            .clone()
            .unwrap_or_else(|| format!("feature-{i}"));
        let Some(mean_rgb) = feat.properties.mean_rgb else {
            report.skip(i, "missing mean_rgb");
            report.tally("dropped_missing_rgb", 1);
            continue;
        };
        if mean_rgb.iter().any(|c| !(0.0..=255.0).contains(c)) {
            report.skip(i, format!("mean_rgb out of range {mean_rgb:?}"));
            report.tally("dropped_bad_rgb", 1);
            continue;
        }
        if feat.geometry.kind != "Polygon" || feat.geometry.coordinates.is_empty() {
            report.skip(i, format!("unsupported geometry {:?}", feat.geometry.kind));
            report.tally("dropped_bad_geometry", 1);
            continue;
        }
        let ring = feat.geometry.coordinates[0].clone();
        let space = feat.properties.space.as_deref().unwrap_or("pixel");
        let polygon = match space {
            "pixel" => build_pixel_polygon(&feat.properties, ring),
            "degree" => normalize_degree_ring(ring),
            other => {
                report.skip(i, format!("unknown coordinate space {other:?}"));
                report.tally("dropped_bad_geometry", 1);
                continue;
            }
        };
        match polygon {
            Ok(polygon) => out.push(BuildingFeatureRaw {
                id,
                polygon,
                mean_rgb,
                confidence: feat.properties.confidence,
            }),
            Err(reason) => {
                report.skip(i, reason);
                report.tally("dropped_bad_geometry", 1);
            }
        }
    }
    report.rows_used = out.len();
    Ok((out, report))
}

fn build_pixel_polygon(props: &GjProps, ring: Vec<[f64; 2]>) -> Result<PixelPolygon, String> {
    let (Some(tile_lon), Some(tile_lat), Some(zoom)) =
        (props.tile_lon, props.tile_lat, props.zoom)
    else {
        return Err("pixel-space feature missing tile georeference".into());
    };
    let center =
        GeoPoint::new(tile_lon, tile_lat).map_err(|e| format!("bad tile center: {e}"))?;
    let georef = TileGeoref {
        center,
        zoom,
        width_px: props.tile_width_px.unwrap_or(640.0),
        height_px: props.tile_height_px.unwrap_or(640.0),
    };
    PixelPolygon::new(ring, georef).map_err(|e| e.to_string())
}

fn normalize_degree_ring(ring: Vec<[f64; 2]>) -> Result<PixelPolygon, String> {
    if ring.len() < 3 {
        return Err(format!("degenerate ring with {} vertices", ring.len()));
    }
    let n = ring.len() as f64;
    let mean_lon = ring.iter().map(|v| v[0]).sum::<f64>() / n;
    let mean_lat = ring.iter().map(|v| v[1]).sum::<f64>() / n;
    let center = GeoPoint::new(mean_lon, mean_lat).map_err(|e| format!("bad ring: {e}"))?;
    let georef = TileGeoref {
        center,
        zoom: DEGREE_NORMALIZE_ZOOM,
        width_px: 640.0,
        height_px: 640.0,
    };
    let px_ring: Result<Vec<[f64; 2]>, String> = ring
        .iter()
        .map(|v| {
            let p = GeoPoint::new(v[0], v[1]).map_err(|e| format!("bad vertex: {e}"))?;
            let (x, y) = georef.lonlat_to_px(p);
            Ok([x, y])
        })
        .collect();
    PixelPolygon::new(px_ring?, georef).map_err(|e| e.to_string())
}

/// Write buildings in the same pixel-space format `load_buildings` reads.
pub fn write_buildings(
    features: &[BuildingFeatureRaw],
    path: &Path,
) -> Result<(), IngestError> {
    let collection = GjCollection {
        kind: "FeatureCollection".into(),
        features: features
            .iter()
            .map(|f| {
                let georef = f.polygon.georef();
                let mut ring = f.polygon.ring().to_vec();
                ring.push(ring[0]); // GeoJSON rings are closed
                GjFeature {
                    kind: "Feature".into(),
                    geometry: GjGeometry {
                        kind: "Polygon".into(),
                        coordinates: vec![ring],
                    },
                    properties: GjProps {
                        id: Some(f.id.clone()),
                        mean_rgb: Some(f.mean_rgb),
                        space: Some("pixel".into()),
                        tile_lon: Some(georef.center.lon()),
                        tile_lat: Some(georef.center.lat()),
                        zoom: Some(georef.zoom),
                        tile_width_px: Some(georef.width_px),
                        tile_height_px: Some(georef.height_px),
                        confidence: f.confidence,
                    },
                }
            })
            .collect(),
    };
    let text = serde_json::to_string(&collection).expect("geojson serialization");
    std::fs::write(path, text).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Annual-mean night light raster with nearest-neighbor sampling.
///
/// Loaded from an ASCII-grid file with an optional `nlayers` header; monthly
/// layers are averaged cell-wise ignoring the nodata sentinel. Cells with no
/// data in any layer stay explicitly missing.
#[derive(Debug, Clone)]
pub struct NightRaster {
    pub origin: GeoPoint,
    pub res: f64,
    pub ncols: usize,
    pub nrows: usize,
    /// Row-major from the origin (south-west) corner; `None` = missing.
    values: Vec<Option<f64>>,
}

impl NightRaster {
    pub fn from_annual(
        origin: GeoPoint,
        res: f64,
        ncols: usize,
        nrows: usize,
        values: Vec<Option<f64>>,
    ) -> Result<Self, IngestError> {
        if values.len() != ncols * nrows {
            return Err(IngestError::RasterShape {
                path: "<memory>".into(),
                expected: ncols * nrows,
                found: values.len(),
            });
        }
        Ok(Self {
            origin,
            res,
            ncols,
            nrows,
            values,
        })
    }

    pub fn value_at(&self, col: usize, row: usize) -> Option<f64> {
        self.values[row * self.ncols + col]
    }

    fn axis_index(&self, coord: f64, origin: f64, count: usize) -> Option<usize> {
        let u = (coord - origin) / self.res;
        if u < 0.0 || u > count as f64 {
            return None;
        }
        // A point exactly on a cell boundary is equidistant from the two cell
        // centers; ties break toward the lower index.
        let mut idx = u.floor();
        if u == idx && u > 0.0 {
            idx -= 1.0;
        }
        let idx = idx as usize;
        (idx < count).then_some(idx)
    }

    /// Nearest-neighbor sample at a point.
    pub fn sample(&self, p: GeoPoint) -> Result<f64, IngestError> {
        let col = self
            .axis_index(p.lon(), self.origin.lon(), self.ncols)
            .ok_or(IngestError::OutsideRaster {
                lon: p.lon(),
                lat: p.lat(),
            })?;
        let row = self
            .axis_index(p.lat(), self.origin.lat(), self.nrows)
            .ok_or(IngestError::OutsideRaster {
                lon: p.lon(),
                lat: p.lat(),
            })?;
        self.value_at(col, row).ok_or(IngestError::AllNoData { col, row })
    }
}

/// Load the night raster, averaging monthly layers cell-wise and ignoring
/// nodata values.
pub fn load_night_raster(path: &Path) -> Result<NightRaster, IngestError> {
    let path_s = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path_s.clone(),
        source,
    })?;
    let mut tokens = text.split_whitespace();

    let mut header: HashMap<String, String> = HashMap::new();
    let mut pending: Option<String> = None;
    // Header lines are `name value` pairs until the first token that is not a
    // known header name.
    const HEADER_KEYS: [&str; 7] = [
        "ncols",
        "nrows",
        "xllcorner",
        "yllcorner",
        "cellsize",
        "NODATA_value",
        "nlayers",
    ];
    for tok in tokens.by_ref() {
        match pending.take() {
            Some(key) => {
                header.insert(key, tok.to_string());
            }
            None => {
                if HEADER_KEYS.contains(&tok) {
                    pending = Some(tok.to_string());
                } else {
                    pending = Some(format!("__data__{tok}"));
                    break;
                }
            }
        }
    }

    let hdr_err = |message: String| IngestError::RasterHeader {
        path: path_s.clone(),
        message,
    };
    let get = |k: &str| -> Result<f64, IngestError> {
        header
            .get(k)
            .ok_or_else(|| hdr_err(format!("missing {k}")))?
            .parse::<f64>()
            .map_err(|_| hdr_err(format!("bad {k}")))
    };
    let ncols = get("ncols")? as usize;
    let nrows = get("nrows")? as usize;
    let xll = get("xllcorner")?;
    let yll = get("yllcorner")?;
    let res = get("cellsize")?;
    if res <= 0.0 || ncols == 0 || nrows == 0 {
        return Err(hdr_err("non-positive dimensions".into()));
    }
    let nodata = get("NODATA_value")?;
    let nlayers = header
        .get("nlayers")
        .map(|v| v.parse::<usize>().map_err(|_| hdr_err("bad nlayers".into())))
        .transpose()?
        .unwrap_or(1);
    let origin = GeoPoint::new(xll, yll).map_err(|e| hdr_err(e.to_string()))?;

    let mut data: Vec<f64> = Vec::with_capacity(nlayers * nrows * ncols);
    if let Some(first) = pending {
        let raw = first.strip_prefix("__data__").unwrap_or(&first);
        data.push(raw.parse().map_err(|_| hdr_err(format!("bad value {raw:?}")))?);
    }
    for tok in tokens {
        data.push(
            tok.parse()
                .map_err(|_| hdr_err(format!("bad value {tok:?}")))?,
        );
    }
    let expected = nlayers * nrows * ncols;
    if data.len() != expected {
        return Err(IngestError::RasterShape {
            path: path_s,
            expected,
            found: data.len(),
        });
    }

    // Average layers, ignoring nodata. File rows run north to south; flip to
    // row-major from the south-west origin.
    let mut values = vec![None; nrows * ncols];
    for row_from_origin in 0..nrows {
        let file_row = nrows - 1 - row_from_origin;
        for col in 0..ncols {
            let mut sum = 0.0;
            let mut n = 0usize;
            for layer in 0..nlayers {
                let v = data[layer * nrows * ncols + file_row * ncols + col];
                if v != nodata {
                    sum += v;
                    n += 1;
                }
            }
            if n > 0 {
                values[row_from_origin * ncols + col] = Some(sum / n as f64);
            }
        }
    }
    NightRaster::from_annual(origin, res, ncols, nrows, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_file(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    const VILLAGES: &str = "village_id,lon,lat,group_id\nv1,34.0,0.0,g1\nv2,34.1,0.0,g1\n";

    #[test]
    fn census_imputes_missing_and_outliers() {
        let dir = tempfile::tempdir().unwrap();
        let vpath = write_file(dir.path(), "villages.csv", VILLAGES);
        // h2 has missing lat; h3 is ~5.5 km east of v1.
        let census = "household_id,village_id,lon,lat,eligible,treated\n\
                      h1,v1,34.0002,0.0001,true,true\n\
                      h2,v1,34.0,,true,false\n\
                      h3,v1,34.05,0.0,false,false\n";
        let cpath = write_file(dir.path(), "census.csv", census);
        let villages = load_villages(&vpath, &VillageColumns::default()).unwrap();
        let (records, report) =
            load_census(&cpath, &villages, &CensusColumns::default(), GPS_OUTLIER_M).unwrap();

        assert_eq!(records.len(), 3);
        assert!(!records[0].location_imputed);
        assert!(records[1].location_imputed);
        assert!(records[2].location_imputed);
        assert_eq!(records[1].location.lon(), 34.0);
        assert_eq!(records[2].location.lat(), 0.0);
        assert_eq!(report.count("imputed_missing"), 1);
        assert_eq!(report.count("imputed_outlier"), 1);
        assert_eq!(report.count("treated"), 1);
        assert_eq!(report.count("eligible"), 2);
    }

    #[test]
    fn census_outlier_rule_is_strict() {
        // The rule is d > threshold: exactly at the threshold is kept.
        let dir = tempfile::tempdir().unwrap();
        let vpath = write_file(dir.path(), "villages.csv", VILLAGES);
        let villages = load_villages(&vpath, &VillageColumns::default()).unwrap();
        // Household ~1999m north of v1 (0.001 deg of latitude = 111.2 m).
        let lat_1999 = 1_999.0 / 111_194.93;
        let census = format!(
            "household_id,village_id,lon,lat,eligible,treated\nh1,v1,34.0,{lat_1999},true,false\n"
        );
        let cpath = write_file(dir.path(), "census.csv", &census);
        let (records, report) =
            load_census(&cpath, &villages, &CensusColumns::default(), GPS_OUTLIER_M).unwrap();
        assert!(!records[0].location_imputed);
        assert_eq!(report.count("imputed_outlier"), 0);

        // And with a threshold just below the distance, it is imputed.
        let (records, _) =
            load_census(&cpath, &villages, &CensusColumns::default(), 1_998.0).unwrap();
        assert!(records[0].location_imputed);
    }

    #[test]
    fn census_unknown_village_is_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let vpath = write_file(dir.path(), "villages.csv", VILLAGES);
        let villages = load_villages(&vpath, &VillageColumns::default()).unwrap();
        let census = "household_id,village_id,lon,lat,eligible,treated\n\
                      h1,nope,34.0,0.0,true,false\n";
        let cpath = write_file(dir.path(), "census.csv", census);
        let err = load_census(&cpath, &villages, &CensusColumns::default(), GPS_OUTLIER_M)
            .unwrap_err();
        match err {
            IngestError::UnknownVillages { count, first_village, .. } => {
                assert_eq!(count, 1);
                assert_eq!(first_village, "nope");
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn census_malformed_rows_are_skipped_and_reported() {
        let dir = tempfile::tempdir().unwrap();
        let vpath = write_file(dir.path(), "villages.csv", VILLAGES);
        let villages = load_villages(&vpath, &VillageColumns::default()).unwrap();
        let census = "household_id,village_id,lon,lat,eligible,treated\n\
                      h1,v1,34.0,0.0,true,false\n\
                      h2,v1,34.0,0.0,maybe,false\n\
                      h3,v1,34.0,0.0,false,true\n\
                      h1,v1,34.0,0.0,true,false\n";
        let cpath = write_file(dir.path(), "census.csv", census);
        let (records, report) =
            load_census(&cpath, &villages, &CensusColumns::default(), GPS_OUTLIER_M).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(report.skipped.len(), 3);
        assert!(report.exceeds_threshold(DEFAULT_SKIP_THRESHOLD));
    }

    const SURVEY_HEADER: &str = "survey_id,lon,lat,annual_expenditure,housing_assets,non_housing_assets,total_assets,is_renter,arm\n";

    #[test]
    fn survey_flags_renters_and_accepts_debt() {
        let dir = tempfile::tempdir().unwrap();
        let survey = format!(
            "{SURVEY_HEADER}\
             s1,34.0,0.0,1200.5,800,-50,750,false,treatment\n\
             s2,34.0,0.0,900,0,100,100,true,control\n"
        );
        let spath = write_file(dir.path(), "survey.csv", &survey);
        let (records, report) = load_survey(&spath, &SurveyColumns::default(), 0.01).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].non_housing_assets, -50.0);
        assert!(!records[0].is_renter);
        assert!(records[1].is_renter);
        assert_eq!(report.count("renters"), 1);
        assert_eq!(report.count("arm_treatment"), 1);
        assert_eq!(report.count("arm_control"), 1);
    }

    #[test]
    fn survey_total_consistency_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let survey = format!(
            "{SURVEY_HEADER}\
             s1,34.0,0.0,1000,500,400,950,false,control\n\
             s2,34.0,0.0,1000,500,400,900.0001,false,control\n\
             s3,34.0,0.0,oops,500,400,900,false,control\n"
        );
        let spath = write_file(dir.path(), "survey.csv", &survey);
        let (records, report) = load_survey(&spath, &SurveyColumns::default(), 0.01).unwrap();
        assert_eq!(records.len(), 1); // only s2 is consistent within tolerance
        assert_eq!(records[0].survey_id, "s2");
        assert_eq!(report.skipped.len(), 2);
    }

    fn sample_raw_building(id: &str, lon: f64, lat: f64) -> BuildingFeatureRaw {
        let georef = TileGeoref {
            center: GeoPoint::new(lon, lat).unwrap(),
            zoom: 19,
            width_px: 640.0,
            height_px: 640.0,
        };
        BuildingFeatureRaw {
            id: id.into(),
            polygon: PixelPolygon::new(
                vec![[310.0, 310.0], [330.0, 310.0], [330.0, 330.0], [310.0, 330.0]],
                georef,
            )
            .unwrap(),
            mean_rgb: [200.0, 199.0, 205.0],
            confidence: Some(0.9),
        }
    }

    #[test]
    fn buildings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.geojson");
        let features = vec![
            sample_raw_building("b0", 34.0, 0.0),
            sample_raw_building("b1", 34.001, 0.001),
        ];
        write_buildings(&features, &path).unwrap();
        let (back, report) = load_buildings(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!(report.skipped.is_empty());
        for (a, b) in features.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mean_rgb, b.mean_rgb);
            assert_eq!(a.confidence, b.confidence);
            assert_eq!(a.polygon, b.polygon);
        }
    }

    #[test]
    fn buildings_invalid_features_dropped_with_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let json = r#"{"type":"FeatureCollection","features":[
          {"type":"Feature","geometry":{"type":"Polygon","coordinates":[[[0,0],[10,0],[10,10],[0,10],[0,0]]]},
           "properties":{"id":"ok","mean_rgb":[10,20,30],"space":"pixel","tile_lon":34.0,"tile_lat":0.0,"zoom":19}},
          {"type":"Feature","geometry":{"type":"Polygon","coordinates":[[[0,0],[10,0],[10,10],[0,10],[0,0]]]},
           "properties":{"id":"norgb","space":"pixel","tile_lon":34.0,"tile_lat":0.0,"zoom":19}},
          {"type":"Feature","geometry":{"type":"Polygon","coordinates":[[[0,0],[10,0],[0,0]]]},
           "properties":{"id":"twovert","mean_rgb":[1,2,3],"space":"pixel","tile_lon":34.0,"tile_lat":0.0,"zoom":19}}
        ]}"#;
        let path = write_file(dir.path(), "b.geojson", json);
        let (features, report) = load_buildings(&path).unwrap();
        assert_eq!(features.len(), 1);
        assert_eq!(features[0].id, "ok");
        assert_eq!(report.count("dropped_missing_rgb"), 1);
        assert_eq!(report.count("dropped_bad_geometry"), 1);
    }

    #[test]
    fn buildings_degree_space_normalized() {
        let dir = tempfile::tempdir().unwrap();
        // ~20 m square in degrees near the equator.
        let d = 0.0002;
        let json = format!(
            r#"{{"type":"FeatureCollection","features":[
              {{"type":"Feature","geometry":{{"type":"Polygon","coordinates":[[[34.0,0.0],[{},0.0],[{},{}],[34.0,{}],[34.0,0.0]]]}},
               "properties":{{"id":"d0","mean_rgb":[10,20,30],"space":"degree"}}}}]}}"#,
            34.0 + d,
            34.0 + d,
            d,
            d
        );
        let path = write_file(dir.path(), "b.geojson", &json);
        let (features, _) = load_buildings(&path).unwrap();
        assert_eq!(features.len(), 1);
        let area = geo::polygon_area_m2(&features[0].polygon).unwrap();
        // Area measurement follows the Web Mercator scale (one degree at the
        // equator is 2*pi*6378137/360 meters there).
        let side_m = d * 111_319.490_793;
        assert!((area - side_m * side_m).abs() / (side_m * side_m) < 1e-6);
    }

    const NIGHT_HEADER: &str = "ncols 3\nnrows 2\nxllcorner 34.0\nyllcorner 0.0\ncellsize 0.5\nNODATA_value -9999\n";

    #[test]
    fn night_raster_averages_layers_ignoring_nodata() {
        let dir = tempfile::tempdir().unwrap();
        // Two layers; cell (col 0, top row) is nodata in layer 2.
        let content = format!(
            "{NIGHT_HEADER}nlayers 2\n\
             1 2 3\n4 5 6\n\
             -9999 4 5\n6 7 8\n"
        );
        let path = write_file(dir.path(), "night.grid", &content);
        let raster = load_night_raster(&path).unwrap();
        // Top file row is the northern row => origin row 1.
        assert_eq!(raster.value_at(0, 1), Some(1.0)); // only layer 1 valid
        assert_eq!(raster.value_at(1, 1), Some(3.0)); // (2+4)/2
        assert_eq!(raster.value_at(0, 0), Some(5.0)); // (4+6)/2
    }

    #[test]
    fn night_raster_identical_layers_mean_is_layer() {
        let dir = tempfile::tempdir().unwrap();
        let layer = "1.5 2.5 3.5\n4.5 5.5 6.5\n";
        let content = format!("{NIGHT_HEADER}nlayers 12\n{}", layer.repeat(12));
        let path = write_file(dir.path(), "night.grid", &content);
        let raster = load_night_raster(&path).unwrap();
        assert_eq!(raster.value_at(2, 1), Some(3.5));
        assert_eq!(raster.value_at(2, 0), Some(6.5));
    }

    #[test]
    fn night_raster_shape_mismatch_is_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let content = format!("{NIGHT_HEADER}1 2 3\n4 5\n");
        let path = write_file(dir.path(), "night.grid", &content);
        assert!(matches!(
            load_night_raster(&path),
            Err(IngestError::RasterShape { expected: 6, found: 5, .. })
        ));
    }

    #[test]
    fn night_sampling_ties_break_low() {
        let dir = tempfile::tempdir().unwrap();
        let content = format!("{NIGHT_HEADER}1 2 3\n4 5 6\n");
        let path = write_file(dir.path(), "night.grid", &content);
        let raster = load_night_raster(&path).unwrap();
        // Point exactly on the boundary between col 0 and col 1.
        let p = GeoPoint::new(34.5, 0.25).unwrap();
        assert_eq!(raster.sample(p).unwrap(), 4.0);
        // Interior point in col 1, bottom row.
        let p = GeoPoint::new(34.75, 0.25).unwrap();
        assert_eq!(raster.sample(p).unwrap(), 5.0);
        // Outside.
        let p = GeoPoint::new(36.0, 0.25).unwrap();
        assert!(matches!(raster.sample(p), Err(IngestError::OutsideRaster { .. })));
    }
}
