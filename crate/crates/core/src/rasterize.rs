//! Turn households and buildings into the analysis rasters.
//!
//! Each retained grid cell carries the treated-household count x (one unit =
//! one $1,000 transfer), the eligible-household count e, and the remotely
//! sensed outcomes: total building footprint, tin-roof footprint, and night
//! light. Cells with no eligible households are excluded. Buildings are
//! assigned to cells by polygon centroid; no area splitting.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::geo::{self, CellId, GeoPoint};
use crate::ingest::{HouseholdRecord, IngestError, NightRaster};
use crate::roof::{BuildingFeature, Material};

#[derive(Debug, Error)]
pub enum RasterizeError {
    #[error(transparent)]
    Geo(#[from] geo::GeoError),
    #[error("night raster: {0}")]
    Night(#[from] IngestError),
    #[error("winsorize: empty input")]
    EmptyWinsorize,
    #[error("winsorize: non-finite value at index {0}")]
    NonFiniteValue(usize),
    #[error("winsorize: bad percentile bounds lower={lower:?} upper={upper}")]
    BadPercentiles { lower: Option<f64>, upper: f64 },
    #[error("winsorize: group labels length {labels} != values length {values}")]
    GroupLengthMismatch { labels: usize, values: usize },
    #[error("cells csv {path}: {message}")]
    CellsCsv { path: String, message: String },
    #[error("treated count {x} exceeds eligible count {e} in cell ({col}, {row})")]
    TreatedExceedsEligible { x: u32, e: u32, col: i64, row: i64 },
}

/// One analysis grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCellObservation {
    pub cell: CellId,
    pub centroid: GeoPoint,
    /// Treated households in the cell ($1,000 units of cash infusion).
    pub x: u32,
    /// Eligible households in the cell; at least 1 for retained cells.
    pub e: u32,
    pub y_footprint: f64,
    pub y_tin: f64,
    pub y_night: f64,
}

/// Winsorization bounds in percent. `lower_pct` is optional (remotely sensed
/// outcomes clip the upper tail only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WinsorSpec {
    pub lower_pct: Option<f64>,
    pub upper_pct: f64,
}

impl WinsorSpec {
    pub fn upper(upper_pct: f64) -> Self {
        Self {
            lower_pct: None,
            upper_pct,
        }
    }

    pub fn two_sided(lower_pct: f64, upper_pct: f64) -> Self {
        Self {
            lower_pct: Some(lower_pct),
            upper_pct,
        }
    }

    fn validate(&self) -> Result<(), RasterizeError> {
        let lower = self.lower_pct.unwrap_or(0.0);
        let ok = (0.0..=100.0).contains(&lower)
            && (0.0..=100.0).contains(&self.upper_pct)
            && lower < self.upper_pct;
        if ok {
            Ok(())
        } else {
            Err(RasterizeError::BadPercentiles {
                lower: self.lower_pct,
                upper: self.upper_pct,
            })
        }
    }
}

/// Percentile by linear interpolation between order statistics (the common
/// "type 7" definition): h = (n-1) p/100, interpolate sorted[floor(h)] and
/// sorted[floor(h)+1].
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor();
    let i = lo as usize;
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[i] + (h - lo) * (sorted[i + 1] - sorted[i])
}

/// Clip values beyond the spec's percentiles to those percentiles.
pub fn winsorize(values: &[f64], spec: &WinsorSpec) -> Result<Vec<f64>, RasterizeError> {
    spec.validate()?;
    if values.is_empty() {
        return Err(RasterizeError::EmptyWinsorize);
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(RasterizeError::NonFiniteValue(i));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let hi = percentile(&sorted, spec.upper_pct);
    let lo = spec.lower_pct.map(|p| percentile(&sorted, p));
    Ok(values
        .iter()
        .map(|&v| {
            let v = if v > hi { hi } else { v };
            match lo {
                Some(lo) if v < lo => lo,
                _ => v,
            }
        })
        .collect())
}

/// Winsorize within groups: percentiles are computed separately per distinct
/// label and applied only to that group's members.
pub fn winsorize_by_group<K: Eq + std::hash::Hash + Copy>(
    values: &[f64],
    labels: &[K],
    spec: &WinsorSpec,
) -> Result<Vec<f64>, RasterizeError> {
    if labels.len() != values.len() {
        return Err(RasterizeError::GroupLengthMismatch {
            labels: labels.len(),
            values: values.len(),
        });
    }
    let mut by_group: HashMap<K, Vec<usize>> = HashMap::new();
    for (i, &k) in labels.iter().enumerate() {
        by_group.entry(k).or_default().push(i);
    }
    let mut out = values.to_vec();
    for indices in by_group.values() {
        let group: Vec<f64> = indices.iter().map(|&i| values[i]).collect();
        let clipped = winsorize(&group, spec)?;
        for (&i, v) in indices.iter().zip(clipped) {
            out[i] = v;
        }
    }
    Ok(out)
}

/// Count treated and eligible households per grid cell; drop cells with no
/// eligible households. Output is sorted by (row, col), centroids at cell
/// centers.
pub fn build_intensity_raster(
    census: &[HouseholdRecord],
    res: f64,
) -> Result<Vec<GridCellObservation>, RasterizeError> {
    let mut counts: HashMap<CellId, (u32, u32)> = HashMap::new();
    for hh in census {
        let cell = geo::cell_index(hh.location, res)?;
        let entry = counts.entry(cell).or_insert((0, 0));
        if hh.treated {
            entry.0 += 1;
        }
        if hh.eligible {
            entry.1 += 1;
        }
    }
    let mut cells: Vec<GridCellObservation> = counts
        .into_iter()
        .filter(|&(_, (_, e))| e >= 1)
        .map(|(cell, (x, e))| {
            if x > e {
                return Err(RasterizeError::TreatedExceedsEligible {
                    x,
                    e,
                    col: cell.col,
                    row: cell.row,
                });
            }
            Ok(GridCellObservation {
                cell,
                centroid: cell.centroid()?,
                x,
                e,
                y_footprint: 0.0,
                y_tin: 0.0,
                y_night: 0.0,
            })
        })
        .collect::<Result<_, _>>()?;
    cells.sort_by(|a, b| a.cell.cmp(&b.cell));
    Ok(cells)
}

/// Outcome aggregation diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutcomeReport {
    pub buildings_total: usize,
    pub buildings_outside: usize,
    pub footprint_outside_m2: f64,
}

/// Fill y_footprint, y_tin (centroid-in-cell sums over buildings) and
/// y_night (nearest-neighbor raster sample at the cell centroid). Buildings
/// whose centroid falls outside every retained cell are counted and ignored.
/// Summation order is fixed by building id for bit-stable totals.
pub fn build_outcome_rasters(
    buildings: &[BuildingFeature],
    night: &NightRaster,
    cells: &mut [GridCellObservation],
) -> Result<OutcomeReport, RasterizeError> {
    let mut report = OutcomeReport {
        buildings_total: buildings.len(),
        ..Default::default()
    };
    if cells.is_empty() {
        for b in buildings {
            report.buildings_outside += 1;
            report.footprint_outside_m2 += b.footprint_m2;
        }
        return Ok(report);
    }
    let res = cells[0].cell.res;
    let index: HashMap<CellId, usize> =
        cells.iter().enumerate().map(|(i, c)| (c.cell, i)).collect();

    let mut order: Vec<usize> = (0..buildings.len()).collect();
    order.sort_by(|&a, &b| buildings[a].id.cmp(&buildings[b].id));

    for i in order {
        let b = &buildings[i];
        let cell = geo::cell_index(b.centroid, res)?;
        match index.get(&cell) {
            Some(&slot) => {
                cells[slot].y_footprint += b.footprint_m2;
                if b.material == Material::Tin {
                    cells[slot].y_tin += b.footprint_m2;
                }
            }
            None => {
                report.buildings_outside += 1;
                report.footprint_outside_m2 += b.footprint_m2;
            }
        }
    }

    for c in cells.iter_mut() {
        c.y_night = night.sample(c.centroid)?;
    }
    Ok(report)
}

/// Persist the raster table consumed by the estimation stage.
pub fn write_cells(cells: &[GridCellObservation], path: &Path) -> Result<(), RasterizeError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RasterizeError::CellsCsv {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let io_err = |e: csv::Error| RasterizeError::CellsCsv {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    w.write_record([
        "col",
        "row",
        "res",
        "lon",
        "lat",
        "x",
        "e",
        "y_footprint",
        "y_tin",
        "y_night",
    ])
    .map_err(io_err)?;
    for c in cells {
        w.write_record([
            c.cell.col.to_string(),
            c.cell.row.to_string(),
            c.cell.res.to_string(),
            c.centroid.lon().to_string(),
            c.centroid.lat().to_string(),
            c.x.to_string(),
            c.e.to_string(),
            c.y_footprint.to_string(),
            c.y_tin.to_string(),
            c.y_night.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| RasterizeError::CellsCsv {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_cells(path: &Path) -> Result<Vec<GridCellObservation>, RasterizeError> {
    let err = |message: String| RasterizeError::CellsCsv {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let field = |j: usize| -> Result<f64, RasterizeError> {
            rec[j].parse().map_err(|_| err(format!("row {}: bad field {:?}", i + 2, &rec[j])))
        };
        let cell = CellId {
            col: rec[0].parse().map_err(|_| err(format!("row {}: bad col", i + 2)))?,
            row: rec[1].parse().map_err(|_| err(format!("row {}: bad row", i + 2)))?,
            res: field(2)?,
        };
        out.push(GridCellObservation {
            cell,
            centroid: GeoPoint::new(field(3)?, field(4)?)
                .map_err(|e| err(format!("row {}: {e}", i + 2)))?,
            x: field(5)? as u32,
            e: field(6)? as u32,
            y_footprint: field(7)?,
            y_tin: field(8)?,
            y_night: field(9)?,
        });
    }
    Ok(out)
}
