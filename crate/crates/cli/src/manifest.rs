//! The run manifest: resolved config, seeds, version, and every numeric
//! convention the pipeline relies on, written as one key-value document so a
//! run can be reproduced byte-identically.

use std::path::Path;

use anyhow::{Context, Result};
use satengel_core::kv::KvDoc;

use crate::config::RunConfig;

pub fn build_manifest(cfg: &RunConfig) -> KvDoc {
    let mut doc = KvDoc::new();
    doc.set("tool", "satengel");
    doc.set("version", env!("CARGO_PKG_VERSION"));
    for key in cfg.to_doc().keys().collect::<Vec<_>>() {
        doc.set(format!("config.{key}"), cfg.to_doc().get(key).unwrap());
    }
    // Numeric conventions, fixed in code.
    doc.set("convention.earth_radius_m", satengel_core::geo::EARTH_RADIUS_M);
    doc.set(
        "convention.web_mercator_m_per_px_z0",
        satengel_core::geo::WEB_MERCATOR_M_PER_PX_Z0,
    );
    doc.set("convention.ci_critical_value", satengel_core::econ::CRITICAL_95);
    doc.set("convention.percentile", "linear interpolation between order statistics");
    doc.set("convention.conley_kernel", "uniform, pairs within cutoff inclusive, i=j included");
    doc.set("convention.grid_boundary", "half-open cells, floor indexing");
    doc.set(
        "convention.kmeans",
        "k-means++ init, Lloyd to fixpoint or 300 iters, empty cluster reseeded at farthest point",
    );
    doc.set("convention.kmeans_tie", "equidistant centroids resolve to lower cluster index");
    doc.set(
        "convention.simplification",
        "Douglas-Peucker on closed ring, anchors at first vertex and farthest vertex",
    );
    doc.set("convention.nearest_tie", "equal distances resolve to lower point index");
    doc.set(
        "convention.survey_collision",
        "closest survey kept; exact ties keep lexicographically smaller key",
    );
    doc.set(
        "convention.night_resample",
        "nearest neighbor; boundary ties toward lower cell index; monthly mean ignores nodata",
    );
    doc.set(
        "convention.spline",
        "natural cubic, boundary knots at data range, 5 interior knots at sextile quantiles, F df = (5, n-6)",
    );
    doc.set("convention.engel_se", "HC1 heteroskedasticity-robust slope errors");
    doc.set("convention.loess", "tricube weights, no robustness iterations");
    doc.set(
        "convention.placebo",
        "half of groups high saturation (floor on odd); treated villages per group rounded to nearest",
    );
    doc.set("convention.gps_outlier_rule", "strictly greater than the distance threshold");
    doc
}

pub fn write_manifest(cfg: &RunConfig, path: &Path) -> Result<()> {
    build_manifest(cfg)
        .save(path)
        .with_context(|| format!("writing manifest {}", path.display()))
}
