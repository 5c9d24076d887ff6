//! Run configuration: a plain-text key-value file in which every pipeline
//! constant is a named key defaulting to its production value. The full
//! resolved configuration is echoed into the run manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use satengel_core::ingest::{CensusColumns, SurveyColumns, VillageColumns};
use satengel_core::kv::KvDoc;
use satengel_core::measures::{Proxy, Welfare};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub census: PathBuf,
    pub villages: PathBuf,
    pub survey: PathBuf,
    pub buildings: PathBuf,
    pub night: PathBuf,
    pub out_dir: PathBuf,

    pub grid_res_deg: f64,
    pub match_radius_m: f64,
    pub conley_cutoff_m: f64,
    pub gps_outlier_m: f64,
    pub winsor_outcome_upper_pct: f64,
    pub winsor_welfare_lower_pct: f64,
    pub winsor_welfare_upper_pct: f64,
    pub placebo_sims: usize,
    pub placebo_seed: u64,
    pub kmeans_k: usize,
    pub kmeans_seed: u64,
    pub simplify_tolerance_px: f64,
    pub loess_span: f64,
    pub loess_degree: usize,
    pub loess_grid_points: usize,
    pub skip_threshold: f64,
    pub assets_tolerance: f64,
    pub threads: usize,

    pub proxies: Vec<Proxy>,
    pub welfare_measures: Vec<Welfare>,
    /// Optional reviewed roof model; when set, clustering is skipped and the
    /// model is loaded from this path.
    pub roof_model: Option<PathBuf>,
    /// Optional survey-based benchmark row for the scaled-effects table.
    pub benchmark_tau_w: Option<f64>,
    pub benchmark_ci_lo: Option<f64>,
    pub benchmark_ci_hi: Option<f64>,

    pub census_columns: CensusColumns,
    pub village_columns: VillageColumns,
    pub survey_columns: SurveyColumns,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            census: PathBuf::from("census.csv"),
            villages: PathBuf::from("villages.csv"),
            survey: PathBuf::from("survey.csv"),
            buildings: PathBuf::from("buildings.geojson"),
            night: PathBuf::from("night.grid"),
            out_dir: PathBuf::from("out"),
            grid_res_deg: 0.001,
            match_radius_m: 250.0,
            conley_cutoff_m: 3_000.0,
            gps_outlier_m: 2_000.0,
            winsor_outcome_upper_pct: 99.0,
            winsor_welfare_lower_pct: 1.0,
            winsor_welfare_upper_pct: 99.0,
            placebo_sims: 100,
            placebo_seed: 2019,
            kmeans_k: 8,
            kmeans_seed: 2019,
            simplify_tolerance_px: 3.0,
            loess_span: 0.75,
            loess_degree: 2,
            loess_grid_points: 100,
            skip_threshold: 0.001,
            assets_tolerance: 0.01,
            threads: 0,
            proxies: Proxy::ALL.to_vec(),
            welfare_measures: Welfare::ALL.to_vec(),
            roof_model: None,
            benchmark_tau_w: None,
            benchmark_ci_lo: None,
            benchmark_ci_hi: None,
            census_columns: CensusColumns::default(),
            village_columns: VillageColumns::default(),
            survey_columns: SurveyColumns::default(),
        }
    }
}

impl RunConfig {
    /// Load a config file; relative input paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let doc = KvDoc::load(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_doc(&doc, base)
    }

    pub fn from_doc(doc: &KvDoc, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let resolve = |raw: &str| -> PathBuf {
            let p = PathBuf::from(raw);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        for key in doc.keys() {
            let raw = doc.get(key).unwrap();
            match key {
                "census" => cfg.census = resolve(raw),
                "villages" => cfg.villages = resolve(raw),
                "survey" => cfg.survey = resolve(raw),
                "buildings" => cfg.buildings = resolve(raw),
                "night" => cfg.night = resolve(raw),
                "out_dir" => cfg.out_dir = resolve(raw),
                "roof_model" => cfg.roof_model = Some(resolve(raw)),
                "grid_res_deg" => cfg.grid_res_deg = doc.get_f64(key)?,
                "match_radius_m" => cfg.match_radius_m = doc.get_f64(key)?,
                "conley_cutoff_m" => cfg.conley_cutoff_m = doc.get_f64(key)?,
                "gps_outlier_m" => cfg.gps_outlier_m = doc.get_f64(key)?,
                "winsor_outcome_upper_pct" => cfg.winsor_outcome_upper_pct = doc.get_f64(key)?,
                "winsor_welfare_lower_pct" => cfg.winsor_welfare_lower_pct = doc.get_f64(key)?,
                "winsor_welfare_upper_pct" => cfg.winsor_welfare_upper_pct = doc.get_f64(key)?,
                "placebo_sims" => cfg.placebo_sims = doc.get_usize(key)?,
                "placebo_seed" => cfg.placebo_seed = doc.get_u64(key)?,
                "kmeans_k" => cfg.kmeans_k = doc.get_usize(key)?,
                "kmeans_seed" => cfg.kmeans_seed = doc.get_u64(key)?,
                "simplify_tolerance_px" => cfg.simplify_tolerance_px = doc.get_f64(key)?,
                "loess_span" => cfg.loess_span = doc.get_f64(key)?,
                "loess_degree" => cfg.loess_degree = doc.get_usize(key)?,
                "loess_grid_points" => cfg.loess_grid_points = doc.get_usize(key)?,
                "skip_threshold" => cfg.skip_threshold = doc.get_f64(key)?,
                "assets_tolerance" => cfg.assets_tolerance = doc.get_f64(key)?,
                "threads" => cfg.threads = doc.get_usize(key)?,
                "benchmark_tau_w" => cfg.benchmark_tau_w = Some(doc.get_f64(key)?),
                "benchmark_ci_lo" => cfg.benchmark_ci_lo = Some(doc.get_f64(key)?),
                "benchmark_ci_hi" => cfg.benchmark_ci_hi = Some(doc.get_f64(key)?),
                "proxies" => {
                    cfg.proxies = raw
                        .split(',')
                        .map(|s| {
                            Proxy::parse(s.trim())
                                .ok_or_else(|| anyhow::anyhow!("unknown proxy {s:?}"))
                        })
                        .collect::<Result<_>>()?;
                }
                "welfare_measures" => {
                    cfg.welfare_measures = raw
                        .split(',')
                        .map(|s| {
                            Welfare::parse(s.trim())
                                .ok_or_else(|| anyhow::anyhow!("unknown welfare measure {s:?}"))
                        })
                        .collect::<Result<_>>()?;
                }
                _ if key.starts_with("census.col.") => {
                    let field = &key["census.col.".len()..];
                    let c = &mut cfg.census_columns;
                    match field {
                        "household_id" => c.household_id = raw.into(),
                        "village_id" => c.village_id = raw.into(),
                        "lon" => c.lon = raw.into(),
                        "lat" => c.lat = raw.into(),
                        "eligible" => c.eligible = raw.into(),
                        "treated" => c.treated = raw.into(),
                        other => bail!("unknown census column key {other:?}"),
                    }
                }
                _ if key.starts_with("villages.col.") => {
                    let field = &key["villages.col.".len()..];
                    let c = &mut cfg.village_columns;
                    match field {
                        "village_id" => c.village_id = raw.into(),
                        "lon" => c.lon = raw.into(),
                        "lat" => c.lat = raw.into(),
                        "group_id" => c.group_id = raw.into(),
                        other => bail!("unknown villages column key {other:?}"),
                    }
                }
                _ if key.starts_with("survey.col.") => {
                    let field = &key["survey.col.".len()..];
                    let c = &mut cfg.survey_columns;
                    match field {
                        "survey_id" => c.survey_id = raw.into(),
                        "lon" => c.lon = raw.into(),
                        "lat" => c.lat = raw.into(),
                        "annual_expenditure" => c.annual_expenditure = raw.into(),
                        "housing_assets" => c.housing_assets = raw.into(),
                        "non_housing_assets" => c.non_housing_assets = raw.into(),
                        "total_assets" => c.total_assets = raw.into(),
                        "is_renter" => c.is_renter = raw.into(),
                        "arm" => c.arm = raw.into(),
                        other => bail!("unknown survey column key {other:?}"),
                    }
                }
                other => bail!("unknown config key {other:?}"),
            }
        }
        if cfg.proxies.is_empty() || cfg.welfare_measures.is_empty() {
            bail!("proxies and welfare_measures must be nonempty");
        }
        Ok(cfg)
    }

    /// Echo the resolved configuration as an ordered document.
    pub fn to_doc(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("census", self.census.display());
        doc.set("villages", self.villages.display());
        doc.set("survey", self.survey.display());
        doc.set("buildings", self.buildings.display());
        doc.set("night", self.night.display());
        doc.set("out_dir", self.out_dir.display());
        doc.set("grid_res_deg", self.grid_res_deg);
        doc.set("match_radius_m", self.match_radius_m);
        doc.set("conley_cutoff_m", self.conley_cutoff_m);
        doc.set("gps_outlier_m", self.gps_outlier_m);
        doc.set("winsor_outcome_upper_pct", self.winsor_outcome_upper_pct);
        doc.set("winsor_welfare_lower_pct", self.winsor_welfare_lower_pct);
        doc.set("winsor_welfare_upper_pct", self.winsor_welfare_upper_pct);
        doc.set("placebo_sims", self.placebo_sims);
        doc.set("placebo_seed", self.placebo_seed);
        doc.set("kmeans_k", self.kmeans_k);
        doc.set("kmeans_seed", self.kmeans_seed);
        doc.set("simplify_tolerance_px", self.simplify_tolerance_px);
        doc.set("loess_span", self.loess_span);
        doc.set("loess_degree", self.loess_degree);
        doc.set("loess_grid_points", self.loess_grid_points);
        doc.set("skip_threshold", self.skip_threshold);
        doc.set("assets_tolerance", self.assets_tolerance);
        doc.set("threads", self.threads);
        doc.set(
            "proxies",
            self.proxies.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(","),
        );
        doc.set(
            "welfare_measures",
            self.welfare_measures
                .iter()
                .map(|w| w.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        if let Some(p) = &self.roof_model {
            doc.set("roof_model", p.display());
        }
        if let Some(v) = self.benchmark_tau_w {
            doc.set("benchmark_tau_w", v);
        }
        if let Some(v) = self.benchmark_ci_lo {
            doc.set("benchmark_ci_lo", v);
        }
        if let Some(v) = self.benchmark_ci_hi {
            doc.set("benchmark_ci_hi", v);
        }
        doc
    }

    /// Write a config file pointing at a generated world.
    pub fn write_for_world(world_dir: &Path, out_dir: &Path, path: &Path) -> Result<()> {
        let mut doc = KvDoc::new();
        doc.set("census", world_dir.join("census.csv").display());
        doc.set("villages", world_dir.join("villages.csv").display());
        doc.set("survey", world_dir.join("survey.csv").display());
        doc.set("buildings", world_dir.join("buildings.geojson").display());
        doc.set("night", world_dir.join("night.grid").display());
        doc.set("out_dir", out_dir.display());
        doc.save(path).context("writing run config")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_production_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.grid_res_deg, 0.001);
        assert_eq!(cfg.match_radius_m, 250.0);
        assert_eq!(cfg.conley_cutoff_m, 3_000.0);
        assert_eq!(cfg.gps_outlier_m, 2_000.0);
        assert_eq!(cfg.winsor_outcome_upper_pct, 99.0);
        assert_eq!(cfg.placebo_sims, 100);
        assert_eq!(cfg.kmeans_k, 8);
        assert_eq!(cfg.simplify_tolerance_px, 3.0);
        assert_eq!(cfg.loess_span, 0.75);
        assert_eq!(cfg.loess_degree, 2);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let doc = KvDoc::parse(
            "census = data/c.csv\nconley_cutoff_m = 5000\nproxies = footprint\ncensus.col.lon = longitude\n",
        )
        .unwrap();
        let cfg = RunConfig::from_doc(&doc, Path::new("/base")).unwrap();
        assert_eq!(cfg.census, PathBuf::from("/base/data/c.csv"));
        assert_eq!(cfg.conley_cutoff_m, 5_000.0);
        assert_eq!(cfg.proxies, vec![Proxy::Footprint]);
        assert_eq!(cfg.census_columns.lon, "longitude");

        let doc = KvDoc::parse("bogus_key = 1\n").unwrap();
        assert!(RunConfig::from_doc(&doc, Path::new(".")).is_err());

        let doc = KvDoc::parse("proxies = sonar\n").unwrap();
        assert!(RunConfig::from_doc(&doc, Path::new(".")).is_err());
    }
}
