//! Pipeline stages shared by the subcommands and the end-to-end tests.
//! Subcommands compose through files in the run directory; the full chain is
//! also callable in one pass for replicate studies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use satengel_core::econ::{
    estimate_binned, estimate_pooled, fit_engel_linear, fit_engel_loess, placebo_run,
    scale_effect, test_engel_linearity, BinnedEffects, ConleyPath, EffectEstimate, EngelFit,
    EstimationSettings, LinearityTest, LoessCurve, PlaceboRun, ScaledEffect, TwoTierScheme,
};
use satengel_core::ingest::{
    self, Arm, BuildingFeatureRaw, HouseholdRecord, IngestReport, NightRaster, SurveyRecord,
    VillageRecord,
};
use satengel_core::matching::{
    self, EngelFilters, EngelObservation, MatchResult, MatchedRecord,
};
use satengel_core::rasterize::{self, GridCellObservation, WinsorSpec};
use satengel_core::roof::{self, BuildingFeature, RoofClusterModel};
use satengel_core::{Proxy, Welfare};

use crate::config::RunConfig;

/// Marker error for malformed-row fractions above the configured ceiling;
/// the binary maps it to exit code 2.
#[derive(Debug)]
pub struct ValidationExceeded(pub String);

impl std::fmt::Display for ValidationExceeded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "validation threshold exceeded: {}", self.0)
    }
}

impl std::error::Error for ValidationExceeded {}

pub struct World {
    pub census: Vec<HouseholdRecord>,
    pub villages: Vec<VillageRecord>,
    pub survey: Vec<SurveyRecord>,
    pub buildings_raw: Vec<BuildingFeatureRaw>,
    pub night: NightRaster,
    pub reports: Vec<IngestReport>,
}

pub fn load_world(cfg: &RunConfig) -> Result<World> {
    let villages = ingest::load_villages(&cfg.villages, &cfg.village_columns)
        .context("loading villages")?;
    let (census, census_report) = ingest::load_census(
        &cfg.census,
        &villages,
        &cfg.census_columns,
        cfg.gps_outlier_m,
    )
    .context("loading census")?;
    let (survey, survey_report) =
        ingest::load_survey(&cfg.survey, &cfg.survey_columns, cfg.assets_tolerance)
            .context("loading survey")?;
    let (buildings_raw, building_report) =
        ingest::load_buildings(&cfg.buildings).context("loading buildings")?;
    let night = ingest::load_night_raster(&cfg.night).context("loading night raster")?;

    let reports = vec![census_report, survey_report, building_report];
    for r in &reports {
        if r.exceeds_threshold(cfg.skip_threshold) {
            return Err(anyhow!(ValidationExceeded(format!(
                "{}: {} of {} rows skipped (threshold {})",
                r.source,
                r.skipped.len(),
                r.rows_total,
                cfg.skip_threshold
            ))));
        }
    }
    Ok(World {
        census,
        villages,
        survey,
        buildings_raw,
        night,
        reports,
    })
}

pub struct Enriched {
    pub model: RoofClusterModel,
    pub buildings: Vec<BuildingFeature>,
    pub report: roof::EnrichReport,
}

pub fn enrich_world(cfg: &RunConfig, world: &World) -> Result<Enriched> {
    let model = match &cfg.roof_model {
        Some(path) => RoofClusterModel::load(path)
            .with_context(|| format!("loading roof model {}", path.display()))?,
        None => {
            let colors: Vec<_> = world
                .buildings_raw
                .iter()
                .map(|b| roof::rgb_to_lab(b.mean_rgb))
                .collect();
            roof::fit_roof_clusters(&colors, cfg.kmeans_k, cfg.kmeans_seed)
                .context("fitting roof clusters")?
        }
    };
    let (buildings, report) =
        roof::enrich_buildings(&world.buildings_raw, &model, cfg.simplify_tolerance_px);
    Ok(Enriched {
        model,
        buildings,
        report,
    })
}

pub fn build_cells(
    cfg: &RunConfig,
    world: &World,
    enriched: &Enriched,
) -> Result<(Vec<GridCellObservation>, rasterize::OutcomeReport)> {
    let mut cells = rasterize::build_intensity_raster(&world.census, cfg.grid_res_deg)
        .context("building intensity raster")?;
    let report = rasterize::build_outcome_rasters(&enriched.buildings, &world.night, &mut cells)
        .context("building outcome rasters")?;
    Ok((cells, report))
}

pub fn estimation_settings(cfg: &RunConfig) -> EstimationSettings {
    EstimationSettings {
        conley_cutoff_m: cfg.conley_cutoff_m,
        winsor_upper_pct: cfg.winsor_outcome_upper_pct,
        conley_path: ConleyPath::Binned,
    }
}

pub struct Effects {
    pub pooled: BTreeMap<Proxy, EffectEstimate>,
    pub binned: BTreeMap<Proxy, BinnedEffects>,
}

pub fn run_estimates(cfg: &RunConfig, cells: &[GridCellObservation]) -> Result<Effects> {
    let settings = estimation_settings(cfg);
    let mut pooled = BTreeMap::new();
    let mut binned = BTreeMap::new();
    for &proxy in &cfg.proxies {
        pooled.insert(
            proxy,
            estimate_pooled(cells, proxy, &settings)
                .with_context(|| format!("pooled estimate for {}", proxy.as_str()))?,
        );
        binned.insert(
            proxy,
            estimate_binned(cells, proxy, &settings)
                .with_context(|| format!("binned estimate for {}", proxy.as_str()))?,
        );
    }
    Ok(Effects { pooled, binned })
}

pub fn run_matching(
    cfg: &RunConfig,
    world: &World,
    enriched: &Enriched,
) -> Result<(MatchResult, Vec<MatchedRecord>)> {
    let buildings = matching::match_buildings_to_census(
        &enriched.buildings,
        &world.census,
        cfg.match_radius_m,
    )?;
    let survey =
        matching::match_survey_to_census(&world.survey, &world.census, cfg.match_radius_m)?;
    let result = MatchResult { buildings, survey };
    let table = matching::build_matched_table(
        &world.census,
        &enriched.buildings,
        &world.survey,
        &world.night,
        &result,
    )?;
    Ok((result, table))
}

pub fn engel_filters(cfg: &RunConfig) -> EngelFilters {
    EngelFilters {
        exclude_renters: true,
        welfare_winsor: WinsorSpec::two_sided(
            cfg.winsor_welfare_lower_pct,
            cfg.winsor_welfare_upper_pct,
        ),
        proxy_winsor: WinsorSpec::upper(cfg.winsor_outcome_upper_pct),
    }
}

pub struct EngelOutputs {
    /// Control-arm linear fit per proxy and welfare measure.
    pub fits: BTreeMap<(Proxy, Welfare), EngelFit>,
    pub loess: BTreeMap<(Proxy, Welfare), LoessCurve>,
    pub linearity: BTreeMap<(Proxy, Welfare), LinearityTest>,
    /// Per-arm linear fits for the violation diagnostic.
    pub arm_fits: BTreeMap<(Proxy, Welfare, Arm), EngelFit>,
    pub n_control: usize,
}

fn control_obs(obs: &[EngelObservation]) -> Vec<EngelObservation> {
    obs.iter().filter(|o| o.arm == Arm::Control).cloned().collect()
}

pub fn run_engel(
    cfg: &RunConfig,
    table: &[MatchedRecord],
    with_loess: bool,
    with_linearity: bool,
) -> Result<EngelOutputs> {
    let filters = engel_filters(cfg);
    let mut out = EngelOutputs {
        fits: BTreeMap::new(),
        loess: BTreeMap::new(),
        linearity: BTreeMap::new(),
        arm_fits: BTreeMap::new(),
        n_control: 0,
    };
    for &proxy in &cfg.proxies {
        for &welfare in &cfg.welfare_measures {
            let obs = matching::build_engel_observations(table, proxy, welfare, &filters)?;
            let control = control_obs(&obs);
            out.n_control = control.len();
            let fit = fit_engel_linear(&control).with_context(|| {
                format!("Engel fit {} on {}", proxy.as_str(), welfare.as_str())
            })?;
            if with_loess {
                out.loess.insert(
                    (proxy, welfare),
                    fit_engel_loess(&control, cfg.loess_span, cfg.loess_degree, cfg.loess_grid_points)?,
                );
            }
            if with_linearity {
                out.linearity.insert((proxy, welfare), test_engel_linearity(&control)?);
            }
            for arm in [Arm::Treatment, Arm::Control] {
                let arm_obs: Vec<_> = obs.iter().filter(|o| o.arm == arm).cloned().collect();
                if arm_obs.len() >= 3 {
                    out.arm_fits
                        .insert((proxy, welfare, arm), fit_engel_linear(&arm_obs)?);
                }
            }
            out.fits.insert((proxy, welfare), fit);
        }
    }
    Ok(out)
}

pub fn run_scale(
    cfg: &RunConfig,
    effects: &Effects,
    engel: &EngelOutputs,
) -> Result<BTreeMap<(Proxy, Welfare), ScaledEffect>> {
    let mut out = BTreeMap::new();
    for &proxy in &cfg.proxies {
        for &welfare in &cfg.welfare_measures {
            let effect = effects
                .pooled
                .get(&proxy)
                .ok_or_else(|| anyhow!("no pooled effect for {}", proxy.as_str()))?;
            let fit = engel
                .fits
                .get(&(proxy, welfare))
                .ok_or_else(|| anyhow!("no Engel fit for {}", proxy.as_str()))?;
            let scaled = scale_effect(effect, fit).with_context(|| {
                format!("scaling {} by {}", proxy.as_str(), welfare.as_str())
            })?;
            if !satengel_core::econ::check_scale_consistency(&scaled, 1e-9) {
                bail!(
                    "scaled effect for {}/{} failed the consistency check",
                    proxy.as_str(),
                    welfare.as_str()
                );
            }
            out.insert((proxy, welfare), scaled);
        }
    }
    Ok(out)
}

pub fn run_placebo(
    cfg: &RunConfig,
    world: &World,
    cells: &[GridCellObservation],
    proxy: Proxy,
) -> Result<PlaceboRun> {
    Ok(placebo_run(
        &world.villages,
        &world.census,
        cells,
        proxy,
        &TwoTierScheme::default(),
        &estimation_settings(cfg),
        cfg.placebo_sims,
        cfg.placebo_seed,
    )?)
}

/// Everything a replicate study needs from one end-to-end run.
pub struct PipelineSummary {
    pub n_cells: usize,
    pub n_matched: usize,
    pub effects: Effects,
    pub engel: EngelOutputs,
    pub scaled: BTreeMap<(Proxy, Welfare), ScaledEffect>,
}

pub struct PipelineOptions {
    pub with_loess: bool,
    pub with_linearity: bool,
    pub write_files: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            with_loess: true,
            with_linearity: true,
            write_files: true,
        }
    }
}

/// Run ingest -> rasterize -> match -> estimate -> engel -> scale in one
/// pass, optionally persisting every output table.
pub fn run_full_pipeline(cfg: &RunConfig, opts: &PipelineOptions) -> Result<PipelineSummary> {
    let world = load_world(cfg)?;
    let enriched = enrich_world(cfg, &world)?;
    let (cells, outcome_report) = build_cells(cfg, &world, &enriched)?;
    let effects = run_estimates(cfg, &cells)?;
    let (_, table) = run_matching(cfg, &world, &enriched)?;
    let engel = run_engel(cfg, &table, opts.with_loess, opts.with_linearity)?;
    let scaled = run_scale(cfg, &effects, &engel)?;

    if opts.write_files {
        std::fs::create_dir_all(&cfg.out_dir)
            .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
        write_ingest_report(cfg, &world.reports, &enriched.report, Some(&outcome_report))?;
        enriched.model.save(&cfg.out_dir.join("roof_model.txt"))?;
        write_palette(cfg, &world, &enriched)?;
        rasterize::write_cells(&cells, &cfg.out_dir.join("cells.csv"))?;
        matching::write_matched_table(&table, &cfg.out_dir.join("matched.csv"))?;
        write_effects(cfg, &effects)?;
        write_engel(cfg, &engel)?;
        write_scaled(cfg, &scaled)?;
    }

    Ok(PipelineSummary {
        n_cells: cells.len(),
        n_matched: table.len(),
        effects,
        engel,
        scaled,
    })
}

// Output tables. Floats are written with shortest round-trip formatting so
// re-runs are byte-identical.

pub fn write_ingest_report(
    cfg: &RunConfig,
    reports: &[IngestReport],
    enrich: &roof::EnrichReport,
    outcome: Option<&rasterize::OutcomeReport>,
) -> Result<()> {
    let mut text = String::new();
    for r in reports {
        text.push_str(&r.to_text());
        text.push('\n');
    }
    let _ = writeln!(text, "buildings_enriched = {}", enrich.kept);
    let _ = writeln!(text, "buildings_dropped_degenerate = {}", enrich.dropped_degenerate);
    let _ = writeln!(text, "buildings_dropped_zero_area = {}", enrich.dropped_zero_area);
    if let Some(o) = outcome {
        let _ = writeln!(text, "buildings_outside_cells = {}", o.buildings_outside);
        let _ = writeln!(text, "footprint_outside_m2 = {}", o.footprint_outside_m2);
    }
    std::fs::write(cfg.out_dir.join("ingest_report.txt"), text).context("writing ingest report")
}

fn write_palette(cfg: &RunConfig, world: &World, enriched: &Enriched) -> Result<()> {
    let colors: Vec<_> = world
        .buildings_raw
        .iter()
        .map(|b| roof::rgb_to_lab(b.mean_rgb))
        .collect();
    let rows = roof::palette_report(&enriched.model, &colors);
    let mut w = csv::Writer::from_path(cfg.out_dir.join("palette.csv"))?;
    w.write_record(["cluster", "size", "l", "a", "b", "r", "g", "b_srgb", "material"])?;
    for row in rows {
        w.write_record([
            row.cluster.to_string(),
            row.size.to_string(),
            row.centroid.l.to_string(),
            row.centroid.a.to_string(),
            row.centroid.b.to_string(),
            format!("{:.1}", row.rgb[0]),
            format!("{:.1}", row.rgb[1]),
            format!("{:.1}", row.rgb[2]),
            row.material.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn effect_record(
    outcome: Proxy,
    estimator: &str,
    term: &str,
    e: &EffectEstimate,
) -> [String; 11] {
    [
        outcome.as_str().to_string(),
        estimator.to_string(),
        term.to_string(),
        e.coefficient.to_string(),
        e.se.to_string(),
        e.ci95.0.to_string(),
        e.ci95.1.to_string(),
        e.t_stat.to_string(),
        e.p_value.to_string(),
        e.n.to_string(),
        e.df.to_string(),
    ]
}

const EFFECT_HEADER: [&str; 11] = [
    "outcome",
    "estimator",
    "term",
    "coefficient",
    "se",
    "ci_lo",
    "ci_hi",
    "t",
    "p",
    "n",
    "df",
];

pub fn write_effects(cfg: &RunConfig, effects: &Effects) -> Result<()> {
    let mut w = csv::Writer::from_path(cfg.out_dir.join("effects.csv"))?;
    w.write_record(EFFECT_HEADER)?;
    for (proxy, e) in &effects.pooled {
        w.write_record(effect_record(*proxy, "pooled", "x", e))?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(cfg.out_dir.join("binned_effects.csv"))?;
    w.write_record(EFFECT_HEADER)?;
    for (proxy, b) in &effects.binned {
        for bin in &b.bins {
            w.write_record(effect_record(*proxy, "binned", &bin.label, &bin.estimate))?;
        }
    }
    w.flush()?;

    let mut note = String::new();
    for (proxy, b) in &effects.binned {
        if !b.dropped_bins.is_empty() {
            let _ = writeln!(
                note,
                "dropped_bins.{} = {}",
                proxy.as_str(),
                b.dropped_bins.join(",")
            );
        }
    }
    std::fs::write(cfg.out_dir.join("estimate_report.txt"), note)?;
    Ok(())
}

pub fn read_pooled_effects(path: &Path) -> Result<BTreeMap<Proxy, EffectEstimate>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        if &rec[1] != "pooled" {
            continue;
        }
        let proxy = Proxy::parse(&rec[0]).ok_or_else(|| anyhow!("bad outcome {:?}", &rec[0]))?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| anyhow!("bad number {:?} in effects table", &rec[i]))
        };
        out.insert(
            proxy,
            EffectEstimate {
                coefficient: f(3)?,
                se: f(4)?,
                ci95: (f(5)?, f(6)?),
                t_stat: f(7)?,
                p_value: f(8)?,
                n: rec[9].parse()?,
                df: rec[10].parse()?,
            },
        );
    }
    Ok(out)
}

pub fn write_engel(cfg: &RunConfig, engel: &EngelOutputs) -> Result<()> {
    let mut w = csv::Writer::from_path(cfg.out_dir.join("engel.csv"))?;
    w.write_record(["proxy", "welfare", "alpha", "beta", "se_alpha", "se_beta", "n"])?;
    for ((proxy, welfare), fit) in &engel.fits {
        w.write_record([
            proxy.as_str().to_string(),
            welfare.as_str().to_string(),
            fit.alpha.to_string(),
            fit.beta.to_string(),
            fit.se_alpha.to_string(),
            fit.se_beta.to_string(),
            fit.n.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(cfg.out_dir.join("engel_loess.csv"))?;
    w.write_record(["proxy", "welfare", "w", "q_fit", "band_lo", "band_hi"])?;
    for ((proxy, welfare), curve) in &engel.loess {
        for i in 0..curve.w.len() {
            w.write_record([
                proxy.as_str().to_string(),
                welfare.as_str().to_string(),
                curve.w[i].to_string(),
                curve.fitted[i].to_string(),
                curve.band_lo[i].to_string(),
                curve.band_hi[i].to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(cfg.out_dir.join("linearity.csv"))?;
    w.write_record(["proxy", "welfare", "f_stat", "df_num", "df_den", "p"])?;
    for ((proxy, welfare), t) in &engel.linearity {
        w.write_record([
            proxy.as_str().to_string(),
            welfare.as_str().to_string(),
            t.f_stat.to_string(),
            t.df_num.to_string(),
            t.df_den.to_string(),
            t.p_value.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(cfg.out_dir.join("arm_comparison.csv"))?;
    w.write_record(["proxy", "welfare", "arm", "alpha", "beta", "se_beta", "n"])?;
    for ((proxy, welfare, arm), fit) in &engel.arm_fits {
        w.write_record([
            proxy.as_str().to_string(),
            welfare.as_str().to_string(),
            arm.as_str().to_string(),
            fit.alpha.to_string(),
            fit.beta.to_string(),
            fit.se_beta.to_string(),
            fit.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_engel_fits(path: &Path) -> Result<BTreeMap<(Proxy, Welfare), EngelFit>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let proxy = Proxy::parse(&rec[0]).ok_or_else(|| anyhow!("bad proxy {:?}", &rec[0]))?;
        let welfare =
            Welfare::parse(&rec[1]).ok_or_else(|| anyhow!("bad welfare {:?}", &rec[1]))?;
        out.insert(
            (proxy, welfare),
            EngelFit {
                alpha: rec[2].parse()?,
                beta: rec[3].parse()?,
                se_alpha: rec[4].parse()?,
                se_beta: rec[5].parse()?,
                n: rec[6].parse()?,
                residuals: Vec::new(),
            },
        );
    }
    Ok(out)
}

pub fn write_scaled(
    cfg: &RunConfig,
    scaled: &BTreeMap<(Proxy, Welfare), ScaledEffect>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(cfg.out_dir.join("scaled_effects.csv"))?;
    w.write_record([
        "source",
        "proxy",
        "welfare",
        "tau_q",
        "se_tau_q",
        "beta",
        "se_beta",
        "tau_w",
        "se_tau_w",
        "ci_lo",
        "ci_hi",
    ])?;
    for ((proxy, welfare), s) in scaled {
        w.write_record([
            "satellite".to_string(),
            proxy.as_str().to_string(),
            welfare.as_str().to_string(),
            s.tau_q.to_string(),
            s.se_tau_q.to_string(),
            s.beta.to_string(),
            s.se_beta.to_string(),
            s.tau_w.to_string(),
            s.se_tau_w.to_string(),
            s.ci95.0.to_string(),
            s.ci95.1.to_string(),
        ])?;
    }
    if let (Some(tau), Some(lo), Some(hi)) =
        (cfg.benchmark_tau_w, cfg.benchmark_ci_lo, cfg.benchmark_ci_hi)
    {
        w.write_record([
            "survey_benchmark".to_string(),
            String::new(),
            Welfare::TotalAssets.as_str().to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            tau.to_string(),
            ((hi - lo) / (2.0 * satengel_core::econ::CRITICAL_95)).to_string(),
            lo.to_string(),
            hi.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_placebo(cfg: &RunConfig, proxy: Proxy, runs: &PlaceboRun) -> Result<()> {
    let mut w = csv::Writer::from_path(cfg.out_dir.join("placebo.csv"))?;
    w.write_record(["outcome", "draw", "estimator", "term", "coefficient", "se", "t"])?;
    for d in &runs.draws {
        w.write_record([
            proxy.as_str().to_string(),
            d.draw.to_string(),
            "pooled".to_string(),
            "x".to_string(),
            d.pooled.coefficient.to_string(),
            d.pooled.se.to_string(),
            d.pooled.t_stat.to_string(),
        ])?;
        for bin in &d.binned.bins {
            w.write_record([
                proxy.as_str().to_string(),
                d.draw.to_string(),
                "binned".to_string(),
                bin.label.clone(),
                bin.estimate.coefficient.to_string(),
                bin.estimate.se.to_string(),
                bin.estimate.t_stat.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
