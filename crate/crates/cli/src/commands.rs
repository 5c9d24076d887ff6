//! Subcommand implementations. Commands compose through files in the run
//! directory: rasterize writes cells.csv, match writes matched.csv, estimate
//! and engel read those back, scale joins their outputs. Every command
//! refreshes the run manifest first.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use satengel_core::econ::{BinnedEffect, BinnedEffects, EffectEstimate, LoessCurve};
use satengel_core::ingest::Arm;
use satengel_core::rasterize;
use satengel_core::synth::{self, SynthConfig};
use satengel_core::{Proxy, Welfare};

use crate::config::RunConfig;
use crate::figures::{self, MapVariable};
use crate::manifest;
use crate::pipeline::{self, PipelineOptions};

pub fn init_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    manifest::write_manifest(cfg, &cfg.out_dir.join("manifest.txt"))
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        bail!(
            "{} not found; run `satengel {produced_by}` first",
            path.display()
        );
    }
    Ok(())
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub tau_w: f64,
    pub corrupt_tin_shift: f64,
    pub small: bool,
}

/// Generate a synthetic world plus a ready-to-run config. Ground truth goes
/// next to the world directory, never inside it; the pipeline reads only
/// `world/`.
pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut config = if args.small {
        SynthConfig::small(args.seed)
    } else {
        SynthConfig {
            seed: args.seed,
            ..SynthConfig::default()
        }
    };
    config.tau_w_star = args.tau_w;
    config.corrupt_tin_shift = args.corrupt_tin_shift;

    let world_dir = args.out.join("world");
    let truth = synth::generate_world(&config, &world_dir).context("generating world")?;
    truth
        .save(&args.out.join("truth.txt"))
        .context("writing ground truth")?;
    RunConfig::write_for_world(&world_dir, &args.out.join("out"), &args.out.join("run.cfg"))?;
    println!(
        "world: {} households, {} villages, {} buildings, {} survey rows",
        truth.n_households, truth.n_villages, truth.n_buildings, truth.n_survey
    );
    println!("config: {}", args.out.join("run.cfg").display());
    Ok(())
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let world = pipeline::load_world(cfg)?;
    let enriched = pipeline::enrich_world(cfg, &world)?;
    pipeline::write_ingest_report(cfg, &world.reports, &enriched.report, None)?;
    for r in &world.reports {
        println!(
            "{}: {} rows, {} used, {} skipped",
            r.source,
            r.rows_total,
            r.rows_used,
            r.skipped.len()
        );
    }
    Ok(())
}

pub fn cmd_rasterize(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let world = pipeline::load_world(cfg)?;
    let enriched = pipeline::enrich_world(cfg, &world)?;
    let (cells, outcome_report) = pipeline::build_cells(cfg, &world, &enriched)?;
    pipeline::write_ingest_report(cfg, &world.reports, &enriched.report, Some(&outcome_report))?;
    enriched.model.save(&cfg.out_dir.join("roof_model.txt"))?;
    rasterize::write_cells(&cells, &cfg.out_dir.join("cells.csv"))?;
    println!(
        "{} cells with eligible households; {} buildings outside retained cells",
        cells.len(),
        outcome_report.buildings_outside
    );
    Ok(())
}

pub fn cmd_match(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let world = pipeline::load_world(cfg)?;
    let enriched = pipeline::enrich_world(cfg, &world)?;
    let (result, table) = pipeline::run_matching(cfg, &world, &enriched)?;
    satengel_core::matching::write_matched_table(&table, &cfg.out_dir.join("matched.csv"))?;
    let mut report = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(report, "buildings_matched = {}", result.buildings.matched);
    let _ = writeln!(report, "buildings_unmatched = {}", result.buildings.unmatched);
    let _ = writeln!(report, "surveys_matched = {}", result.survey.matched);
    let _ = writeln!(
        report,
        "surveys_out_of_radius = {}",
        result.survey.unmatched_out_of_radius
    );
    let _ = writeln!(
        report,
        "surveys_lost_collision = {}",
        result.survey.unmatched_lost_collision
    );
    let _ = writeln!(report, "matched_triples = {}", table.len());
    std::fs::write(cfg.out_dir.join("match_report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

pub fn cmd_estimate(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let cells_path = cfg.out_dir.join("cells.csv");
    require(&cells_path, "rasterize")?;
    let cells = rasterize::read_cells(&cells_path)?;
    let effects = pipeline::run_estimates(cfg, &cells)?;
    pipeline::write_effects(cfg, &effects)?;
    for (proxy, e) in &effects.pooled {
        println!(
            "{}: tau = {:.4} per unit, 95% CI [{:.4}, {:.4}], t({}) = {:.2}, p = {:.4}, n = {}",
            proxy.as_str(),
            e.coefficient,
            e.ci95.0,
            e.ci95.1,
            e.df,
            e.t_stat,
            e.p_value,
            e.n
        );
    }
    Ok(())
}

pub fn cmd_engel(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let matched_path = cfg.out_dir.join("matched.csv");
    require(&matched_path, "match")?;
    let table = satengel_core::matching::read_matched_table(&matched_path)?;
    let engel = pipeline::run_engel(cfg, &table, true, true)?;
    pipeline::write_engel(cfg, &engel)?;
    for ((proxy, welfare), fit) in &engel.fits {
        let lt = &engel.linearity[&(*proxy, *welfare)];
        println!(
            "{} on {}: beta = {:.6} (se {:.6}), n = {}; linearity F({}, {}) = {:.3}, p = {:.3}",
            proxy.as_str(),
            welfare.as_str(),
            fit.beta,
            fit.se_beta,
            fit.n,
            lt.df_num,
            lt.df_den,
            lt.f_stat,
            lt.p_value
        );
    }
    Ok(())
}

pub fn cmd_scale(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let effects_path = cfg.out_dir.join("effects.csv");
    let engel_path = cfg.out_dir.join("engel.csv");
    require(&effects_path, "estimate")?;
    require(&engel_path, "engel")?;
    let pooled = pipeline::read_pooled_effects(&effects_path)?;
    let fits = pipeline::read_engel_fits(&engel_path)?;

    let mut scaled = BTreeMap::new();
    for ((proxy, welfare), fit) in &fits {
        let effect = pooled
            .get(proxy)
            .ok_or_else(|| anyhow!("no pooled effect for {}", proxy.as_str()))?;
        let s = satengel_core::econ::scale_effect(effect, fit)
            .with_context(|| format!("scaling {}", proxy.as_str()))?;
        if !satengel_core::econ::check_scale_consistency(&s, 1e-9) {
            bail!("scaled effect for {} failed the consistency check", proxy.as_str());
        }
        scaled.insert((*proxy, *welfare), s);
    }
    pipeline::write_scaled(cfg, &scaled)?;
    for ((proxy, welfare), s) in &scaled {
        println!(
            "{} via {}: tau_w = {:.2}, 95% CI [{:.2}, {:.2}]",
            proxy.as_str(),
            welfare.as_str(),
            s.tau_w,
            s.ci95.0,
            s.ci95.1
        );
    }
    Ok(())
}

pub fn cmd_placebo(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let cells_path = cfg.out_dir.join("cells.csv");
    require(&cells_path, "rasterize")?;
    let cells = rasterize::read_cells(&cells_path)?;
    let world = pipeline::load_world(cfg)?;
    let proxy = cfg.proxies.first().copied().unwrap_or(Proxy::Footprint);
    let run = pipeline::run_placebo(cfg, &world, &cells, proxy)?;
    pipeline::write_placebo(cfg, proxy, &run)?;
    let mean: f64 = run.draws.iter().map(|d| d.pooled.coefficient).sum::<f64>()
        / run.draws.len().max(1) as f64;
    let rejections = run
        .draws
        .iter()
        .filter(|d| d.pooled.t_stat.abs() > 1.96)
        .count();
    println!(
        "{} placebo draws on {}: mean pooled estimate {:.4}, |t|>1.96 in {} draws",
        run.draws.len(),
        proxy.as_str(),
        mean,
        rejections
    );
    Ok(())
}

fn read_binned_effects(path: &Path) -> Result<BTreeMap<Proxy, BinnedEffects>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out: BTreeMap<Proxy, BinnedEffects> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let proxy = Proxy::parse(&rec[0]).ok_or_else(|| anyhow!("bad outcome {:?}", &rec[0]))?;
        let f = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| anyhow!("bad number {:?}", &rec[i]))
        };
        let n: usize = rec[9].parse()?;
        let estimate = EffectEstimate {
            coefficient: f(3)?,
            se: f(4)?,
            ci95: (f(5)?, f(6)?),
            t_stat: f(7)?,
            p_value: f(8)?,
            n,
            df: rec[10].parse()?,
        };
        let entry = out.entry(proxy).or_insert_with(|| BinnedEffects {
            bins: Vec::new(),
            dropped_bins: Vec::new(),
            n,
        });
        entry.bins.push(BinnedEffect {
            label: rec[2].to_string(),
            estimate,
        });
    }
    Ok(out)
}

/// Placebo binned coefficients per draw, as (bin label, coefficient) pairs.
fn read_placebo_lines(path: &Path) -> Result<BTreeMap<Proxy, Vec<Vec<(String, f64)>>>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out: BTreeMap<Proxy, BTreeMap<usize, Vec<(String, f64)>>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        if &rec[2] != "binned" {
            continue;
        }
        let proxy = Proxy::parse(&rec[0]).ok_or_else(|| anyhow!("bad outcome {:?}", &rec[0]))?;
        let draw: usize = rec[1].parse()?;
        let coef: f64 = rec[4].parse()?;
        out.entry(proxy)
            .or_default()
            .entry(draw)
            .or_default()
            .push((rec[3].to_string(), coef));
    }
    Ok(out
        .into_iter()
        .map(|(p, draws)| (p, draws.into_values().collect()))
        .collect())
}

fn read_loess_curves(
    path: &Path,
    span: f64,
    degree: usize,
) -> Result<BTreeMap<(Proxy, Welfare), LoessCurve>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out: BTreeMap<(Proxy, Welfare), LoessCurve> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let proxy = Proxy::parse(&rec[0]).ok_or_else(|| anyhow!("bad proxy {:?}", &rec[0]))?;
        let welfare =
            Welfare::parse(&rec[1]).ok_or_else(|| anyhow!("bad welfare {:?}", &rec[1]))?;
        let curve = out.entry((proxy, welfare)).or_insert_with(|| LoessCurve {
            w: Vec::new(),
            fitted: Vec::new(),
            band_lo: Vec::new(),
            band_hi: Vec::new(),
            sigma2: 0.0,
            span,
            degree,
        });
        curve.w.push(rec[2].parse()?);
        curve.fitted.push(rec[3].parse()?);
        curve.band_lo.push(rec[4].parse()?);
        curve.band_hi.push(rec[5].parse()?);
    }
    Ok(out)
}

pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let cells_path = cfg.out_dir.join("cells.csv");
    require(&cells_path, "rasterize")?;
    let cells = rasterize::read_cells(&cells_path)?;

    for (variable, name) in [
        (MapVariable::Intensity, "map_intensity.svg"),
        (MapVariable::Footprint, "map_footprint.svg"),
        (MapVariable::TinArea, "map_tin.svg"),
        (MapVariable::NightLight, "map_night.svg"),
    ] {
        let (lo, hi) = figures::render_map(
            &cells,
            variable,
            cfg.winsor_outcome_upper_pct,
            &cfg.out_dir.join(name),
        )?;
        println!("{name}: scale [{lo:.4}, {hi:.4}]");
    }

    let effects_path = cfg.out_dir.join("effects.csv");
    let binned_path = cfg.out_dir.join("binned_effects.csv");
    require(&effects_path, "estimate")?;
    require(&binned_path, "estimate")?;
    let pooled = pipeline::read_pooled_effects(&effects_path)?;
    let binned = read_binned_effects(&binned_path)?;
    let placebo_path = cfg.out_dir.join("placebo.csv");
    let placebo = if placebo_path.exists() {
        read_placebo_lines(&placebo_path)?
    } else {
        BTreeMap::new()
    };
    let outcomes: Vec<_> = cfg
        .proxies
        .iter()
        .filter_map(|p| {
            let b = binned.get(p)?;
            let e = pooled.get(p)?;
            Some((*p, b, e, placebo.get(p)))
        })
        .collect();
    figures::render_effects_figure(&outcomes, &cfg.out_dir.join("fig_effects.svg"))?;
    println!("fig_effects.svg: {} panels", outcomes.len());

    let engel_path = cfg.out_dir.join("engel.csv");
    let loess_path = cfg.out_dir.join("engel_loess.csv");
    let matched_path = cfg.out_dir.join("matched.csv");
    require(&engel_path, "engel")?;
    require(&loess_path, "engel")?;
    require(&matched_path, "match")?;
    let fits = pipeline::read_engel_fits(&engel_path)?;
    let curves = read_loess_curves(&loess_path, cfg.loess_span, cfg.loess_degree)?;
    let table = satengel_core::matching::read_matched_table(&matched_path)?;
    let welfare = cfg.welfare_measures.first().copied().unwrap_or(Welfare::TotalAssets);
    let filters = pipeline::engel_filters(cfg);
    let mut panels = Vec::new();
    let mut scatter_store: Vec<Vec<(f64, f64)>> = Vec::new();
    for &proxy in &cfg.proxies {
        let obs =
            satengel_core::matching::build_engel_observations(&table, proxy, welfare, &filters)?;
        // Deterministic thinning keeps figure size bounded.
        let control: Vec<(f64, f64)> = obs
            .iter()
            .filter(|o| o.arm == Arm::Control)
            .enumerate()
            .filter(|(i, _)| i % (obs.len() / 600 + 1) == 0)
            .map(|(_, o)| (o.w, o.q))
            .collect();
        scatter_store.push(control);
    }
    for (k, &proxy) in cfg.proxies.iter().enumerate() {
        let (Some(fit), Some(curve)) = (fits.get(&(proxy, welfare)), curves.get(&(proxy, welfare)))
        else {
            continue;
        };
        panels.push((proxy, fit, curve, scatter_store[k].clone()));
    }
    figures::render_engel_figure(&panels, welfare.as_str(), &cfg.out_dir.join("fig_engel.svg"))?;
    println!("fig_engel.svg: {} panels", panels.len());
    Ok(())
}

/// One-shot pipeline: all stages and outputs in a single pass.
pub fn cmd_run(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let summary = pipeline::run_full_pipeline(cfg, &PipelineOptions::default())?;
    println!(
        "{} cells, {} matched households",
        summary.n_cells, summary.n_matched
    );
    for ((proxy, welfare), s) in &summary.scaled {
        println!(
            "{} via {}: tau_w = {:.2}, 95% CI [{:.2}, {:.2}]",
            proxy.as_str(),
            welfare.as_str(),
            s.tau_w,
            s.ci95.0,
            s.ci95.1
        );
    }
    Ok(())
}
