//! Roof material classification from representative roof colors.
//!
//! Mean roof RGB values are projected into CIELAB (Euclidean distance there
//! tracks perceptual difference, which is why the clustering happens in Lab
//! and not RGB), clustered with seeded k-means, and each cluster is mapped to
//! a material class. The cluster-to-material map is an auditable config
//! artifact: the fitted model serializes to a plain-text document the analyst
//! can review and edit before re-running.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geo::{self, GeoPoint, PixelPolygon};
use crate::ingest::BuildingFeatureRaw;
use crate::kv::{KvDoc, KvError};

#[derive(Debug, Error)]
pub enum RoofError {
    #[error("k-means needs at least {k} distinct colors, got {distinct}")]
    TooFewDistinctColors { k: usize, distinct: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cluster {0} has no material mapping")]
    UnmappedCluster(usize),
    #[error("model document: {0}")]
    Model(#[from] KvError),
    #[error("model document: unknown material {0:?}")]
    UnknownMaterial(String),
}

/// CIELAB color under the D65 white point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabColor {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabColor {
    #[inline]
    pub fn distance2(&self, other: &LabColor) -> f64 {
        (self.l - other.l).powi(2) + (self.a - other.a).powi(2) + (self.b - other.b).powi(2)
    }

    /// Chroma: distance from the neutral axis.
    #[inline]
    pub fn chroma(&self) -> f64 {
        (self.a * self.a + self.b * self.b).sqrt()
    }

    /// Hue angle in degrees, in (-180, 180].
    #[inline]
    pub fn hue_deg(&self) -> f64 {
        self.b.atan2(self.a).to_degrees()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Material {
    Tin,
    Thatched,
    Painted,
}

impl Material {
    pub fn as_str(&self) -> &'static str {
        match self {
            Material::Tin => "tin",
            Material::Thatched => "thatched",
            Material::Painted => "painted",
        }
    }

    pub fn parse(s: &str) -> Result<Self, RoofError> {
        match s {
            "tin" => Ok(Material::Tin),
            "thatched" => Ok(Material::Thatched),
            "painted" => Ok(Material::Painted),
            other => Err(RoofError::UnknownMaterial(other.to_string())),
        }
    }
}

const D65_XN: f64 = 0.95047;
const D65_ZN: f64 = 1.08883;

fn srgb_channel_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_channel_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA3: f64 = 216.0 / 24389.0; // (6/29)^3
    const SLOPE: f64 = 24389.0 / 27.0 / 116.0; // 1/(3*(6/29)^2)
    if t > DELTA3 {
        t.cbrt()
    } else {
        SLOPE * t + 16.0 / 116.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// sRGB (0-255 per channel) to CIELAB via linear RGB and XYZ (D65).
pub fn rgb_to_lab(rgb: [f64; 3]) -> LabColor {
    let r = srgb_channel_to_linear(rgb[0] / 255.0);
    let g = srgb_channel_to_linear(rgb[1] / 255.0);
    let b = srgb_channel_to_linear(rgb[2] / 255.0);

    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;

    let fx = lab_f(x / D65_XN);
    let fy = lab_f(y);
    let fz = lab_f(z / D65_ZN);

    LabColor {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// Inverse transform, used for palette reports. Channels are clamped to the
/// sRGB gamut.
pub fn lab_to_rgb(lab: LabColor) -> [f64; 3] {
    let fy = (lab.l + 16.0) / 116.0;
    let fx = fy + lab.a / 500.0;
    let fz = fy - lab.b / 200.0;

    let x = lab_f_inv(fx) * D65_XN;
    let y = lab_f_inv(fy);
    let z = lab_f_inv(fz) * D65_ZN;

    let r = 3.2404542 * x - 1.5371385 * y - 0.4985314 * z;
    let g = -0.9692660 * x + 1.8760108 * y + 0.0415560 * z;
    let b = 0.0556434 * x - 0.2040259 * y + 1.0572252 * z;

    [
        (linear_channel_to_srgb(r) * 255.0).clamp(0.0, 255.0),
        (linear_channel_to_srgb(g) * 255.0).clamp(0.0, 255.0),
        (linear_channel_to_srgb(b) * 255.0).clamp(0.0, 255.0),
    ]
}

/// Fitted k-means model plus the cluster-to-material map.
#[derive(Debug, Clone, PartialEq)]
pub struct RoofClusterModel {
    pub centroids: Vec<LabColor>,
    pub cluster_to_material: Vec<Material>,
    pub seed: u64,
}

impl RoofClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest centroid in Lab; equidistant centroids resolve to the lower
    /// cluster index.
    pub fn assign_cluster(&self, lab: &LabColor) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centroids.iter().enumerate() {
            let d = lab.distance2(c);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn assign_material(&self, lab: &LabColor) -> Material {
        self.cluster_to_material[self.assign_cluster(lab)]
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("k", self.k());
        doc.set("seed", self.seed);
        for (i, c) in self.centroids.iter().enumerate() {
            doc.set(format!("centroid.{i}.l"), c.l);
            doc.set(format!("centroid.{i}.a"), c.a);
            doc.set(format!("centroid.{i}.b"), c.b);
            doc.set(format!("material.{i}"), self.cluster_to_material[i].as_str());
        }
        doc
    }

    pub fn save(&self, path: &Path) -> Result<(), RoofError> {
        Ok(self.to_doc().save(path)?)
    }

    pub fn from_doc(doc: &KvDoc) -> Result<Self, RoofError> {
        let k = doc.get_usize("k")?;
        let seed = doc.get_u64("seed")?;
        let mut centroids = Vec::with_capacity(k);
        let mut materials = Vec::with_capacity(k);
        for i in 0..k {
            centroids.push(LabColor {
                l: doc.get_f64(&format!("centroid.{i}.l"))?,
                a: doc.get_f64(&format!("centroid.{i}.a"))?,
                b: doc.get_f64(&format!("centroid.{i}.b"))?,
            });
            let mat = doc
                .get(&format!("material.{i}"))
                .ok_or(RoofError::UnmappedCluster(i))?;
            materials.push(Material::parse(mat)?);
        }
        Ok(Self {
            centroids,
            cluster_to_material: materials,
            seed,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RoofError> {
        Self::from_doc(&KvDoc::load(path)?)
    }
}

/// Default cluster-to-material rule, applied to fitted centroids and meant to
/// be reviewed via the palette report: bright low-chroma clusters are tin,
/// dark clusters in the brown/tan hue band are thatched, the rest painted.
pub fn default_material_for(centroid: &LabColor) -> Material {
    if centroid.l > 60.0 && centroid.chroma() < 25.0 {
        Material::Tin
    } else if centroid.l < 55.0 && (20.0..=90.0).contains(&centroid.hue_deg()) {
        Material::Thatched
    } else {
        Material::Painted
    }
}

fn kmeans_pp_init(colors: &[LabColor], k: usize, rng: &mut ChaCha8Rng) -> Vec<LabColor> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(colors[rng.gen_range(0..colors.len())]);
    let mut d2: Vec<f64> = colors.iter().map(|c| c.distance2(&centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = colors.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..colors.len())
        };
        let c = colors[next];
        centroids.push(c);
        for (i, color) in colors.iter().enumerate() {
            d2[i] = d2[i].min(color.distance2(&c));
        }
    }
    centroids
}

fn nearest(centroids: &[LabColor], c: &LabColor) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, ctr) in centroids.iter().enumerate() {
        let d = c.distance2(ctr);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Within-cluster sum of squares for a given assignment.
pub fn wcss(colors: &[LabColor], centroids: &[LabColor], assignment: &[usize]) -> f64 {
    colors
        .iter()
        .zip(assignment)
        .map(|(c, &a)| c.distance2(&centroids[a]))
        .sum()
}

/// Lloyd's algorithm with k-means++ initialization under a fixed seed.
///
/// Iterates to an assignment fixpoint or 300 iterations. An emptied cluster
/// is re-seeded at the point farthest from its current centroid.
pub fn fit_roof_clusters(
    colors: &[LabColor],
    k: usize,
    seed: u64,
) -> Result<RoofClusterModel, RoofError> {
    if k == 0 {
        return Err(RoofError::ZeroK);
    }
    let mut distinct: Vec<[u64; 3]> = colors
        .iter()
        .map(|c| [c.l.to_bits(), c.a.to_bits(), c.b.to_bits()])
        .collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < k {
        return Err(RoofError::TooFewDistinctColors {
            k,
            distinct: distinct.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(colors, k, &mut rng);
    let mut assignment = vec![usize::MAX; colors.len()];

    for _ in 0..300 {
        // Assignment step: parallel, order-independent (writes are disjoint).
        let new_assignment: Vec<usize> = colors.par_iter().map(|c| nearest(&centroids, c)).collect();
        let converged = new_assignment == assignment;
        assignment = new_assignment;
        if converged {
            break;
        }

        // Update step: sequential accumulation in input order for bit-stable
        // centroids across runs.
        let mut sums = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); k];
        for (c, &a) in colors.iter().zip(&assignment) {
            let s = &mut sums[a];
            s.0 += c.l;
            s.1 += c.a;
            s.2 += c.b;
            s.3 += 1;
        }
        for (i, (sl, sa, sb, n)) in sums.into_iter().enumerate() {
            if n > 0 {
                let inv = 1.0 / n as f64;
                centroids[i] = LabColor {
                    l: sl * inv,
                    a: sa * inv,
                    b: sb * inv,
                };
            } else {
                // Re-seed at the point farthest from this centroid.
                let far = colors
                    .iter()
                    .enumerate()
                    .max_by(|(ia, a), (ib, b)| {
                        let da = a.distance2(&centroids[i]);
                        let db = b.distance2(&centroids[i]);
                        da.partial_cmp(&db)
                            .unwrap()
                            .then(ib.cmp(ia)) // first index wins ties
                    })
                    .map(|(j, _)| j)
                    .unwrap();
                centroids[i] = colors[far];
            }
        }
    }

    let cluster_to_material = centroids.iter().map(default_material_for).collect();
    Ok(RoofClusterModel {
        centroids,
        cluster_to_material,
        seed,
    })
}

/// A building with derived housing metrics attached.
#[derive(Debug, Clone)]
pub struct BuildingFeature {
    pub id: String,
    pub polygon: PixelPolygon,
    pub mean_rgb: [f64; 3],
    pub confidence: Option<f64>,
    pub footprint_m2: f64,
    pub centroid: GeoPoint,
    pub lab: LabColor,
    pub material: Material,
}

/// Geometry drops recorded while enriching.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnrichReport {
    pub input: usize,
    pub kept: usize,
    pub dropped_degenerate: usize,
    pub dropped_zero_area: usize,
}

/// Per building: simplify, measure, locate, classify. Input order preserved.
pub fn enrich_buildings(
    raw: &[BuildingFeatureRaw],
    model: &RoofClusterModel,
    simplify_tolerance_px: f64,
) -> (Vec<BuildingFeature>, EnrichReport) {
    let results: Vec<Option<BuildingFeature>> = raw
        .par_iter()
        .map(|feat| {
            let simplified = geo::simplify_polygon(&feat.polygon, simplify_tolerance_px).ok()?;
            let footprint_m2 = geo::polygon_area_m2(&simplified).ok()?;
            let centroid = geo::polygon_centroid(&simplified).ok()?;
            let lab = rgb_to_lab(feat.mean_rgb);
            let material = model.assign_material(&lab);
            Some(BuildingFeature {
                id: feat.id.clone(),
                polygon: simplified,
                mean_rgb: feat.mean_rgb,
                confidence: feat.confidence,
                footprint_m2,
                centroid,
                lab,
                material,
            })
        })
        .collect();

    let mut report = EnrichReport {
        input: raw.len(),
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(raw.len());
    for (feat, out) in raw.iter().zip(results) {
        match out {
            Some(b) => kept.push(b),
            // Re-run the failing step to attribute the drop.
            None => match geo::simplify_polygon(&feat.polygon, simplify_tolerance_px) {
                Err(_) => report.dropped_degenerate += 1,
                Ok(_) => report.dropped_zero_area += 1,
            },
        }
    }
    report.kept = kept.len();
    (kept, report)
}

/// One row of the palette report the analyst reviews before accepting the
/// default material map.
#[derive(Debug, Clone)]
pub struct PaletteRow {
    pub cluster: usize,
    pub size: usize,
    pub centroid: LabColor,
    pub rgb: [f64; 3],
    pub material: Material,
}

pub fn palette_report(model: &RoofClusterModel, colors: &[LabColor]) -> Vec<PaletteRow> {
    let mut sizes = vec![0usize; model.k()];
    for c in colors {
        sizes[model.assign_cluster(c)] += 1;
    }
    model
        .centroids
        .iter()
        .enumerate()
        .map(|(i, c)| PaletteRow {
            cluster: i,
            size: sizes[i],
            centroid: *c,
            rgb: lab_to_rgb(*c),
            material: model.cluster_to_material[i],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_black_red_references() {
        let white = rgb_to_lab([255.0, 255.0, 255.0]);
        assert!((white.l - 100.0).abs() < 0.01);
        assert!(white.a.abs() < 0.05);
        assert!(white.b.abs() < 0.05);

        let black = rgb_to_lab([0.0, 0.0, 0.0]);
        assert!(black.l.abs() < 1e-9);
        assert!(black.a.abs() < 1e-9);
        assert!(black.b.abs() < 1e-9);

        let red = rgb_to_lab([255.0, 0.0, 0.0]);
        assert!((red.l - 53.24).abs() < 0.1);
        assert!((red.a - 80.09).abs() < 0.1);
        assert!((red.b - 67.20).abs() < 0.1);
    }

    #[test]
    fn lab_round_trips_to_rgb() {
        for rgb in [[12.0, 200.0, 99.0], [255.0, 128.0, 0.0], [37.0, 37.0, 37.0]] {
            let back = lab_to_rgb(rgb_to_lab(rgb));
            for i in 0..3 {
                assert!((back[i] - rgb[i]).abs() < 1e-3, "{rgb:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn lab_injective_on_rgb_lattice() {
        // 17^3 lattice: no two colors collapse within 1e-6.
        let mut labs = Vec::new();
        for r in (0..=255u16).step_by(16).take(17) {
            for g in (0..=255u16).step_by(16).take(17) {
                for b in (0..=255u16).step_by(16).take(17) {
                    labs.push(rgb_to_lab([r as f64, g as f64, b as f64]));
                }
            }
        }
        // Sort by L, then compare each color only against near-L colors.
        labs.sort_by(|x, y| x.l.partial_cmp(&y.l).unwrap());
        for i in 0..labs.len() {
            for j in (i + 1)..labs.len() {
                if labs[j].l - labs[i].l > 1e-3 {
                    break;
                }
                assert!(labs[i].distance2(&labs[j]) > 1e-12);
            }
        }
    }

    fn blob(center: (f64, f64, f64), n: usize, spread: f64) -> Vec<LabColor> {
        (0..n)
            .map(|i| {
                let t = i as f64 / n as f64;
                LabColor {
                    l: center.0 + spread * (t - 0.5),
                    a: center.1 + spread * ((t * 7.0).fract() - 0.5),
                    b: center.2 + spread * ((t * 13.0).fract() - 0.5),
                }
            })
            .collect()
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut colors = Vec::new();
        let centers = [(80.0, 0.0, 0.0), (40.0, 20.0, 30.0), (50.0, -40.0, 10.0)];
        for &c in &centers {
            colors.extend(blob(c, 50, 0.5));
        }
        let model = fit_roof_clusters(&colors, 3, 7).unwrap();
        // Brute-force blob means.
        for &c in &centers {
            let members = blob(c, 50, 0.5);
            let mean = LabColor {
                l: members.iter().map(|x| x.l).sum::<f64>() / 50.0,
                a: members.iter().map(|x| x.a).sum::<f64>() / 50.0,
                b: members.iter().map(|x| x.b).sum::<f64>() / 50.0,
            };
            let nearest = model
                .centroids
                .iter()
                .map(|ctr| ctr.distance2(&mean))
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 1e-12, "blob mean {mean:?} not recovered");
        }
    }

    #[test]
    fn kmeans_duplication_invariant() {
        let mut colors = blob((60.0, 5.0, 5.0), 40, 8.0);
        colors.extend(blob((30.0, -10.0, 20.0), 40, 8.0));
        let m1 = fit_roof_clusters(&colors, 2, 11).unwrap();
        let mut doubled = colors.clone();
        doubled.extend(colors.iter().copied());
        let m2 = fit_roof_clusters(&doubled, 2, 11).unwrap();
        // Same seed, duplicated points: centroids must agree as sets.
        for c in &m1.centroids {
            let d = m2
                .centroids
                .iter()
                .map(|x| x.distance2(c))
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-9);
        }
    }

    #[test]
    fn kmeans_k1_is_global_mean() {
        let colors = blob((55.0, 3.0, -7.0), 31, 12.0);
        let model = fit_roof_clusters(&colors, 1, 3).unwrap();
        let n = colors.len() as f64;
        let mean = LabColor {
            l: colors.iter().map(|c| c.l).sum::<f64>() / n,
            a: colors.iter().map(|c| c.a).sum::<f64>() / n,
            b: colors.iter().map(|c| c.b).sum::<f64>() / n,
        };
        assert!(model.centroids[0].distance2(&mean) < 1e-18);
    }

    #[test]
    fn kmeans_rejects_too_few_distinct() {
        let colors = vec![LabColor { l: 50.0, a: 0.0, b: 0.0 }; 20];
        assert!(matches!(
            fit_roof_clusters(&colors, 2, 0),
            Err(RoofError::TooFewDistinctColors { .. })
        ));
    }

    #[test]
    fn kmeans_reproducible_and_wcss_decreases() {
        let mut colors = blob((70.0, 1.0, 2.0), 60, 15.0);
        colors.extend(blob((35.0, 15.0, 25.0), 60, 15.0));
        colors.extend(blob((45.0, -30.0, 5.0), 60, 15.0));

        let m1 = fit_roof_clusters(&colors, 8, 99).unwrap();
        let m2 = fit_roof_clusters(&colors, 8, 99).unwrap();
        assert_eq!(m1, m2);

        // WCSS(final) <= WCSS(init): recompute the init under the same seed.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let init = kmeans_pp_init(&colors, 8, &mut rng);
        let init_assign: Vec<usize> = colors.iter().map(|c| nearest(&init, c)).collect();
        let final_assign: Vec<usize> = colors.iter().map(|c| nearest(&m1.centroids, c)).collect();
        assert!(
            wcss(&colors, &m1.centroids, &final_assign)
                <= wcss(&colors, &init, &init_assign) + 1e-9
        );
    }

    #[test]
    fn assignment_tie_breaks_low_index() {
        let model = RoofClusterModel {
            centroids: vec![
                LabColor { l: 40.0, a: 0.0, b: 0.0 },
                LabColor { l: 60.0, a: 0.0, b: 0.0 },
            ],
            cluster_to_material: vec![Material::Thatched, Material::Tin],
            seed: 0,
        };
        let midpoint = LabColor { l: 50.0, a: 0.0, b: 0.0 };
        assert_eq!(model.assign_cluster(&midpoint), 0);
        assert_eq!(model.assign_material(&midpoint), Material::Thatched);
        // A color equal to a centroid gets that cluster's material.
        assert_eq!(model.assign_material(&model.centroids[1].clone()), Material::Tin);
    }

    #[test]
    fn default_map_heuristics() {
        // Bright metallic gray.
        let gray = rgb_to_lab([200.0, 200.0, 205.0]);
        assert_eq!(default_material_for(&gray), Material::Tin);
        // Brown / tan.
        let brown = rgb_to_lab([120.0, 85.0, 55.0]);
        assert_eq!(default_material_for(&brown), Material::Thatched);
        // Saturated green paint.
        let green = rgb_to_lab([60.0, 140.0, 70.0]);
        assert_eq!(default_material_for(&green), Material::Painted);
    }

    #[test]
    fn model_round_trips_bit_exact() {
        let mut colors = blob((70.0, 1.0, 2.0), 30, 9.0);
        colors.extend(blob((35.0, 15.0, 25.0), 30, 9.0));
        let model = fit_roof_clusters(&colors, 4, 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roof_model.txt");
        model.save(&path).unwrap();
        let back = RoofClusterModel::load(&path).unwrap();
        assert_eq!(model, back);
    }
}
