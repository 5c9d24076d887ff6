//! Coordinate, distance, grid-indexing, and polygon geometry primitives.
//!
//! Buildings arrive as pixel-space polygons cut from Web Mercator map tiles;
//! everything downstream works in degrees and square meters. This module owns
//! the conversions between the two, the analysis grid, and great-circle
//! distances.

use thiserror::Error;

/// Mean Earth radius in meters, used for all great-circle distances.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Web Mercator meters per pixel at zoom 0 on the equator (2*pi*6378137/256).
pub const WEB_MERCATOR_M_PER_PX_Z0: f64 = 156_543.033_92;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("longitude {0} outside [-180, 180]")]
    LonOutOfRange(f64),
    #[error("latitude {0} outside [-90, 90]")]
    LatOutOfRange(f64),
    #[error("coordinate is not finite")]
    NonFinite,
    #[error("grid resolution must be positive, got {0}")]
    NonPositiveResolution(f64),
    #[error("polygon ring has {0} vertices, need at least 3")]
    TooFewVertices(usize),
    #[error("polygon ring has zero signed area")]
    ZeroArea,
    #[error("polygon vertex is not finite")]
    NonFiniteVertex,
    #[error("simplification left {0} vertices, polygon dropped")]
    DegenerateAfterSimplify(usize),
}

/// A WGS-84 coordinate in decimal degrees. Bounds are enforced at
/// construction so downstream code never revalidates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    lon: f64,
    lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self, GeoError> {
        if !lon.is_finite() || !lat.is_finite() {
            return Err(GeoError::NonFinite);
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::LonOutOfRange(lon));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::LatOutOfRange(lat));
        }
        Ok(Self { lon, lat })
    }

    #[inline]
    pub fn lon(&self) -> f64 {
        self.lon
    }

    #[inline]
    pub fn lat(&self) -> f64 {
        self.lat
    }
}

/// Haversine great-circle distance in meters.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlam = (b.lon - a.lon).to_radians();
    let s = (dphi * 0.5).sin().powi(2) + phi1.cos() * phi2.cos() * (dlam * 0.5).sin().powi(2);
    2.0 * EARTH_RADIUS_M * s.sqrt().min(1.0).asin()
}

/// Index of one cell in the regular analysis grid.
///
/// Cells are half-open intervals: a point on a shared boundary belongs to the
/// cell with the larger origin (floor semantics). `res` participates in
/// equality and ordering via its exact bit pattern, so mixing resolutions in
/// one collection cannot silently alias.
#[derive(Debug, Clone, Copy)]
pub struct CellId {
    pub col: i64,
    pub row: i64,
    pub res: f64,
}

impl CellId {
    /// Center of the cell in degrees.
    pub fn centroid(&self) -> Result<GeoPoint, GeoError> {
        GeoPoint::new(
            (self.col as f64 + 0.5) * self.res,
            (self.row as f64 + 0.5) * self.res,
        )
    }
}

impl PartialEq for CellId {
    fn eq(&self, other: &Self) -> bool {
        self.col == other.col && self.row == other.row && self.res.to_bits() == other.res.to_bits()
    }
}

impl Eq for CellId {}

impl std::hash::Hash for CellId {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.col.hash(state);
        self.row.hash(state);
        self.res.to_bits().hash(state);
    }
}

impl Ord for CellId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.row, self.col, self.res.to_bits()).cmp(&(other.row, other.col, other.res.to_bits()))
    }
}

impl PartialOrd for CellId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Map a point to its grid cell at resolution `res` (degrees).
pub fn cell_index(p: GeoPoint, res: f64) -> Result<CellId, GeoError> {
    if !(res > 0.0) {
        return Err(GeoError::NonPositiveResolution(res));
    }
    Ok(CellId {
        col: (p.lon / res).floor() as i64,
        row: (p.lat / res).floor() as i64,
        res,
    })
}

/// Georeference of one map tile: the tile center coordinate, the Web Mercator
/// zoom level, and the tile size in pixels. Pixel (0, 0) is the tile's
/// top-left corner; y grows southward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileGeoref {
    pub center: GeoPoint,
    pub zoom: u32,
    pub width_px: f64,
    pub height_px: f64,
}

impl TileGeoref {
    /// Meters per pixel at the equator for this zoom level.
    #[inline]
    pub fn meters_per_pixel_at_equator(&self) -> f64 {
        WEB_MERCATOR_M_PER_PX_Z0 / f64::powi(2.0, self.zoom as i32)
    }

    fn world_px(&self) -> f64 {
        256.0 * f64::powi(2.0, self.zoom as i32)
    }

    /// Global Web Mercator pixel coordinates of a geographic point.
    fn global_px(&self, p: GeoPoint) -> (f64, f64) {
        let w = self.world_px();
        let gx = (p.lon + 180.0) / 360.0 * w;
        let gy = (1.0 - p.lat.to_radians().tan().asinh() / std::f64::consts::PI) * 0.5 * w;
        (gx, gy)
    }

    /// Convert tile-local pixel coordinates to degrees.
    pub fn px_to_lonlat(&self, px: f64, py: f64) -> Result<GeoPoint, GeoError> {
        let w = self.world_px();
        let (cx, cy) = self.global_px(self.center);
        let gx = cx - self.width_px * 0.5 + px;
        let gy = cy - self.height_px * 0.5 + py;
        let lon = gx / w * 360.0 - 180.0;
        let lat = (std::f64::consts::PI * (1.0 - 2.0 * gy / w)).sinh().atan().to_degrees();
        GeoPoint::new(lon, lat)
    }

    /// Convert degrees to tile-local pixel coordinates.
    pub fn lonlat_to_px(&self, p: GeoPoint) -> (f64, f64) {
        let (cx, cy) = self.global_px(self.center);
        let (gx, gy) = self.global_px(p);
        (gx - cx + self.width_px * 0.5, gy - cy + self.height_px * 0.5)
    }
}

/// A building outline in tile pixel coordinates.
///
/// The ring is stored open: at least three vertices, the closing edge back to
/// the first vertex is implicit, and the signed area is nonzero. GeoJSON-style
/// closed rings are accepted and the duplicate terminal vertex is stripped.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPolygon {
    ring: Vec<[f64; 2]>,
    georef: TileGeoref,
}

impl PixelPolygon {
    pub fn new(mut ring: Vec<[f64; 2]>, georef: TileGeoref) -> Result<Self, GeoError> {
        if ring.len() >= 2 && ring.first() == ring.last() {
            ring.pop();
        }
        if ring.len() < 3 {
            return Err(GeoError::TooFewVertices(ring.len()));
        }
        if ring.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(GeoError::NonFiniteVertex);
        }
        if shoelace_signed_area(&ring) == 0.0 {
            return Err(GeoError::ZeroArea);
        }
        Ok(Self { ring, georef })
    }

    #[inline]
    pub fn ring(&self) -> &[[f64; 2]] {
        &self.ring
    }

    #[inline]
    pub fn georef(&self) -> &TileGeoref {
        &self.georef
    }

    pub fn tile_lat(&self) -> f64 {
        self.georef.center.lat()
    }

    pub fn meters_per_pixel_at_equator(&self) -> f64 {
        self.georef.meters_per_pixel_at_equator()
    }
}

/// Signed shoelace area of an open ring, in squared ring units.
fn shoelace_signed_area(ring: &[[f64; 2]]) -> f64 {
    let n = ring.len();
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = ring[i];
        let [x1, y1] = ring[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc * 0.5
}

/// Perpendicular distance from `p` to the segment `a`-`b`; falls back to the
/// point distance when the segment degenerates.
fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt();
    }
    let t = ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2;
    let t = t.clamp(0.0, 1.0);
    let (px, py) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - px).powi(2) + (p[1] - py).powi(2)).sqrt()
}

/// Distance from `p` to the infinite chord through `a`-`b` (Douglas-Peucker
/// uses the chord, not the clamped segment).
fn point_chord_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt();
    }
    ((dy * p[0] - dx * p[1] + b[0] * a[1] - b[1] * a[0]) / len).abs()
}

fn douglas_peucker_open(pts: &[[f64; 2]], tolerance: f64, keep: &mut Vec<usize>, offset: usize) {
    if pts.len() < 3 {
        return;
    }
    let (a, b) = (pts[0], pts[pts.len() - 1]);
    let mut max_d = 0.0;
    let mut max_i = 0;
    for (i, &p) in pts.iter().enumerate().take(pts.len() - 1).skip(1) {
        let d = point_chord_distance(p, a, b);
        if d > max_d {
            max_d = d;
            max_i = i;
        }
    }
    if max_d > tolerance {
        douglas_peucker_open(&pts[..=max_i], tolerance, keep, offset);
        keep.push(offset + max_i);
        douglas_peucker_open(&pts[max_i..], tolerance, keep, offset + max_i);
    }
}

/// Douglas-Peucker simplification of the closed ring.
///
/// Anchors are the first vertex and the vertex farthest from it, so the
/// result is a deterministic subset of the input vertices and re-running the
/// simplification is a fixpoint. Rings that collapse below three vertices are
/// reported as degenerate for the caller to drop and count.
pub fn simplify_polygon(poly: &PixelPolygon, tolerance: f64) -> Result<PixelPolygon, GeoError> {
    let ring = &poly.ring;
    // Second anchor: farthest vertex from vertex 0, first index wins ties.
    let mut far = 1;
    let mut far_d = -1.0;
    for (i, &v) in ring.iter().enumerate().skip(1) {
        let d = (v[0] - ring[0][0]).powi(2) + (v[1] - ring[0][1]).powi(2);
        if d > far_d {
            far_d = d;
            far = i;
        }
    }

    let mut keep = vec![0usize];
    douglas_peucker_open(&ring[..=far], tolerance, &mut keep, 0);
    keep.push(far);
    // Wrap-around arc: far .. n-1, 0.
    let mut tail: Vec<[f64; 2]> = ring[far..].to_vec();
    tail.push(ring[0]);
    let mut tail_keep = Vec::new();
    douglas_peucker_open(&tail, tolerance, &mut tail_keep, far);
    keep.extend(tail_keep);

    let simplified: Vec<[f64; 2]> = keep.iter().map(|&i| ring[i]).collect();
    if simplified.len() < 3 {
        return Err(GeoError::DegenerateAfterSimplify(simplified.len()));
    }
    PixelPolygon::new(simplified, poly.georef)
        .map_err(|_| GeoError::DegenerateAfterSimplify(keep.len()))
}

/// Ground area of the polygon in square meters.
///
/// Web Mercator inflates lengths by 1/cos(lat), so pixel areas shrink by
/// cos^2 of the tile latitude when converted to ground units.
pub fn polygon_area_m2(poly: &PixelPolygon) -> Result<f64, GeoError> {
    let px_area = shoelace_signed_area(&poly.ring).abs();
    if px_area == 0.0 {
        return Err(GeoError::ZeroArea);
    }
    let mpp = poly.meters_per_pixel_at_equator();
    let c = poly.tile_lat().to_radians().cos();
    Ok(px_area * mpp * mpp * c * c)
}

/// Area-weighted centroid of the polygon, in degrees.
pub fn polygon_centroid(poly: &PixelPolygon) -> Result<GeoPoint, GeoError> {
    let ring = &poly.ring;
    let n = ring.len();
    let a = shoelace_signed_area(ring);
    if a == 0.0 {
        return Err(GeoError::ZeroArea);
    }
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..n {
        let [x0, y0] = ring[i];
        let [x1, y1] = ring[(i + 1) % n];
        let cross = x0 * y1 - x1 * y0;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    let inv = 1.0 / (6.0 * a);
    poly.georef.px_to_lonlat(cx * inv, cy * inv)
}

/// Maximum distance from any input vertex to the simplified ring, used to
/// check the Douglas-Peucker tolerance bound.
pub fn max_vertex_deviation(original: &PixelPolygon, simplified: &PixelPolygon) -> f64 {
    let simp = &simplified.ring;
    let m = simp.len();
    original
        .ring
        .iter()
        .map(|&p| {
            (0..m)
                .map(|i| point_segment_distance(p, simp[i], simp[(i + 1) % m]))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_georef() -> TileGeoref {
        TileGeoref {
            center: GeoPoint::new(0.0, 0.0).unwrap(),
            zoom: 19,
            width_px: 640.0,
            height_px: 640.0,
        }
    }

    fn georef_at(lon: f64, lat: f64, zoom: u32) -> TileGeoref {
        TileGeoref {
            center: GeoPoint::new(lon, lat).unwrap(),
            zoom,
            width_px: 640.0,
            height_px: 640.0,
        }
    }

    fn poly(ring: Vec<[f64; 2]>, georef: TileGeoref) -> PixelPolygon {
        PixelPolygon::new(ring, georef).unwrap()
    }

    #[test]
    fn geopoint_rejects_out_of_range() {
        assert_eq!(GeoPoint::new(181.0, 0.0), Err(GeoError::LonOutOfRange(181.0)));
        assert_eq!(GeoPoint::new(0.0, -90.5), Err(GeoError::LatOutOfRange(-90.5)));
        assert_eq!(GeoPoint::new(f64::NAN, 0.0), Err(GeoError::NonFinite));
        assert!(GeoPoint::new(-180.0, 90.0).is_ok());
    }

    #[test]
    fn haversine_identity_is_zero() {
        let p = GeoPoint::new(34.56, -0.12).unwrap();
        assert_eq!(haversine_distance(p, p), 0.0);
    }

    #[test]
    fn haversine_meridian_step() {
        // R * dphi for 0.001 deg of latitude.
        let a = GeoPoint::new(0.0, 0.0).unwrap();
        let b = GeoPoint::new(0.0, 0.001).unwrap();
        let expect = EARTH_RADIUS_M * 0.001f64.to_radians();
        assert!((haversine_distance(a, b) - expect).abs() < 0.1);
        assert!((haversine_distance(a, b) - 111.19).abs() < 0.1);
    }

    #[test]
    fn haversine_parallel_step_at_60() {
        let a = GeoPoint::new(0.0, 60.0).unwrap();
        let b = GeoPoint::new(0.001, 60.0).unwrap();
        let expect = EARTH_RADIUS_M * 0.001f64.to_radians() * 60f64.to_radians().cos();
        assert!((haversine_distance(a, b) - expect).abs() < 0.1);
        assert!((haversine_distance(a, b) - 55.60).abs() < 0.1);
    }

    #[test]
    fn cell_index_floors() {
        let p = GeoPoint::new(34.0005, 0.0005).unwrap();
        let c = cell_index(p, 0.001).unwrap();
        assert_eq!((c.col, c.row), (34000, 0));

        let p = GeoPoint::new(-0.0001, 0.0).unwrap();
        let c = cell_index(p, 0.001).unwrap();
        assert_eq!((c.col, c.row), (-1, 0));
    }

    #[test]
    fn cell_index_rejects_bad_res() {
        let p = GeoPoint::new(0.0, 0.0).unwrap();
        assert!(matches!(cell_index(p, 0.0), Err(GeoError::NonPositiveResolution(_))));
        assert!(matches!(cell_index(p, -1.0), Err(GeoError::NonPositiveResolution(_))));
    }

    #[test]
    fn cell_centroid_round_trips() {
        let res = 0.001;
        for (lon, lat) in [(34.1234, -0.567), (-0.0001, 0.0), (179.9, 88.8), (0.0005, 0.0005)] {
            let p = GeoPoint::new(lon, lat).unwrap();
            let c = cell_index(p, res).unwrap();
            let back = cell_index(c.centroid().unwrap(), res).unwrap();
            assert_eq!(c, back, "({lon},{lat})");
        }
    }

    #[test]
    fn rectangle_survives_simplification() {
        let rect = poly(
            vec![[0.0, 0.0], [20.0, 0.0], [20.0, 10.0], [0.0, 10.0]],
            flat_georef(),
        );
        let simp = simplify_polygon(&rect, 3.0).unwrap();
        assert_eq!(simp.ring(), rect.ring());
    }

    #[test]
    fn near_collinear_midpoint_removed() {
        let rect = poly(
            vec![[0.0, 0.0], [10.0, 1.0], [20.0, 0.0], [20.0, 10.0], [0.0, 10.0]],
            flat_georef(),
        );
        let simp = simplify_polygon(&rect, 3.0).unwrap();
        assert_eq!(
            simp.ring(),
            &[[0.0, 0.0], [20.0, 0.0], [20.0, 10.0], [0.0, 10.0]]
        );
    }

    #[test]
    fn circle_simplification_respects_tolerance() {
        let ring: Vec<[f64; 2]> = (0..64)
            .map(|i| {
                let t = i as f64 / 64.0 * std::f64::consts::TAU;
                [10.0 * t.cos(), 10.0 * t.sin()]
            })
            .collect();
        let circle = poly(ring, flat_georef());
        let simp = simplify_polygon(&circle, 3.0).unwrap();
        assert!(simp.ring().len() < circle.ring().len());
        assert!(max_vertex_deviation(&circle, &simp) <= 3.0 + 1e-12);
    }

    #[test]
    fn area_correction_examples() {
        // 10x10 px square with 0.30 m/px at the equator: zoom chosen so the
        // derived scale is exactly overridden by constructing the georef and
        // checking the cos^2 ratio instead of a hand-picked zoom.
        let sq = vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]];
        let z = 19; // mpp = 156543.03392 / 2^19 = 0.2986 m/px
        let mpp = WEB_MERCATOR_M_PER_PX_Z0 / f64::powi(2.0, z as i32);

        let at_eq = poly(sq.clone(), georef_at(0.0, 0.0, z));
        let a_eq = polygon_area_m2(&at_eq).unwrap();
        assert!((a_eq - 100.0 * mpp * mpp).abs() < 1e-9);

        let at_60 = poly(sq, georef_at(0.0, 60.0, z));
        let a_60 = polygon_area_m2(&at_60).unwrap();
        assert!((a_60 - 0.25 * a_eq).abs() < 1e-9 * a_eq);
    }

    #[test]
    fn unit_triangle_shoelace() {
        let tri = poly(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], flat_georef());
        let mpp = tri.meters_per_pixel_at_equator();
        let a = polygon_area_m2(&tri).unwrap();
        assert!((a - 0.5 * mpp * mpp).abs() < 1e-12);
    }

    #[test]
    fn centroid_of_centered_square_is_tile_center() {
        let g = georef_at(34.5, -0.4, 19);
        // Square centered on the tile center pixel (320, 320).
        let sq = poly(
            vec![[310.0, 310.0], [330.0, 310.0], [330.0, 330.0], [310.0, 330.0]],
            g,
        );
        let c = polygon_centroid(&sq).unwrap();
        assert!((c.lon() - 34.5).abs() < 1e-9);
        assert!((c.lat() - -0.4).abs() < 1e-9);
    }

    #[test]
    fn l_shape_centroid_matches_rectangle_decomposition() {
        // L = [0,2]x[0,1] union [0,1]x[1,3], areas 2 and 2.
        let g = flat_georef();
        let l = poly(
            vec![
                [0.0, 0.0],
                [2.0, 0.0],
                [2.0, 1.0],
                [1.0, 1.0],
                [1.0, 3.0],
                [0.0, 3.0],
            ],
            g,
        );
        // Rectangle centroids (1.0, 0.5) and (0.5, 2.0), equal weights.
        let expect = g.px_to_lonlat(0.75, 1.25).unwrap();
        let c = polygon_centroid(&l).unwrap();
        assert!((c.lon() - expect.lon()).abs() < 1e-12);
        assert!((c.lat() - expect.lat()).abs() < 1e-12);
    }

    #[test]
    fn centroid_inside_convex_polygon() {
        let g = flat_georef();
        let ring: Vec<[f64; 2]> = (0..7)
            .map(|i| {
                let t = i as f64 / 7.0 * std::f64::consts::TAU;
                [100.0 + 30.0 * t.cos(), 200.0 + 18.0 * t.sin()]
            })
            .collect();
        let p = poly(ring.clone(), g);
        let c = polygon_centroid(&p).unwrap();
        let (px, py) = g.lonlat_to_px(c);
        // Point-in-convex-polygon: consistent cross-product signs.
        let n = ring.len();
        let signs: Vec<f64> = (0..n)
            .map(|i| {
                let [x0, y0] = ring[i];
                let [x1, y1] = ring[(i + 1) % n];
                (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
            })
            .collect();
        assert!(signs.iter().all(|&s| s > 0.0) || signs.iter().all(|&s| s < 0.0));
    }

    #[test]
    fn closed_ring_is_normalized() {
        let p = PixelPolygon::new(
            vec![[0.0, 0.0], [5.0, 0.0], [5.0, 5.0], [0.0, 0.0]],
            flat_georef(),
        )
        .unwrap();
        assert_eq!(p.ring().len(), 3);
    }

    #[test]
    fn degenerate_rings_rejected() {
        let g = flat_georef();
        assert!(matches!(
            PixelPolygon::new(vec![[0.0, 0.0], [1.0, 1.0]], g),
            Err(GeoError::TooFewVertices(2))
        ));
        assert!(matches!(
            PixelPolygon::new(vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], g),
            Err(GeoError::ZeroArea)
        ));
    }

    #[test]
    fn px_round_trip_through_georef() {
        let g = georef_at(34.2, -0.7, 19);
        let p = GeoPoint::new(34.2003, -0.7007).unwrap();
        let (px, py) = g.lonlat_to_px(p);
        let back = g.px_to_lonlat(px, py).unwrap();
        assert!((back.lon() - p.lon()).abs() < 1e-10);
        assert!((back.lat() - p.lat()).abs() < 1e-10);
    }
}
