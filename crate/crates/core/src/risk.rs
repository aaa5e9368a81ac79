//! Per-dwelling flood-risk scoring from roof class, inundation depth and
//! proximity to water, plus neighbourhood aggregation.
//!
//! The score is a clamped additive model:
//!
//! ```text
//! score = clamp(base_vulnerability(class) + depth_mod + proximity_mod, 1, 5)
//! depth_mod     = 0 if depth <= 0, +1 if depth <= 0.5 m, +2 above
//! proximity_mod = +1 if dist_water < 50 m
//! ```
//!
//! Thresholds and increments live in [`ScoringConfig`] and are written into
//! the output GeoJSON so every score is traceable to its configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geodata::{ClassLegend, GeoTransform};
use crate::geometry::{self, Point};
use crate::vectorize::DwellingPolygon;

/// Version of the scoring formula, bumped whenever its semantics change.
pub const SCORING_VERSION: &str = "additive-v1";

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("hazard grid: {0}")]
    Grid(String),
    #[error("hazard grid has no data cells")]
    AllNoData,
    #[error("invalid class id {0}")]
    Class(u8),
    #[error("context layer: {0}")]
    Layer(String),
    #[error("scoring config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, RiskError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RiskError + '_ {
    move |source| RiskError::Io { path: path.display().to_string(), source }
}

/// Flood depths on a regular grid; row 0 is the northern edge.
#[derive(Clone, Debug, PartialEq)]
pub struct HazardGrid {
    pub ncols: usize,
    pub nrows: usize,
    pub values: Vec<f64>,
    pub transform: GeoTransform,
    pub nodata: f64,
}

impl HazardGrid {
    pub fn new(ncols: usize, nrows: usize, values: Vec<f64>, transform: GeoTransform, nodata: f64) -> Result<Self> {
        if ncols == 0 || nrows == 0 || values.len() != ncols * nrows {
            return Err(RiskError::Grid(format!("{} values for {ncols}x{nrows}", values.len())));
        }
        transform.validate().map_err(|e| RiskError::Grid(e.to_string()))?;
        if let Some(v) = values.iter().find(|&&v| v != nodata && !(v.is_finite() && v >= 0.0)) {
            return Err(RiskError::Grid(format!("depth {v} is neither NODATA nor a finite value >= 0")));
        }
        Ok(HazardGrid { ncols, nrows, values, transform, nodata })
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        self.transform.pixel_to_ground(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Parses an ESRI ASCII grid. Both the `xllcorner`/`yllcorner` and the
    /// `xllcenter`/`yllcenter` header variants are accepted.
    pub fn from_ascii(text: &str) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
        while let Some(line) = lines.peek() {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default().to_ascii_lowercase();
            if !key.starts_with(|c: char| c.is_ascii_alphabetic()) {
                break;
            }
            let value: f64 =
                parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| RiskError::Grid(format!("header {key} lacks a numeric value")))?;
            header.insert(key, value);
            lines.next();
        }
        let get = |k: &str| header.get(k).copied().ok_or_else(|| RiskError::Grid(format!("missing header {k}")));
        let ncols = get("ncols")? as usize;
        let nrows = get("nrows")? as usize;
        let cell = get("cellsize")?;
        if !(cell > 0.0) {
            return Err(RiskError::Grid(format!("cellsize {cell} must be > 0")));
        }
        let (xll, yll) = match (header.get("xllcorner"), header.get("yllcorner")) {
            (Some(&x), Some(&y)) => (x, y),
            _ => (get("xllcenter")? - cell / 2.0, get("yllcenter")? - cell / 2.0),
        };
        let nodata = header.get("nodata_value").copied().unwrap_or(-9999.0);
        let values = lines
            .flat_map(str::split_whitespace)
            .map(|t| t.parse::<f64>().map_err(|_| RiskError::Grid(format!("bad value {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let transform = GeoTransform::north_up(xll, yll + nrows as f64 * cell, cell);
        HazardGrid::new(ncols, nrows, values, transform, nodata)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ascii(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// ESRI ASCII text; only north-up grids with square cells are representable.
    pub fn to_ascii(&self) -> String {
        let t = &self.transform;
        let cell = t.pixel_size_x;
        let mut s = format!(
            "ncols {}\nnrows {}\nxllcorner {}\nyllcorner {}\ncellsize {}\nNODATA_value {}\n",
            self.ncols,
            self.nrows,
            t.origin_x,
            t.origin_y + self.nrows as f64 * t.pixel_size_y,
            cell,
            self.nodata
        );
        for row in self.values.chunks(self.ncols) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ascii()).map_err(io_err(path))
    }
}

/// Maximum depth over cells whose centres lie inside `ring`; if none does,
/// the depth of the data cell whose centre is nearest the ring's centroid
/// (first in row-major order on ties).
pub fn sample_hazard(ring: &[Point], grid: &HazardGrid) -> Result<f64> {
    let pixel_ring: Vec<Point> = ring
        .iter()
        .map(|&p| {
            let (c, r) = grid.transform.ground_to_pixel(p);
            Point::new(c, r)
        })
        .collect();
    let (mut c0, mut c1, mut r0, mut r1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &pixel_ring {
        c0 = c0.min(p.x);
        c1 = c1.max(p.x);
        r0 = r0.min(p.y);
        r1 = r1.max(p.y);
    }
    let clamp_lo = |v: f64, n: usize| ((v - 0.5).ceil().max(0.0) as usize).min(n);
    let clamp_hi = |v: f64, n: usize| ((v - 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
    let mut best: Option<f64> = None;
    for row in clamp_lo(r0, grid.nrows)..clamp_hi(r1, grid.nrows) {
        for col in clamp_lo(c0, grid.ncols)..clamp_hi(c1, grid.ncols) {
            let v = grid.values[row * grid.ncols + col];
            if grid.is_nodata(v) || !geometry::contains(&pixel_ring, Point::new(col as f64 + 0.5, row as f64 + 0.5)) {
                continue;
            }
            best = Some(best.map_or(v, |b| b.max(v)));
        }
    }
    if let Some(v) = best {
        return Ok(v);
    }
    let centroid = geometry::centroid(ring);
    let mut nearest: Option<(f64, f64)> = None;
    for row in 0..grid.nrows {
        for col in 0..grid.ncols {
            let v = grid.values[row * grid.ncols + col];
            if grid.is_nodata(v) {
                continue;
            }
            let d = grid.cell_center(row, col).distance(centroid);
            if nearest.is_none_or(|(bd, _)| d < bd) {
                nearest = Some((d, v));
            }
        }
    }
    nearest.map(|(_, v)| v).ok_or(RiskError::AllNoData)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    WaterBody,
    Road,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    /// Closed ring.
    Polygon(Vec<Point>),
    LineString(Vec<Point>),
}

impl Geometry {
    fn points(&self) -> &[Point] {
        match self {
            Geometry::Polygon(p) | Geometry::LineString(p) => p,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextLayer {
    pub kind: LayerKind,
    pub geometries: Vec<Geometry>,
}

impl ContextLayer {
    pub fn new(kind: LayerKind, geometries: Vec<Geometry>) -> Result<Self> {
        for g in &geometries {
            match g {
                Geometry::Polygon(r) if !(r.len() >= 4 && geometry::is_closed(r) && geometry::is_simple_ring(r)) => {
                    return Err(RiskError::Layer("polygon ring must be closed, simple and have >= 4 points".into()));
                }
                Geometry::LineString(l) if l.len() < 2 => {
                    return Err(RiskError::Layer("polyline needs >= 2 points".into()));
                }
                _ => {}
            }
        }
        Ok(ContextLayer { kind, geometries })
    }
}

fn coords(v: &Value) -> Option<Vec<Point>> {
    v.as_array()?
        .iter()
        .map(|p| {
            let a = p.as_array()?;
            Some(Point::new(a.first()?.as_f64()?, a.get(1)?.as_f64()?))
        })
        .collect()
}

/// Splits a GeoJSON FeatureCollection into water and road layers by the
/// feature property `kind` (`water_body` or `road`).
pub fn parse_context_layers(text: &str) -> Result<(ContextLayer, ContextLayer)> {
    let doc: Value = serde_json::from_str(text).map_err(|e| RiskError::Layer(e.to_string()))?;
    let feats = doc.get("features").and_then(Value::as_array).ok_or_else(|| RiskError::Layer("not a FeatureCollection".into()))?;
    let (mut water, mut road) = (Vec::new(), Vec::new());
    for (i, f) in feats.iter().enumerate() {
        let kind = f
            .get("properties")
            .and_then(|p| p.get("kind"))
            .and_then(|k| serde_json::from_value::<LayerKind>(k.clone()).ok())
            .ok_or_else(|| RiskError::Layer(format!("feature {i}: kind must be water_body or road")))?;
        let geom = f.get("geometry").ok_or_else(|| RiskError::Layer(format!("feature {i}: no geometry")))?;
        let c = geom.get("coordinates").cloned().unwrap_or(Value::Null);
        let bad = || RiskError::Layer(format!("feature {i}: malformed coordinates"));
        let g = match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => Geometry::Polygon(coords(c.get(0).ok_or_else(bad)?).ok_or_else(bad)?),
            Some("LineString") => Geometry::LineString(coords(&c).ok_or_else(bad)?),
            other => return Err(RiskError::Layer(format!("feature {i}: unsupported geometry {other:?}"))),
        };
        match kind {
            LayerKind::WaterBody => water.push(g),
            LayerKind::Road => road.push(g),
        }
    }
    Ok((ContextLayer::new(LayerKind::WaterBody, water)?, ContextLayer::new(LayerKind::Road, road)?))
}

pub fn load_context_layers(path: &Path) -> Result<(ContextLayer, ContextLayer)> {
    parse_context_layers(&fs::read_to_string(path).map_err(io_err(path))?)
}

/// GeoJSON text for a pair of context layers.
pub fn context_layers_geojson(layers: &[&ContextLayer]) -> String {
    let ring = |pts: &[Point]| pts.iter().map(|p| serde_json::json!([p.x, p.y])).collect::<Vec<_>>();
    let feats: Vec<Value> = layers
        .iter()
        .flat_map(|l| l.geometries.iter().map(move |g| (l.kind, g)))
        .map(|(kind, g)| {
            let geometry = match g {
                Geometry::Polygon(p) => serde_json::json!({ "type": "Polygon", "coordinates": [ring(p)] }),
                Geometry::LineString(p) => serde_json::json!({ "type": "LineString", "coordinates": ring(p) }),
            };
            serde_json::json!({ "type": "Feature", "geometry": geometry, "properties": { "kind": kind } })
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&serde_json::json!({ "type": "FeatureCollection", "features": feats })).expect("serializable");
    s.push('\n');
    s
}

/// Minimum distance between a dwelling ring and a layer geometry: 0 when the
/// boundaries meet or either contains the other.
fn geometry_distance(ring: &[Point], g: &Geometry) -> f64 {
    let other = g.points();
    if let Geometry::Polygon(poly) = g {
        if geometry::contains(poly, ring[0]) {
            return 0.0;
        }
    }
    if geometry::contains(ring, other[0]) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for (a, b) in geometry::edges(ring) {
        for (c, d) in geometry::edges(other) {
            best = best.min(geometry::segment_distance(a, b, c, d));
            if best == 0.0 {
                return 0.0;
            }
        }
    }
    best
}

/// Distance from the dwelling to the nearest layer geometry;
/// `f64::INFINITY` for an empty layer.
pub fn distance_to(ring: &[Point], layer: &ContextLayer) -> f64 {
    layer.geometries.iter().map(|g| geometry_distance(ring, g)).fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Overrides of legend base vulnerabilities by class name.
    pub base_scores: BTreeMap<String, u8>,
    /// Depths above 0 and up to this value add `shallow_increment`.
    pub shallow_depth_m: f64,
    pub shallow_increment: i32,
    pub deep_increment: i32,
    pub water_proximity_m: f64,
    pub proximity_increment: i32,
    pub cluster_cell_m: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            base_scores: BTreeMap::new(),
            shallow_depth_m: 0.5,
            shallow_increment: 1,
            deep_increment: 2,
            water_proximity_m: 50.0,
            proximity_increment: 1,
            cluster_cell_m: 100.0,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shallow_depth_m.is_finite() && self.shallow_depth_m >= 0.0) {
            return Err(RiskError::Config("shallow_depth_m must be finite and >= 0".into()));
        }
        if self.deep_increment < self.shallow_increment || self.shallow_increment < 0 || self.proximity_increment < 0 {
            return Err(RiskError::Config("increments must satisfy 0 <= shallow <= deep and proximity >= 0".into()));
        }
        if !(self.water_proximity_m >= 0.0) {
            return Err(RiskError::Config("water_proximity_m must be >= 0".into()));
        }
        if !(self.cluster_cell_m > 0.0 && self.cluster_cell_m.is_finite()) {
            return Err(RiskError::Config("cluster_cell_m must be > 0".into()));
        }
        if let Some((name, v)) = self.base_scores.iter().find(|(_, v)| !(1..=5).contains(*v)) {
            return Err(RiskError::Config(format!("base score {v} for {name} not in 1..5")));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScoringConfig = toml::from_str(text).map_err(|e| RiskError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Metadata object recorded alongside scores.
    pub fn metadata(&self) -> Value {
        serde_json::json!({ "version": SCORING_VERSION, "config": self })
    }

    fn base(&self, class_id: u8, legend: &ClassLegend) -> Result<i32> {
        if class_id == 0 {
            return Err(RiskError::Class(class_id));
        }
        let entry = legend.entry(class_id).ok_or(RiskError::Class(class_id))?;
        Ok(self.base_scores.get(&entry.name).copied().unwrap_or(entry.base_vulnerability) as i32)
    }
}

/// Clamped additive risk score in 1..=5.
pub fn risk_score(class_id: u8, legend: &ClassLegend, depth_m: f64, dist_water_m: f64, config: &ScoringConfig) -> Result<u8> {
    let base = config.base(class_id, legend)?;
    let depth_mod = if !(depth_m > 0.0) {
        0
    } else if depth_m <= config.shallow_depth_m {
        config.shallow_increment
    } else {
        config.deep_increment
    };
    let prox = if dist_water_m < config.water_proximity_m { config.proximity_increment } else { 0 };
    Ok((base + depth_mod + prox).clamp(1, 5) as u8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskedDwelling {
    pub polygon: DwellingPolygon,
    pub class_name: String,
    pub hazard_depth_max_m: f64,
    pub dist_water_m: f64,
    pub dist_road_m: f64,
    pub risk_score: u8,
}

/// Hazard features and score for each polygon, in input order.
pub fn score_dwellings(
    polygons: &[DwellingPolygon],
    legend: &ClassLegend,
    grid: &HazardGrid,
    water: &ContextLayer,
    roads: &ContextLayer,
    config: &ScoringConfig,
) -> Result<Vec<RiskedDwelling>> {
    config.validate()?;
    polygons
        .iter()
        .map(|p| {
            let depth = sample_hazard(&p.ring, grid)?;
            let dist_water = distance_to(&p.ring, water);
            Ok(RiskedDwelling {
                risk_score: risk_score(p.class_id, legend, depth, dist_water, config)?,
                class_name: legend.name(p.class_id).to_string(),
                hazard_depth_max_m: depth,
                dist_water_m: dist_water,
                dist_road_m: distance_to(&p.ring, roads),
                polygon: p.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterCell {
    /// Cell index `(floor(x / size), floor(y / size))` of member centroids.
    pub cell: (i64, i64),
    pub count: usize,
    pub mean_score: f64,
    /// Mean rounded half-up.
    pub level: u8,
    pub high_risk_share: f64,
}

/// Bins dwellings by centroid into square cells; cells are sorted by index.
pub fn aggregate_clusters(dwellings: &[RiskedDwelling], cell_size_m: f64) -> Result<Vec<ClusterCell>> {
    if !(cell_size_m > 0.0 && cell_size_m.is_finite()) {
        return Err(RiskError::Config(format!("cell size {cell_size_m} must be > 0")));
    }
    let mut bins: BTreeMap<(i64, i64), Vec<u8>> = BTreeMap::new();
    for d in dwellings {
        let c = geometry::centroid(&d.polygon.ring);
        let key = ((c.x / cell_size_m).floor() as i64, (c.y / cell_size_m).floor() as i64);
        bins.entry(key).or_default().push(d.risk_score);
    }
    Ok(bins
        .into_iter()
        .map(|(cell, scores)| {
            let n = scores.len();
            let mean = scores.iter().map(|&s| s as f64).sum::<f64>() / n as f64;
            ClusterCell {
                cell,
                count: n,
                mean_score: mean,
                level: ((mean + 0.5).floor() as u8).clamp(1, 5),
                high_risk_share: scores.iter().filter(|&&s| s >= 4).count() as f64 / n as f64,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, s: f64) -> Vec<Point> {
        vec![Point::new(x0, y0), Point::new(x0 + s, y0), Point::new(x0 + s, y0 + s), Point::new(x0, y0 + s), Point::new(x0, y0)]
    }

    fn grid(values: &[f64], ncols: usize) -> HazardGrid {
        let nrows = values.len() / ncols;
        HazardGrid::new(ncols, nrows, values.to_vec(), GeoTransform::north_up(0.0, nrows as f64, 1.0), -9999.0).unwrap()
    }

    fn scored(ring: Vec<Point>, score: u8) -> RiskedDwelling {
        RiskedDwelling {
            polygon: DwellingPolygon { ring, class_id: 1, confidence: 1.0, pixel_area: 1 },
            class_name: "RCC".into(),
            hazard_depth_max_m: 0.0,
            dist_water_m: f64::INFINITY,
            dist_road_m: f64::INFINITY,
            risk_score: score,
        }
    }

    #[test]
    fn hazard_max_and_fallback() {
        let g = grid(&[0.2, 0.7, 0.4, 0.0, 0.0, 0.3], 3);
        assert_eq!(sample_hazard(&square(0.0, 1.0, 3.0), &g).unwrap(), 0.7);
        assert_eq!(sample_hazard(&square(0.0, 0.0, 3.0), &grid(&[0.0; 6], 3)).unwrap(), 0.0);
        // Tiny square near the centre of the bottom-right cell but covering no centre.
        assert_eq!(sample_hazard(&square(2.6, 0.6, 0.2), &g).unwrap(), 0.3);
        let empty = grid(&[-9999.0; 4], 2);
        assert!(matches!(sample_hazard(&square(0.0, 0.0, 1.0), &empty), Err(RiskError::AllNoData)));
    }

    #[test]
    fn ascii_grid_round_trip() {
        let text = "ncols 3\nnrows 2\nxllcorner 10\nyllcorner 20\ncellsize 5\nNODATA_value -9999\n0 1.5 -9999\n0.25 0 2\n";
        let g = HazardGrid::from_ascii(text).unwrap();
        assert_eq!(g.cell_center(0, 0), Point::new(12.5, 27.5));
        assert!(g.is_nodata(g.values[2]));
        assert_eq!(HazardGrid::from_ascii(&g.to_ascii()).unwrap(), g);
        let centered = text.replace("xllcorner 10", "xllcenter 12.5").replace("yllcorner 20", "yllcenter 22.5");
        assert_eq!(HazardGrid::from_ascii(&centered).unwrap(), g);
        assert!(HazardGrid::from_ascii("ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n1\n").is_err());
        assert!(HazardGrid::from_ascii("ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n-3\n").is_err());
    }

    #[test]
    fn distances() {
        let water = ContextLayer::new(LayerKind::WaterBody, vec![Geometry::Polygon(square(31.0, -5.0, 10.0))]).unwrap();
        assert!((distance_to(&square(0.0, 0.0, 1.0), &water) - 30.0).abs() < 1e-12);
        assert_eq!(distance_to(&square(30.0, 0.0, 1.0), &water), 0.0);
        assert_eq!(distance_to(&square(33.0, 0.0, 1.0), &water), 0.0);
        let empty = ContextLayer::new(LayerKind::Road, vec![]).unwrap();
        assert_eq!(distance_to(&square(0.0, 0.0, 1.0), &empty), f64::INFINITY);
        let road =
            ContextLayer::new(LayerKind::Road, vec![Geometry::LineString(vec![Point::new(-5.0, 3.0), Point::new(5.0, 3.0)])]).unwrap();
        assert!((distance_to(&square(0.0, 0.0, 1.0), &road) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn scoring_examples() {
        let legend = ClassLegend::default();
        let cfg = ScoringConfig::default();
        let id = |n: &str| legend.id_of(n).unwrap();
        assert_eq!(risk_score(id("THATCH"), &legend, 0.6, 10.0, &cfg).unwrap(), 5);
        assert_eq!(risk_score(id("RCC"), &legend, 0.0, 500.0, &cfg).unwrap(), 1);
        assert_eq!(risk_score(id("TILED"), &legend, 0.3, 40.0, &cfg).unwrap(), 5);
        assert_eq!(risk_score(id("TILED"), &legend, 0.5, 50.0, &cfg).unwrap(), 4);
        assert!(risk_score(0, &legend, 0.0, 0.0, &cfg).is_err());
        assert!(risk_score(9, &legend, 0.0, 0.0, &cfg).is_err());
        let over = ScoringConfig::from_toml_str("water_proximity_m = 10.0\n[base_scores]\nRCC = 2\n").unwrap();
        assert_eq!(risk_score(id("RCC"), &legend, 0.0, 20.0, &over).unwrap(), 2);
        assert!(ScoringConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn cluster_aggregation() {
        let one = aggregate_clusters(&[scored(square(1.0, 1.0, 1.0), 5)], 100.0).unwrap();
        assert_eq!((one[0].level, one[0].high_risk_share), (5, 1.0));
        let four: Vec<_> = [1, 1, 5, 5].iter().map(|&s| scored(square(10.0, 10.0, 2.0), s)).collect();
        let c = aggregate_clusters(&four, 100.0).unwrap();
        assert_eq!((c.len(), c[0].level, c[0].high_risk_share), (1, 3, 0.5));
        let apart = [scored(square(0.0, 0.0, 1.0), 2), scored(square(1000.0, 0.0, 1.0), 2)];
        assert_eq!(aggregate_clusters(&apart, 100.0).unwrap().len(), 2);
        assert!(aggregate_clusters(&[], 100.0).unwrap().is_empty());
        let half = [scored(square(0.0, 0.0, 1.0), 2), scored(square(0.0, 0.0, 1.0), 3)];
        assert_eq!(aggregate_clusters(&half, 100.0).unwrap()[0].level, 3);
    }

    #[test]
    fn context_layer_geojson_round_trip() {
        let water = ContextLayer::new(LayerKind::WaterBody, vec![Geometry::Polygon(square(0.0, 0.0, 4.0))]).unwrap();
        let road =
            ContextLayer::new(LayerKind::Road, vec![Geometry::LineString(vec![Point::new(0.0, 9.0), Point::new(9.0, 9.0)])]).unwrap();
        let (w, r) = parse_context_layers(&context_layers_geojson(&[&water, &road])).unwrap();
        assert_eq!((w, r), (water, road));
    }
}
