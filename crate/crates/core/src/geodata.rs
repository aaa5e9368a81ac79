//! Georeferenced rasters (PNG + world file), class legends, dwelling label
//! parsing, label rasterization and GeoJSON output.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::geometry::{self, Point};
use crate::risk::RiskedDwelling;
use crate::vectorize::DwellingPolygon;

/// Roof-type labels that mark unusable annotations; they are dropped on parse.
pub const EXCLUDED_LABELS: [&str; 2] = ["NCR", "NCS"];

/// GeoJSON property carrying the roof type of a labeled dwelling.
pub const ROOF_TYPE_KEY: &str = "roof_type";

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed world file {0}: {1}")]
    WorldFile(String, String),
    #[error("unsupported bit depth in {0}: only 8-bit gray or RGB images are read")]
    UnsupportedBitDepth(String),
    #[error("image {0}: {1}")]
    Image(String, String),
    #[error("invalid geotransform: {0}")]
    Transform(String),
    #[error("invalid raster: {0}")]
    Raster(String),
    #[error("invalid legend: {0}")]
    Legend(String),
    #[error("unknown roof type \"{0}\"")]
    UnknownRoofType(String),
    #[error("labels: {0}")]
    Labels(String),
    #[error("geojson: {0}")]
    GeoJson(String),
}

pub type Result<T> = std::result::Result<T, GeoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GeoError + '_ {
    move |source| GeoError::Io { path: path.display().to_string(), source }
}

/// Affine map from continuous pixel coordinates to ground coordinates:
///
/// ```text
/// x = origin_x + col * pixel_size_x + row * rot_x
/// y = origin_y + col * rot_y        + row * pixel_size_y
/// ```
///
/// Pixel `(col, row)` covers `[col, col+1) x [row, row+1)`, so its centre is
/// at `(col + 0.5, row + 0.5)` and `(0, 0)` is the outer corner of the raster.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub pixel_size_x: f64,
    pub pixel_size_y: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub rot_x: f64,
    pub rot_y: f64,
}

impl GeoTransform {
    /// North-up transform with square pixels of `pixel_size` meters.
    pub fn north_up(origin_x: f64, origin_y: f64, pixel_size: f64) -> Self {
        GeoTransform { pixel_size_x: pixel_size, pixel_size_y: -pixel_size, origin_x, origin_y, rot_x: 0.0, rot_y: 0.0 }
    }

    pub fn determinant(&self) -> f64 {
        self.pixel_size_x * self.pixel_size_y - self.rot_x * self.rot_y
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.pixel_size_x, self.pixel_size_y, self.origin_x, self.origin_y, self.rot_x, self.rot_y];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::Transform("non-finite coefficient".into()));
        }
        if self.pixel_size_x <= 0.0 {
            return Err(GeoError::Transform(format!("pixel_size_x {} must be > 0", self.pixel_size_x)));
        }
        if self.pixel_size_y == 0.0 {
            return Err(GeoError::Transform("pixel_size_y must be non-zero".into()));
        }
        if self.determinant() == 0.0 {
            return Err(GeoError::Transform("singular transform".into()));
        }
        Ok(())
    }

    pub fn pixel_to_ground(&self, col: f64, row: f64) -> Point {
        Point::new(self.origin_x + col * self.pixel_size_x + row * self.rot_x, self.origin_y + col * self.rot_y + row * self.pixel_size_y)
    }

    /// Inverse of [`pixel_to_ground`](Self::pixel_to_ground), returning `(col, row)`.
    pub fn ground_to_pixel(&self, p: Point) -> (f64, f64) {
        let det = self.determinant();
        let (dx, dy) = (p.x - self.origin_x, p.y - self.origin_y);
        ((self.pixel_size_y * dx - self.rot_x * dy) / det, (self.pixel_size_x * dy - self.rot_y * dx) / det)
    }

    /// Transform of a sub-window whose top-left pixel is `(col, row)` here.
    pub fn translated(&self, col: usize, row: usize) -> Self {
        let o = self.pixel_to_ground(col as f64, row as f64);
        GeoTransform { origin_x: o.x, origin_y: o.y, ..*self }
    }

    /// Ground length of one pixel side (geometric mean of the two axes).
    pub fn pixel_size(&self) -> f64 {
        self.determinant().abs().sqrt()
    }

    /// World-file lines in order: A (pixel_size_x), D (rot_y), B (rot_x),
    /// E (pixel_size_y), C (origin_x), F (origin_y).
    pub fn to_world_file(&self) -> String {
        [self.pixel_size_x, self.rot_y, self.rot_x, self.pixel_size_y, self.origin_x, self.origin_y]
            .iter()
            .map(|v| format!("{v}\n"))
            .collect()
    }

    pub fn from_world_file(text: &str, name: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if lines.len() != 6 {
            return Err(GeoError::WorldFile(name.into(), format!("expected 6 numeric lines, found {}", lines.len())));
        }
        let mut v = [0.0; 6];
        for (slot, line) in v.iter_mut().zip(&lines) {
            *slot = line.parse().map_err(|_| GeoError::WorldFile(name.into(), format!("non-numeric line {line:?}")))?;
        }
        let t = GeoTransform { pixel_size_x: v[0], rot_y: v[1], rot_x: v[2], pixel_size_y: v[3], origin_x: v[4], origin_y: v[5] };
        t.validate()?;
        Ok(t)
    }
}

/// 8-bit raster in band-row-column (planar) order.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoRaster {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub data: Vec<u8>,
    pub transform: GeoTransform,
}

impl GeoRaster {
    pub fn new(width: usize, height: usize, bands: usize, data: Vec<u8>, transform: GeoTransform) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GeoError::Raster(format!("{width}x{height} raster must be at least 1x1")));
        }
        if !(bands == 1 || bands == 3) {
            return Err(GeoError::Raster(format!("{bands} bands; expected 1 or 3")));
        }
        if data.len() != width * height * bands {
            return Err(GeoError::Raster(format!("{} samples for {width}x{height}x{bands}", data.len())));
        }
        transform.validate()?;
        Ok(GeoRaster { width, height, bands, data, transform })
    }

    pub fn sample(&self, band: usize, row: usize, col: usize) -> u8 {
        self.data[(band * self.height + row) * self.width + col]
    }

    /// Copies a `width x height` window starting at `(col, row)`; parts that
    /// fall outside the raster are zero.
    pub fn window(&self, col: usize, row: usize, width: usize, height: usize) -> GeoRaster {
        let mut data = vec![0u8; width * height * self.bands];
        let copy_w = width.min(self.width.saturating_sub(col));
        for b in 0..self.bands {
            for r in 0..height.min(self.height.saturating_sub(row)) {
                let src = (b * self.height + row + r) * self.width + col;
                let dst = (b * height + r) * width;
                data[dst..dst + copy_w].copy_from_slice(&self.data[src..src + copy_w]);
            }
        }
        GeoRaster { width, height, bands: self.bands, data, transform: self.transform.translated(col, row) }
    }
}

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ClassMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        ClassMask { width, height, data: vec![0; width * height] }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.data[row * self.width + col] = class;
    }

    pub fn window(&self, col: usize, row: usize, width: usize, height: usize) -> ClassMask {
        let mut out = ClassMask::zeros(width, height);
        let copy_w = width.min(self.width.saturating_sub(col));
        for r in 0..height.min(self.height.saturating_sub(row)) {
            let src = (row + r) * self.width + col;
            out.data[r * width..r * width + copy_w].copy_from_slice(&self.data[src..src + copy_w]);
        }
        out
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }
}

fn read_png(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| GeoError::Image(path.display().to_string(), e.to_string()))
}

fn write_png(img: &DynamicImage, path: &Path) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| GeoError::Image(path.display().to_string(), e.to_string()))?;
    fs::write(path, buf.into_inner()).map_err(io_err(path))
}

/// Reads an 8-bit gray or RGB PNG and its world file.
pub fn load_raster_bundle(image_path: &Path, world_path: &Path) -> Result<GeoRaster> {
    let world = fs::read_to_string(world_path).map_err(io_err(world_path))?;
    let transform = GeoTransform::from_world_file(&world, &world_path.display().to_string())?;
    let img = read_png(image_path)?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (bands, interleaved) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        DynamicImage::ImageLumaA8(_) => (1, img.to_luma8().into_raw()),
        DynamicImage::ImageRgb8(c) => (3, c.into_raw()),
        DynamicImage::ImageRgba8(_) => (3, img.to_rgb8().into_raw()),
        _ => return Err(GeoError::UnsupportedBitDepth(image_path.display().to_string())),
    };
    let mut data = vec![0u8; interleaved.len()];
    for (i, px) in interleaved.chunks(bands).enumerate() {
        for (b, &v) in px.iter().enumerate() {
            data[b * width * height + i] = v;
        }
    }
    GeoRaster::new(width, height, bands, data, transform)
}

pub fn save_raster_bundle(raster: &GeoRaster, image_path: &Path, world_path: &Path) -> Result<()> {
    let plane = raster.width * raster.height;
    let img = if raster.bands == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(raster.width as u32, raster.height as u32, raster.data.clone()).expect("sized buffer"))
    } else {
        let mut interleaved = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            interleaved.extend((0..3).map(|b| raster.data[b * plane + i]));
        }
        DynamicImage::ImageRgb8(RgbImage::from_raw(raster.width as u32, raster.height as u32, interleaved).expect("sized buffer"))
    };
    write_png(&img, image_path)?;
    write_world_file(&raster.transform, world_path)
}

pub fn write_world_file(transform: &GeoTransform, path: &Path) -> Result<()> {
    fs::write(path, transform.to_world_file()).map_err(io_err(path))
}

pub fn read_world_file(path: &Path) -> Result<GeoTransform> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    GeoTransform::from_world_file(&text, &path.display().to_string())
}

/// Single-channel PNG whose pixel values are class ids.
pub fn save_mask(mask: &ClassMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.data.clone()).expect("sized buffer");
    write_png(&DynamicImage::ImageLuma8(img), path)
}

pub fn load_mask(path: &Path) -> Result<ClassMask> {
    match read_png(path)? {
        DynamicImage::ImageLuma8(g) => Ok(ClassMask { width: g.width() as usize, height: g.height() as usize, data: g.into_raw() }),
        _ => Err(GeoError::UnsupportedBitDepth(path.display().to_string())),
    }
}

/// 16-bit gray PNG holding values in `[0, 1]` quantized to `1/65535`.
pub fn save_unit_grid(values: &[f32], width: usize, height: usize, path: &Path) -> Result<()> {
    let raw: Vec<u16> = values.iter().map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(width as u32, height as u32, raw).expect("sized buffer");
    write_png(&DynamicImage::ImageLuma16(img), path)
}

pub fn load_unit_grid(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    match read_png(path)? {
        DynamicImage::ImageLuma16(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            Ok((g.into_raw().into_iter().map(|v| (v as f64 / 65535.0) as f32).collect(), w, h))
        }
        _ => Err(GeoError::Image(path.display().to_string(), "expected a 16-bit gray PNG".into())),
    }
}

/// Colors every pixel with its class display color (background black).
pub fn render_mask(mask: &ClassMask, legend: &ClassLegend) -> RgbImage {
    let mut img = RgbImage::new(mask.width as u32, mask.height as u32);
    for (i, &c) in mask.data.iter().enumerate() {
        let color = if c == 0 { [0, 0, 0] } else { legend.entry(c).map(|e| e.color).unwrap_or([255, 255, 255]) };
        img.put_pixel((i % mask.width) as u32, (i / mask.width) as u32, Rgb(color));
    }
    img
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    write_png(&DynamicImage::ImageRgb8(img.clone()), path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    #[serde(with = "hex_color")]
    pub color: [u8; 3],
    pub base_vulnerability: u8,
}

/// Eight classes: background (id 0) plus seven roof types.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassLegend {
    #[serde(rename = "class")]
    entries: Vec<ClassEntry>,
}

pub const NUM_CLASSES: usize = 8;

impl Default for ClassLegend {
    fn default() -> Self {
        let entry = |id, name: &str, color, base| ClassEntry { id, name: name.into(), color, base_vulnerability: base };
        ClassLegend {
            entries: vec![
                entry(0, "BACKGROUND", [0, 0, 0], 0),
                entry(1, "RCC", [31, 119, 180], 1),
                entry(2, "TILED", [214, 39, 40], 3),
                entry(3, "METAL_SHEET", [127, 127, 127], 3),
                entry(4, "CGS_2S", [23, 190, 207], 3),
                entry(5, "PLASTIC_SHEET", [255, 127, 14], 5),
                entry(6, "THATCH", [188, 189, 34], 5),
                entry(7, "OTHER_ROOF", [148, 103, 189], 4),
            ],
        }
    }
}

impl ClassLegend {
    pub fn new(mut entries: Vec<ClassEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.id);
        let legend = ClassLegend { entries };
        legend.validate()?;
        Ok(legend)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.len() != NUM_CLASSES {
            return Err(GeoError::Legend(format!("{} classes; exactly {NUM_CLASSES} required", self.entries.len())));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(GeoError::Legend(format!("class ids must be 0..7 without gaps (found {} at {i})", e.id)));
            }
            if i > 0 && !(1..=5).contains(&e.base_vulnerability) {
                return Err(GeoError::Legend(format!("{}: base_vulnerability {} not in 1..5", e.name, e.base_vulnerability)));
            }
            if EXCLUDED_LABELS.iter().any(|x| x.eq_ignore_ascii_case(&e.name)) {
                return Err(GeoError::Legend(format!("{} is reserved for excluded annotations", e.name)));
            }
        }
        if !self.entries[0].name.eq_ignore_ascii_case("BACKGROUND") {
            return Err(GeoError::Legend("class 0 must be BACKGROUND".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let parsed: ClassLegend = toml::from_str(text).map_err(|e| GeoError::Legend(e.to_string()))?;
        ClassLegend::new(parsed.entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("legend serializes")
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn entry(&self, id: u8) -> Option<&ClassEntry> {
        self.entries.get(id as usize)
    }

    pub fn name(&self, id: u8) -> &str {
        self.entry(id).map(|e| e.name.as_str()).unwrap_or("UNKNOWN")
    }

    /// Case-insensitive lookup of a roof-type name.
    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.entries.iter().find(|e| e.name.eq_ignore_ascii_case(name.trim())).map(|e| e.id)
    }
}

mod hex_color {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(c: &[u8; 3], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 3], D::Error> {
        let s = String::deserialize(d)?;
        let hex = s.trim_start_matches('#');
        if hex.len() != 6 {
            return Err(D::Error::custom(format!("color {s:?} is not #rrggbb")));
        }
        let byte = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).map_err(|_| D::Error::custom(format!("bad color {s:?}")));
        Ok([byte(0)?, byte(2)?, byte(4)?])
    }
}

/// A labeled dwelling outline in ground coordinates (closed ring).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDwelling {
    pub ring: Vec<Point>,
    pub class_id: u8,
    pub source_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedLabels {
    pub dwellings: Vec<LabeledDwelling>,
    /// Features tagged NCR or NCS.
    pub dropped: usize,
}

fn parse_ring(coords: &Value, what: &str) -> Result<Vec<Point>> {
    let arr = coords.as_array().ok_or_else(|| GeoError::Labels(format!("{what}: ring is not an array")))?;
    arr.iter()
        .map(|pos| {
            let xy = pos.as_array().filter(|a| a.len() >= 2);
            match xy.map(|a| (a[0].as_f64(), a[1].as_f64())) {
                Some((Some(x), Some(y))) => Ok(Point::new(x, y)),
                _ => Err(GeoError::Labels(format!("{what}: bad position {pos}"))),
            }
        })
        .collect()
}

fn polygon_exterior(feature: &Value, what: &str) -> Result<Vec<Point>> {
    let geom = feature.get("geometry").ok_or_else(|| GeoError::Labels(format!("{what}: missing geometry")))?;
    let kind = geom.get("type").and_then(Value::as_str).unwrap_or("null");
    if kind != "Polygon" {
        return Err(GeoError::Labels(format!("{what}: geometry type {kind} is not Polygon")));
    }
    let rings = geom
        .get("coordinates")
        .and_then(Value::as_array)
        .filter(|r| !r.is_empty())
        .ok_or_else(|| GeoError::Labels(format!("{what}: polygon has no rings")))?;
    let ring = parse_ring(&rings[0], what)?;
    if ring.len() < 4 || !geometry::is_closed(&ring) {
        return Err(GeoError::Labels(format!("{what}: ring must be closed with at least 4 positions")));
    }
    Ok(ring)
}

fn features<'a>(doc: &'a Value, what: &str) -> Result<&'a Vec<Value>> {
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(GeoError::GeoJson(format!("{what}: not a FeatureCollection")));
    }
    doc.get("features").and_then(Value::as_array).ok_or_else(|| GeoError::GeoJson(format!("{what}: missing features array")))
}

fn feature_id(feature: &Value, index: usize) -> String {
    match feature.get("id").or_else(|| feature.get("properties").and_then(|p| p.get("id"))) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => index.to_string(),
    }
}

/// Parses a labeled FeatureCollection. Features whose `roof_type` is NCR or
/// NCS are dropped and counted; unknown roof types are an error.
pub fn parse_labels_str(text: &str, legend: &ClassLegend) -> Result<ParsedLabels> {
    let doc: Value = serde_json::from_str(text).map_err(|e| GeoError::GeoJson(e.to_string()))?;
    let mut out = ParsedLabels::default();
    for (i, feature) in features(&doc, "labels")?.iter().enumerate() {
        let what = format!("feature {i}");
        let roof = feature
            .get("properties")
            .and_then(|p| p.get(ROOF_TYPE_KEY))
            .and_then(Value::as_str)
            .ok_or_else(|| GeoError::Labels(format!("{what}: missing string property {ROOF_TYPE_KEY}")))?;
        if EXCLUDED_LABELS.iter().any(|x| x.eq_ignore_ascii_case(roof.trim())) {
            out.dropped += 1;
            continue;
        }
        let class_id = match legend.id_of(roof) {
            Some(id) if id > 0 => id,
            _ => return Err(GeoError::UnknownRoofType(roof.to_string())),
        };
        let ring = polygon_exterior(feature, &what)?;
        out.dwellings.push(LabeledDwelling { ring, class_id, source_id: feature_id(feature, i) });
    }
    Ok(out)
}

pub fn parse_labels(path: &Path, legend: &ClassLegend) -> Result<ParsedLabels> {
    parse_labels_str(&fs::read_to_string(path).map_err(io_err(path))?, legend)
}

/// Paints `rings` (in ground coordinates) onto a `width x height` grid:
/// a pixel takes a ring's value iff its centre is inside the ring under the
/// even-odd rule. Where rings overlap the smaller-area ring wins.
pub(crate) fn paint_rings(rings: &[(&[Point], u8)], width: usize, height: usize, transform: &GeoTransform) -> ClassMask {
    let mut mask = ClassMask::zeros(width, height);
    let mut order: Vec<(usize, f64)> = rings.iter().enumerate().map(|(i, (r, _))| (i, geometry::signed_area(r).abs())).collect();
    // Largest first; later (smaller) rings overwrite.
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (i, _) in order {
        let (ring, class) = rings[i];
        let px: Vec<Point> = ring
            .iter()
            .map(|&p| {
                let (c, r) = transform.ground_to_pixel(p);
                Point::new(c, r)
            })
            .collect();
        let (mut c0, mut c1, mut r0, mut r1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &px {
            c0 = c0.min(p.x);
            c1 = c1.max(p.x);
            r0 = r0.min(p.y);
            r1 = r1.max(p.y);
        }
        let col_lo = (c0 - 0.5).ceil().max(0.0) as usize;
        let row_lo = (r0 - 0.5).ceil().max(0.0) as usize;
        let col_hi = ((c1 - 0.5).floor() + 1.0).clamp(0.0, width as f64) as usize;
        let row_hi = ((r1 - 0.5).floor() + 1.0).clamp(0.0, height as f64) as usize;
        for row in row_lo..row_hi {
            for col in col_lo..col_hi {
                if geometry::contains(&px, Point::new(col as f64 + 0.5, row as f64 + 0.5)) {
                    mask.set(row, col, class);
                }
            }
        }
    }
    mask
}

/// Class mask of the raster's extent from labeled dwellings.
pub fn rasterize_labels(dwellings: &[LabeledDwelling], raster: &GeoRaster) -> ClassMask {
    let rings: Vec<(&[Point], u8)> = dwellings.iter().map(|d| (d.ring.as_slice(), d.class_id)).collect();
    paint_rings(&rings, raster.width, raster.height, &raster.transform)
}

fn ring_json(ring: &[Point]) -> Value {
    json!([ring.iter().map(|p| json!([p.x, p.y])).collect::<Vec<_>>()])
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn write_json(doc: &Value, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc).map_err(|e| GeoError::GeoJson(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn risked_feature(d: &RiskedDwelling) -> Value {
    json!({
        "type": "Feature",
        "geometry": { "type": "Polygon", "coordinates": ring_json(&d.polygon.ring) },
        "properties": {
            "class": d.polygon.class_id,
            "class_name": d.class_name,
            "confidence": d.polygon.confidence,
            "risk_score": d.risk_score,
            "hazard_depth_max_m": d.hazard_depth_max_m,
            "dist_water_m": finite_or_null(d.dist_water_m),
            "dist_road_m": finite_or_null(d.dist_road_m),
            "pixel_area": d.polygon.pixel_area,
        }
    })
}

/// Writes scored dwellings as an RFC 7946 FeatureCollection. Infinite
/// distances (empty context layers) are written as `null`.
pub fn write_geojson(dwellings: &[RiskedDwelling], path: &Path) -> Result<()> {
    write_geojson_with_meta(dwellings, None, path)
}

/// As [`write_geojson`], with an optional `scoring` foreign member recording
/// the scoring model that produced the scores.
pub fn write_geojson_with_meta(dwellings: &[RiskedDwelling], scoring: Option<Value>, path: &Path) -> Result<()> {
    let mut doc = Map::new();
    doc.insert("type".into(), json!("FeatureCollection"));
    if let Some(meta) = scoring {
        doc.insert("scoring".into(), meta);
    }
    doc.insert("features".into(), Value::Array(dwellings.iter().map(risked_feature).collect()));
    write_json(&Value::Object(doc), path)
}

fn prop<'a>(feature: &'a Value, key: &str, what: &str) -> Result<&'a Value> {
    feature.get("properties").and_then(|p| p.get(key)).ok_or_else(|| GeoError::GeoJson(format!("{what}: missing property {key}")))
}

fn prop_f64(feature: &Value, key: &str, what: &str) -> Result<f64> {
    let v = prop(feature, key, what)?;
    if v.is_null() {
        return Ok(f64::INFINITY);
    }
    v.as_f64().ok_or_else(|| GeoError::GeoJson(format!("{what}: property {key} is not a number")))
}

fn prop_u64(feature: &Value, key: &str, what: &str) -> Result<u64> {
    prop(feature, key, what)?.as_u64().ok_or_else(|| GeoError::GeoJson(format!("{what}: property {key} is not an integer")))
}

fn dwelling_polygon(feature: &Value, what: &str) -> Result<DwellingPolygon> {
    Ok(DwellingPolygon {
        ring: polygon_exterior(feature, what).map_err(|e| GeoError::GeoJson(e.to_string()))?,
        class_id: prop_u64(feature, "class", what)? as u8,
        confidence: prop_f64(feature, "confidence", what)? as f32,
        pixel_area: prop_u64(feature, "pixel_area", what)? as usize,
    })
}

pub fn read_risk_geojson(path: &Path) -> Result<Vec<RiskedDwelling>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| GeoError::GeoJson(e.to_string()))?;
    features(&doc, "risk")?
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let what = format!("feature {i}");
            Ok(RiskedDwelling {
                polygon: dwelling_polygon(f, &what)?,
                class_name: prop(f, "class_name", &what)?.as_str().unwrap_or_default().to_string(),
                hazard_depth_max_m: prop_f64(f, "hazard_depth_max_m", &what)?,
                dist_water_m: prop_f64(f, "dist_water_m", &what)?,
                dist_road_m: prop_f64(f, "dist_road_m", &what)?,
                risk_score: prop_u64(f, "risk_score", &what)? as u8,
            })
        })
        .collect()
}

/// Writes vectorized (unscored) dwelling polygons.
pub fn write_dwellings_geojson(dwellings: &[DwellingPolygon], legend: &ClassLegend, path: &Path) -> Result<()> {
    let feats: Vec<Value> = dwellings
        .iter()
        .map(|d| {
            json!({
                "type": "Feature",
                "geometry": { "type": "Polygon", "coordinates": ring_json(&d.ring) },
                "properties": {
                    "class": d.class_id,
                    "class_name": legend.name(d.class_id),
                    "confidence": d.confidence,
                    "pixel_area": d.pixel_area,
                }
            })
        })
        .collect();
    write_json(&json!({ "type": "FeatureCollection", "features": feats }), path)
}

pub fn read_dwellings_geojson(path: &Path) -> Result<Vec<DwellingPolygon>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| GeoError::GeoJson(e.to_string()))?;
    features(&doc, "dwellings")?.iter().enumerate().map(|(i, f)| dwelling_polygon(f, &format!("feature {i}"))).collect()
}

/// Checks a risk FeatureCollection against the output schema: Polygon
/// features with a closed, simple exterior ring and the required typed
/// properties. Returns the feature count.
pub fn validate_risk_geojson(doc: &Value) -> std::result::Result<usize, String> {
    let feats = features(doc, "risk").map_err(|e| e.to_string())?;
    for (i, f) in feats.iter().enumerate() {
        let what = format!("feature {i}");
        if f.get("type").and_then(Value::as_str) != Some("Feature") {
            return Err(format!("{what}: type is not Feature"));
        }
        let ring = polygon_exterior(f, &what).map_err(|e| e.to_string())?;
        if !geometry::is_simple_ring(&ring) {
            return Err(format!("{what}: ring is not simple"));
        }
        let props = f.get("properties").and_then(Value::as_object).ok_or(format!("{what}: properties missing"))?;
        let num = |k: &str| props.get(k).and_then(Value::as_f64).ok_or(format!("{what}: {k} must be a number"));
        let class = props.get("class").and_then(Value::as_u64).ok_or(format!("{what}: class must be an integer"))?;
        if !(1..=7).contains(&class) {
            return Err(format!("{what}: class {class} not in 1..7"));
        }
        props.get("class_name").and_then(Value::as_str).ok_or(format!("{what}: class_name must be a string"))?;
        let score = props.get("risk_score").and_then(Value::as_u64).ok_or(format!("{what}: risk_score must be an integer"))?;
        if !(1..=5).contains(&score) {
            return Err(format!("{what}: risk_score {score} not in 1..5"));
        }
        let conf = num("confidence")?;
        if !(0.0..=1.0).contains(&conf) {
            return Err(format!("{what}: confidence {conf} not in [0,1]"));
        }
        if num("hazard_depth_max_m")? < 0.0 {
            return Err(format!("{what}: negative hazard depth"));
        }
        for k in ["dist_water_m", "dist_road_m"] {
            match props.get(k) {
                Some(Value::Null) => {}
                Some(v) if v.as_f64().is_some_and(|d| d >= 0.0) => {}
                _ => return Err(format!("{what}: {k} must be a non-negative number or null")),
            }
        }
    }
    Ok(feats.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_ring(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Point> {
        vec![Point::new(x0, y0), Point::new(x1, y0), Point::new(x1, y1), Point::new(x0, y1), Point::new(x0, y0)]
    }

    fn pixel_frame_raster(w: usize, h: usize) -> GeoRaster {
        // Identity-like transform: ground (x, y) == pixel (col, row).
        let t = GeoTransform { pixel_size_x: 1.0, pixel_size_y: 1.0, origin_x: 0.0, origin_y: 0.0, rot_x: 0.0, rot_y: 0.0 };
        GeoRaster::new(w, h, 1, vec![0; w * h], t).unwrap()
    }

    #[test]
    fn affine_corners() {
        let t = GeoTransform::north_up(100.0, 200.0, 0.5);
        assert_eq!(t.pixel_to_ground(0.0, 0.0), Point::new(100.0, 200.0));
        assert_eq!(t.pixel_to_ground(511.0, 511.0), Point::new(355.5, -55.5));
    }

    #[test]
    fn world_file_parsing() {
        let t = GeoTransform::from_world_file("0.5\n0\n0\n-0.5\n100.0\n200.0\n", "w").unwrap();
        assert_eq!(t, GeoTransform::north_up(100.0, 200.0, 0.5));
        let err = GeoTransform::from_world_file("0.5\n0\n0\n-0.5\n100.0\n", "w").unwrap_err();
        assert!(err.to_string().contains("malformed world file"), "{err}");
        assert!(GeoTransform::from_world_file("0.5\n0\nzero\n-0.5\n1\n2\n", "w").is_err());
        assert!(GeoTransform::from_world_file("0\n0\n0\n-0.5\n1\n2\n", "w").is_err());
        let round = GeoTransform::from_world_file(&t.to_world_file(), "w").unwrap();
        assert_eq!(round, t);
    }

    #[test]
    fn rasterize_exact_square() {
        let raster = pixel_frame_raster(10, 10);
        let d = LabeledDwelling { ring: square_ring(2.0, 2.0, 6.0, 6.0), class_id: 3, source_id: "a".into() };
        let mask = rasterize_labels(&[d], &raster);
        assert_eq!(mask.count(3), 16);
        assert_eq!(mask.count(0), 84);
        for r in 2..6 {
            for c in 2..6 {
                assert_eq!(mask.get(r, c), 3);
            }
        }
    }

    #[test]
    fn rasterize_nothing() {
        let mask = rasterize_labels(&[], &pixel_frame_raster(4, 3));
        assert!(mask.data.iter().all(|&c| c == 0));
    }

    #[test]
    fn smaller_dwelling_wins_overlap() {
        let raster = pixel_frame_raster(12, 12);
        let small = LabeledDwelling { ring: square_ring(4.0, 4.0, 7.0, 7.0), class_id: 6, source_id: "s".into() };
        let big = LabeledDwelling { ring: square_ring(1.0, 1.0, 11.0, 11.0), class_id: 1, source_id: "b".into() };
        // Input order must not matter.
        for dwellings in [vec![small.clone(), big.clone()], vec![big.clone(), small.clone()]] {
            let mask = rasterize_labels(&dwellings, &raster);
            for r in 0..12 {
                for c in 0..12 {
                    let centre = Point::new(c as f64 + 0.5, r as f64 + 0.5);
                    let expect = if geometry::contains(&small.ring, centre) {
                        6
                    } else if geometry::contains(&big.ring, centre) {
                        1
                    } else {
                        0
                    };
                    assert_eq!(mask.get(r, c), expect, "pixel ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn labels_drop_excluded_and_reject_unknown() {
        let legend = ClassLegend::default();
        let poly = r#"{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1],[0,0]]]}"#;
        let fc = |labels: &[&str]| {
            let feats: Vec<String> =
                labels.iter().map(|l| format!(r#"{{"type":"Feature","geometry":{poly},"properties":{{"roof_type":"{l}"}}}}"#)).collect();
            format!(r#"{{"type":"FeatureCollection","features":[{}]}}"#, feats.join(","))
        };
        let parsed = parse_labels_str(&fc(&["RCC", "THATCH", "NCR"]), &legend).unwrap();
        assert_eq!(parsed.dwellings.len(), 2);
        assert_eq!(parsed.dropped, 1);
        assert_eq!(parsed.dwellings[0].class_id, 1);
        assert_eq!(parsed.dwellings[1].class_id, 6);
        let empty = parse_labels_str(&fc(&[]), &legend).unwrap();
        assert_eq!((empty.dwellings.len(), empty.dropped), (0, 0));
        let err = parse_labels_str(&fc(&["IGLOO"]), &legend).unwrap_err();
        assert!(err.to_string().contains("IGLOO"));
    }

    #[test]
    fn non_polygon_geometry_is_an_error() {
        let text = r#"{"type":"FeatureCollection","features":[{"type":"Feature","geometry":{"type":"Point","coordinates":[0,0]},"properties":{"roof_type":"RCC"}}]}"#;
        assert!(parse_labels_str(text, &ClassLegend::default()).is_err());
    }

    #[test]
    fn legend_round_trips_through_toml() {
        let legend = ClassLegend::default();
        let text = legend.to_toml_string();
        assert_eq!(ClassLegend::from_toml_str(&text).unwrap(), legend);
        assert_eq!(legend.id_of("thatch"), Some(6));
        assert_eq!(legend.id_of("CGS_2S"), Some(4));
    }

    #[test]
    fn legend_rejects_gaps() {
        let mut entries = ClassLegend::default().entries().to_vec();
        entries.pop();
        assert!(ClassLegend::new(entries).is_err());
    }

    #[test]
    fn window_pads_with_zeros() {
        let t = GeoTransform::north_up(0.0, 0.0, 1.0);
        let r = GeoRaster::new(3, 2, 1, vec![1, 2, 3, 4, 5, 6], t).unwrap();
        let w = r.window(2, 1, 2, 2);
        assert_eq!(w.data, vec![6, 0, 0, 0]);
        assert_eq!(w.transform.origin_x, 2.0);
        assert_eq!(w.transform.origin_y, -1.0);
    }
}
