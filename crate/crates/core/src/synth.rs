//! Procedural test areas: textured background with a river and a road,
//! rectangular and L-shaped dwellings of every roof class, a few unusable
//! ("NCR") annotations, and a flood-depth grid that deepens toward the river.
//!
//! Everything is a pure function of [`SynthConfig`], so the same seed always
//! yields byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::geodata::{self, ClassLegend, ClassMask, GeoError, GeoRaster, GeoTransform, LabeledDwelling, NUM_CLASSES};
use crate::geometry::{self, Point};
use crate::risk::{self, ContextLayer, Geometry, HazardGrid, LayerKind};
use crate::ternausnet::Patch;
use crate::tiler::{self, TileSample};

/// Hazard cells are this many pixels on a side.
const HAZARD_CELL_PX: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    /// Side of the placement grid; at most one dwelling per cell.
    pub cell_px: usize,
    pub ncr_count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 512,
            height: 512,
            pixel_size: 0.5,
            origin_x: 500_000.0,
            origin_y: 2_100_000.0,
            cell_px: 24,
            ncr_count: 3,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthAoi {
    pub raster: GeoRaster,
    pub mask: ClassMask,
    pub dwellings: Vec<LabeledDwelling>,
    /// Rings annotated as NCR; drawn in the image, absent from the mask.
    pub excluded: Vec<Vec<Point>>,
    pub hazard: HazardGrid,
    pub water: ContextLayer,
    pub roads: ContextLayer,
}

fn noise(rng: &mut ChaCha8Rng, amp: i32) -> i32 {
    if amp == 0 {
        0
    } else {
        rng.random_range(-amp..=amp)
    }
}

/// Surface kinds beyond the roof classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Surface {
    Class(u8),
    Water,
    Road,
    Unclear,
}

/// RGB sample of a surface at pixel `(x, y)`.
fn texture(surface: Surface, x: usize, y: usize, rng: &mut ChaCha8Rng) -> [u8; 3] {
    let (base, amp, pattern): ([i32; 3], i32, i32) = match surface {
        Surface::Class(0) => {
            let wave = ((x as f64 / 23.0).sin() * 8.0 + (y as f64 / 31.0).cos() * 8.0) as i32;
            ([96, 112, 66], 18, wave)
        }
        Surface::Class(1) => ([172, 170, 162], 10, 0),
        Surface::Class(2) => ([168, 112, 92], 10, if y.is_multiple_of(4) { -45 } else { 0 }),
        Surface::Class(3) => ([158, 164, 170], 8, if x.is_multiple_of(3) { 35 } else { 0 }),
        Surface::Class(4) => ([150, 150, 160], 8, if (x / 2 + y / 2).is_multiple_of(2) { 25 } else { -25 }),
        Surface::Class(5) => ([112, 142, 190], 10, 0),
        Surface::Class(6) => ([172, 150, 100], 32, 0),
        Surface::Class(_) => ([150, 122, 140], 8, if (x + y).is_multiple_of(4) { -40 } else { 0 }),
        Surface::Water => ([28, 58, 104], 6, 0),
        Surface::Road => ([122, 120, 114], 6, 0),
        Surface::Unclear => ([78, 74, 70], 20, 0),
    };
    let mut px = [0u8; 3];
    for (c, b) in px.iter_mut().zip(base) {
        *c = (b + pattern + noise(rng, amp)).clamp(0, 255) as u8;
    }
    px
}

/// Ground ring of the pixel-space polygon with corners `pts` (`(col, row)`).
fn ground_ring(t: &GeoTransform, pts: &[(usize, usize)]) -> Vec<Point> {
    let mut ring: Vec<Point> = pts.iter().map(|&(c, r)| t.pixel_to_ground(c as f64, r as f64)).collect();
    if geometry::signed_area(&ring) < 0.0 {
        ring.reverse();
    }
    ring.push(ring[0]);
    ring
}

/// River centre row (fractional) at column `x`.
fn river_center(cfg: &SynthConfig, x: f64) -> f64 {
    cfg.height as f64 * 0.72 + (x / cfg.width as f64 * std::f64::consts::TAU).sin() * cfg.height as f64 * 0.05
}

const RIVER_HALF_WIDTH: f64 = 14.0;
const ROAD_HALF_WIDTH: f64 = 2.0;

/// Road column at row `y`: a gently slanted straight line.
fn road_col(cfg: &SynthConfig, y: f64) -> f64 {
    cfg.width as f64 * 0.35 + y * 0.15
}

pub fn generate_aoi(cfg: &SynthConfig) -> SynthAoi {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t = GeoTransform::north_up(cfg.origin_x, cfg.origin_y, cfg.pixel_size);
    let (w, h) = (cfg.width, cfg.height);

    // Dwellings: one per placement cell, kept clear of river and road.
    let mut dwellings = Vec::new();
    let mut excluded = Vec::new();
    let cell = cfg.cell_px.max(10);
    let mut ncr_left = cfg.ncr_count;
    for cy in 0..h / cell {
        for cx in 0..w / cell {
            let (x0, y0) = (cx * cell, cy * cell);
            let fits = (0..=cell).step_by(2).all(|d| {
                let (xm, ym) = ((x0 + d) as f64, (y0 + d) as f64);
                (river_center(cfg, xm) - (y0 + cell / 2) as f64).abs() > RIVER_HALF_WIDTH + cell as f64 / 2.0 + 2.0
                    && (road_col(cfg, ym) - (x0 + cell / 2) as f64).abs() > ROAD_HALF_WIDTH + cell as f64 / 2.0 + 2.0
            });
            let roll: f64 = rng.random();
            if !fits || roll < 0.2 {
                continue;
            }
            let bw = rng.random_range(cell / 3..=cell - 4);
            let bh = rng.random_range(cell / 3..=cell - 4);
            let ox = x0 + rng.random_range(1..=cell - bw - 2);
            let oy = y0 + rng.random_range(1..=cell - bh - 2);
            let l_shape = rng.random_bool(0.3) && bw >= 8 && bh >= 8;
            let corners: Vec<(usize, usize)> = if l_shape {
                let (nx, ny) = (ox + bw / 2, oy + bh / 2);
                vec![(ox, oy), (ox + bw, oy), (ox + bw, ny), (nx, ny), (nx, oy + bh), (ox, oy + bh)]
            } else {
                vec![(ox, oy), (ox + bw, oy), (ox + bw, oy + bh), (ox, oy + bh)]
            };
            let ring = ground_ring(&t, &corners);
            if ncr_left > 0 && rng.random_bool(0.05) {
                ncr_left -= 1;
                excluded.push(ring);
                continue;
            }
            let class_id = rng.random_range(1..NUM_CLASSES as u8);
            dwellings.push(LabeledDwelling { ring, class_id, source_id: format!("d{}", dwellings.len()) });
        }
    }

    let blank = GeoRaster::new(w, h, 3, vec![0; 3 * w * h], t).expect("valid synthetic raster");
    let mask = geodata::rasterize_labels(&dwellings, &blank);
    let unclear_rings: Vec<(&[Point], u8)> = excluded.iter().map(|r| (r.as_slice(), 1u8)).collect();
    let unclear = geodata::paint_rings(&unclear_rings, w, h, &t);

    let mut data = vec![0u8; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let (xc, yc) = (x as f64 + 0.5, y as f64 + 0.5);
            let class = mask.get(y, x);
            let surface = if class != 0 {
                Surface::Class(class)
            } else if unclear.get(y, x) != 0 {
                Surface::Unclear
            } else if (yc - river_center(cfg, xc)).abs() <= RIVER_HALF_WIDTH {
                Surface::Water
            } else if (xc - road_col(cfg, yc)).abs() <= ROAD_HALF_WIDTH {
                Surface::Road
            } else {
                Surface::Class(0)
            };
            let px = texture(surface, x, y, &mut rng);
            for b in 0..3 {
                data[(b * h + y) * w + x] = px[b];
            }
        }
    }
    let raster = GeoRaster { data, ..blank };

    // River polygon: its two banks sampled every 16 px.
    let step = 16;
    let xs: Vec<usize> = (0..=w).step_by(step).chain(if w % step == 0 { None } else { Some(w) }).collect();
    let mut banks: Vec<(f64, f64)> = xs.iter().map(|&x| (x as f64, river_center(cfg, x as f64) - RIVER_HALF_WIDTH)).collect();
    banks.extend(xs.iter().rev().map(|&x| (x as f64, river_center(cfg, x as f64) + RIVER_HALF_WIDTH)));
    let mut river: Vec<Point> = banks.iter().map(|&(c, r)| t.pixel_to_ground(c, r)).collect();
    if geometry::signed_area(&river) < 0.0 {
        river.reverse();
    }
    river.push(river[0]);
    let road = vec![t.pixel_to_ground(road_col(cfg, 0.0), 0.0), t.pixel_to_ground(road_col(cfg, h as f64), h as f64)];
    let water = ContextLayer::new(LayerKind::WaterBody, vec![Geometry::Polygon(river)]).expect("river ring is simple");
    let roads = ContextLayer::new(LayerKind::Road, vec![Geometry::LineString(road)]).expect("road has two points");

    // Depth decays linearly away from the river, with a NODATA corner.
    let (gc, gr) = (w.div_ceil(HAZARD_CELL_PX), h.div_ceil(HAZARD_CELL_PX));
    let nodata = -9999.0;
    let mut values = Vec::with_capacity(gc * gr);
    for r in 0..gr {
        for c in 0..gc {
            if r < 2 && c < 2 {
                values.push(nodata);
                continue;
            }
            let (xc, yc) = ((c as f64 + 0.5) * HAZARD_CELL_PX as f64, (r as f64 + 0.5) * HAZARD_CELL_PX as f64);
            let dist_m = ((yc - river_center(cfg, xc)).abs() - RIVER_HALF_WIDTH).max(0.0) * cfg.pixel_size;
            let depth = (1.2 - dist_m / 60.0).max(0.0);
            values.push((depth * 100.0).round() / 100.0);
        }
    }
    let grid_t = GeoTransform::north_up(cfg.origin_x, cfg.origin_y, cfg.pixel_size * HAZARD_CELL_PX as f64);
    let hazard = HazardGrid::new(gc, gr, values, grid_t, nodata).expect("valid synthetic hazard grid");

    SynthAoi { raster, mask, dwellings, excluded, hazard, water, roads }
}

/// Label FeatureCollection with the legend's roof-type names; excluded
/// rings carry `NCR`.
pub fn labels_geojson(aoi: &SynthAoi, legend: &ClassLegend) -> String {
    let ring = |r: &[Point]| json!([r.iter().map(|p| json!([p.x, p.y])).collect::<Vec<_>>()]);
    let feature = |id: String, r: &[Point], roof: &str| {
        json!({
            "type": "Feature",
            "id": id,
            "geometry": { "type": "Polygon", "coordinates": ring(r) },
            "properties": { geodata::ROOF_TYPE_KEY: roof }
        })
    };
    let mut feats: Vec<Value> = aoi.dwellings.iter().map(|d| feature(d.source_id.clone(), &d.ring, legend.name(d.class_id))).collect();
    feats.extend(aoi.excluded.iter().enumerate().map(|(i, r)| feature(format!("x{i}"), r, "NCR")));
    let mut s = serde_json::to_string_pretty(&json!({ "type": "FeatureCollection", "features": feats })).expect("serializable");
    s.push('\n');
    s
}

/// File names written by [`write_aoi`].
#[derive(Clone, Debug, PartialEq)]
pub struct AoiFiles {
    pub image: PathBuf,
    pub world: PathBuf,
    pub labels: PathBuf,
    pub legend: PathBuf,
    pub hazard: PathBuf,
    pub context: PathBuf,
    pub manifest: PathBuf,
}

/// Default pipeline manifest for a synthetic AOI directory.
pub const DEFAULT_MANIFEST: &str = r#"# Synthetic area of interest; paths are relative to this file.
seed = 7

[paths]
image = "image.png"
world = "image.wld"
labels = "labels.geojson"
legend = "legend.toml"
hazard = "hazard.asc"
context = "context.geojson"
output = "out"

[tiling]
tile_size = 64
ratios = [0.7, 0.15, 0.15]

[model]
encoder = "vgg11"
width_scale = 0.125

[train]
learning_rate = 0.001
batch_size = 4
max_epochs = 150
early_stop_patience = 20

[vectorize]
epsilon = 0.5
min_component_size = 4

[scoring]
"#;

/// Writes image, world file, labels, legend, hazard grid, context layers
/// and a default manifest into `dir`.
pub fn write_aoi(aoi: &SynthAoi, legend: &ClassLegend, dir: &Path) -> Result<AoiFiles, GeoError> {
    fs::create_dir_all(dir).map_err(|source| GeoError::Io { path: dir.display().to_string(), source })?;
    let files = AoiFiles {
        image: dir.join("image.png"),
        world: dir.join("image.wld"),
        labels: dir.join("labels.geojson"),
        legend: dir.join("legend.toml"),
        hazard: dir.join("hazard.asc"),
        context: dir.join("context.geojson"),
        manifest: dir.join("manifest.toml"),
    };
    let write = |path: &Path, text: &str| fs::write(path, text).map_err(|source| GeoError::Io { path: path.display().to_string(), source });
    geodata::save_raster_bundle(&aoi.raster, &files.image, &files.world)?;
    write(&files.labels, &labels_geojson(aoi, legend))?;
    write(&files.legend, &legend.to_toml_string())?;
    write(&files.hazard, &aoi.hazard.to_ascii())?;
    write(&files.context, &risk::context_layers_geojson(&[&aoi.water, &aoi.roads]))?;
    write(&files.manifest, DEFAULT_MANIFEST)?;
    Ok(files)
}

/// Per-patch brightness offset bound for [`texture_patches`].
pub const PATCH_JITTER: i32 = 30;

/// `n_per_class` square patches per class filled with that class's texture.
pub fn texture_patches(n_per_class: usize, size: usize, num_classes: usize, seed: u64) -> Vec<Patch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_class * num_classes);
    for i in 0..n_per_class {
        for class in 0..num_classes.min(NUM_CLASSES) as u8 {
            // Offset the pattern phase so patches are not identical.
            let (dx, dy) = (rng.random_range(0..64usize), rng.random_range(0..64usize) + i);
            // Brightness jitter keeps flat color from solving the task alone.
            let shift = rng.random_range(-PATCH_JITTER..=PATCH_JITTER);
            // Background patches cover every non-roof surface of the scenes.
            let surface = if class == 0 {
                [Surface::Class(0), Surface::Water, Surface::Road, Surface::Unclear][i % 4]
            } else {
                Surface::Class(class)
            };
            let mut pixels = vec![0u8; 3 * size * size];
            for y in 0..size {
                for x in 0..size {
                    let px = texture(surface, x + dx, y + dy, &mut rng);
                    for b in 0..3 {
                        pixels[(b * size + y) * size + x] = (px[b] as i32 + shift).clamp(0, 255) as u8;
                    }
                }
            }
            out.push(Patch { pixels, size, class });
        }
    }
    out
}

/// The first `n` dwelling-bearing `tile_size` tiles of a synthetic AOI large
/// enough to supply them.
pub fn synthetic_tiles(n: usize, tile_size: usize, seed: u64) -> Vec<TileSample> {
    let mut side = tile_size * 2;
    loop {
        let cfg = SynthConfig { width: side, height: side, seed, ..SynthConfig::default() };
        let aoi = generate_aoi(&cfg);
        let tiles = tiler::tile_raster(&aoi.raster, &aoi.mask, tile_size, "synthetic").expect("tile size >= 32");
        let (kept, _) = tiler::filter_empty(tiles);
        if kept.len() >= n {
            return kept.into_iter().take(n).collect();
        }
        side *= 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_consistent() {
        let cfg = SynthConfig { width: 128, height: 128, ..Default::default() };
        let a = generate_aoi(&cfg);
        let b = generate_aoi(&cfg);
        assert_eq!(a.raster, b.raster);
        assert_eq!(a.mask, b.mask);
        assert!(!a.dwellings.is_empty());
        for d in &a.dwellings {
            assert!(geometry::is_simple_ring(&d.ring) && geometry::signed_area(&d.ring) > 0.0);
        }
        assert_eq!(geodata::rasterize_labels(&a.dwellings, &a.raster), a.mask);
        let other = generate_aoi(&SynthConfig { seed: 8, ..cfg });
        assert_ne!(other.raster, a.raster);
    }

    #[test]
    fn labels_parse_back() {
        let cfg = SynthConfig { width: 192, height: 192, ncr_count: 50, ..Default::default() };
        let aoi = generate_aoi(&cfg);
        let legend = ClassLegend::default();
        let parsed = geodata::parse_labels_str(&labels_geojson(&aoi, &legend), &legend).unwrap();
        assert_eq!(parsed.dwellings.len(), aoi.dwellings.len());
        assert_eq!(parsed.dropped, aoi.excluded.len());
    }

    #[test]
    fn patches_cover_classes() {
        let p = texture_patches(3, 32, 8, 1);
        assert_eq!(p.len(), 24);
        assert!((0..8).all(|c| p.iter().filter(|x| x.class == c).count() == 3));
        assert_eq!(p[0].pixels.len(), 3 * 32 * 32);
    }

    #[test]
    fn tiles_have_dwellings() {
        let t = synthetic_tiles(8, 64, 3);
        assert_eq!(t.len(), 8);
        assert!(t.iter().all(TileSample::has_dwelling));
    }
}
