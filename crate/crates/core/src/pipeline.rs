//! Manifest-driven stage functions. Each stage reads its inputs from files
//! and writes its artifacts under the output directory, so running the
//! stages one by one and running [`run_pipeline`] produce the same bytes.
//!
//! Output layout (relative to the output directory):
//!
//! | stage      | artifacts                                                   |
//! |------------|-------------------------------------------------------------|
//! | rasterize  | `labels_mask.png`, `labels_mask.wld`                        |
//! | tile       | `tiles/` tile store with `splits.txt`                       |
//! | train      | `model/` best and last weights, optimizer state, `train_log.tsv` |
//! | predict    | `prediction/classes.png` + `.wld`, `prediction/confidence.png` |
//! | vectorize  | `dwellings.geojson`                                         |
//! | score      | `risk.geojson`, `clusters.tsv`                              |
//! | evaluate   | `evaluation.txt`                                            |
//! | render     | `prediction/classes_color.png`                              |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::geodata::{self, ClassLegend, ClassMask, GeoError, GeoRaster};
use crate::metrics::{MetricsError, MetricsReport};
use crate::risk::{self, HazardGrid, RiskError, ScoringConfig};
use crate::ternausnet::{self, ModelConfig, ModelError, ModelParams};
use crate::tiler::{self, Split, TileError, MIN_TILE_SIZE};
use crate::train::{self, TrainConfig, TrainError, WEIGHTS_BEST};
use crate::vectorize::{self, SegmentationMap, VectorizeError, DEFAULT_EPSILON_M, DEFAULT_MIN_COMPONENT_SIZE};

pub const LABEL_MASK: &str = "labels_mask.png";
pub const LABEL_MASK_WORLD: &str = "labels_mask.wld";
pub const TILES_DIR: &str = "tiles";
pub const MODEL_DIR: &str = "model";
pub const PREDICTION_DIR: &str = "prediction";
pub const CLASSES_PNG: &str = "classes.png";
pub const CLASSES_WORLD: &str = "classes.wld";
pub const CONFIDENCE_PNG: &str = "confidence.png";
pub const CLASSES_COLOR_PNG: &str = "classes_color.png";
pub const DWELLINGS_GEOJSON: &str = "dwellings.geojson";
pub const RISK_GEOJSON: &str = "risk.geojson";
pub const CLUSTERS_TSV: &str = "clusters.tsv";
pub const EVALUATION_TXT: &str = "evaluation.txt";
/// Tile-store name of the single AOI a manifest describes.
pub const AOI_ID: &str = "aoi";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Vectorize(#[from] VectorizeError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPaths {
    pub image: PathBuf,
    /// Defaults to the image path with a `.wld` extension.
    #[serde(default)]
    pub world: Option<PathBuf>,
    pub labels: PathBuf,
    /// Defaults to the built-in roof-type legend.
    #[serde(default)]
    pub legend: Option<PathBuf>,
    pub hazard: PathBuf,
    pub context: PathBuf,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingParams {
    pub tile_size: usize,
    pub ratios: [f64; 3],
}

impl Default for TilingParams {
    fn default() -> Self {
        TilingParams { tile_size: 64, ratios: [0.7, 0.15, 0.15] }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VectorizeParams {
    /// Simplification tolerance in ground meters.
    pub epsilon: f64,
    pub min_component_size: usize,
}

impl Default for VectorizeParams {
    fn default() -> Self {
        VectorizeParams { epsilon: DEFAULT_EPSILON_M, min_component_size: DEFAULT_MIN_COMPONENT_SIZE }
    }
}

/// One reproducible run: inputs, output directory and stage parameters.
/// `seed` drives the dataset split, weight initialization and training
/// order; any `seed` inside `[train]` is replaced by it.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineManifest {
    #[serde(default)]
    pub seed: u64,
    pub paths: ManifestPaths,
    #[serde(default)]
    pub tiling: TilingParams,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub vectorize: VectorizeParams,
    #[serde(default)]
    pub scoring: ScoringConfig,
}

/// Command-line overrides applied on top of a manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub width_scale: Option<f64>,
    pub epsilon: Option<f64>,
    pub output: Option<PathBuf>,
}

impl PipelineManifest {
    /// Parses TOML; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: PipelineManifest = toml::from_str(text).map_err(|e| PipelineError::Manifest(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        let paths = &mut m.paths;
        for p in [&mut paths.image, &mut paths.labels, &mut paths.hazard, &mut paths.context, &mut paths.output] {
            resolve(p);
        }
        for p in [&mut paths.world, &mut paths.legend, &mut m.model.pretrained_encoder_path].into_iter().flatten() {
            resolve(p);
        }
        m.train.seed = m.seed;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            PipelineError::Manifest(msg) => PipelineError::Manifest(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.train.seed = seed;
        }
        if let Some(ws) = o.width_scale {
            self.model.width_scale = ws;
        }
        if let Some(eps) = o.epsilon {
            self.vectorize.epsilon = eps;
        }
        if let Some(out) = &o.output {
            self.paths.output = out.clone();
        }
    }

    /// Checks that every input exists and all parameters are in range.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PipelineError::Manifest(msg));
        let p = &self.paths;
        let world = self.world_path();
        let inputs = [Some(&p.image), Some(&world), Some(&p.labels), p.legend.as_ref(), Some(&p.hazard), Some(&p.context)];
        for path in inputs.into_iter().flatten() {
            if !path.is_file() {
                return bad(format!("input {} does not exist", path.display()));
            }
        }
        let t = self.tiling.tile_size;
        if t < MIN_TILE_SIZE || !t.is_multiple_of(32) {
            return bad(format!("tile_size {t} must be a multiple of 32 and at least {MIN_TILE_SIZE}"));
        }
        let [a, b, c] = self.tiling.ratios;
        tiler::split_counts(100, (a, b, c))?;
        if !(self.vectorize.epsilon >= 0.0 && self.vectorize.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be a finite non-negative number", self.vectorize.epsilon));
        }
        self.model.validate()?;
        if let Some(enc) = &self.model.pretrained_encoder_path {
            if !enc.is_file() {
                return bad(format!("pretrained encoder {} does not exist", enc.display()));
            }
        }
        self.train.validate()?;
        self.scoring.validate()?;
        Ok(())
    }

    pub fn world_path(&self) -> PathBuf {
        self.paths.world.clone().unwrap_or_else(|| self.paths.image.with_extension("wld"))
    }

    pub fn legend(&self) -> Result<ClassLegend> {
        Ok(match &self.paths.legend {
            Some(path) => ClassLegend::load(path)?,
            None => ClassLegend::default(),
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.output.join(name)
    }

    pub fn prediction(&self, name: &str) -> PathBuf {
        self.paths.output.join(PREDICTION_DIR).join(name)
    }
}

/// Rasterizes the labels over the image extent; returns the mask.
pub fn rasterize_stage(m: &PipelineManifest) -> Result<ClassMask> {
    let legend = m.legend()?;
    let raster = geodata::load_raster_bundle(&m.paths.image, &m.world_path())?;
    let labels = geodata::parse_labels(&m.paths.labels, &legend)?;
    let mask = geodata::rasterize_labels(&labels.dwellings, &raster);
    create_dir(&m.paths.output)?;
    geodata::save_mask(&mask, &m.out(LABEL_MASK))?;
    geodata::write_world_file(&raster.transform, &m.out(LABEL_MASK_WORLD))?;
    Ok(mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileSummary {
    pub kept: usize,
    pub discarded: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Tiles image and label mask, drops dwelling-free tiles, splits and
/// writes the tile store.
pub fn tile_stage(m: &PipelineManifest) -> Result<TileSummary> {
    let raster = geodata::load_raster_bundle(&m.paths.image, &m.world_path())?;
    let mask = geodata::load_mask(&m.out(LABEL_MASK))?;
    let tiles = tiler::tile_raster(&raster, &mask, m.tiling.tile_size, AOI_ID)?;
    let (kept, discarded) = tiler::filter_empty(tiles);
    let [a, b, c] = m.tiling.ratios;
    let tiles = tiler::split_dataset(kept, (a, b, c), m.seed)?;
    let dir = m.out(TILES_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    tiler::write_tile_store(&tiles, &dir)?;
    let count = |s: Split| tiles.iter().filter(|t| t.split == s).count();
    Ok(TileSummary { kept: tiles.len(), discarded, train: count(Split::Train), val: count(Split::Val), test: count(Split::Test) })
}

/// Trains from the tile store; returns the epoch of the kept weights.
pub fn train_stage(m: &PipelineManifest) -> Result<usize> {
    let tiles = tiler::read_tile_store(&m.out(TILES_DIR))?;
    let params = ternausnet::build_model(&m.model, m.seed)?;
    let outcome = train::train_loop(params, &tiles, &m.train, Some(&m.out(MODEL_DIR)))?;
    Ok(outcome.best_epoch)
}

/// Runs the network over `raster` in `tile_size` windows (zero-padded at the
/// edges) and stitches the per-pixel argmax and confidence.
pub fn predict_raster(params: &ModelParams<f32>, raster: &GeoRaster, tile_size: usize) -> Result<SegmentationMap> {
    let (w, h) = (raster.width, raster.height);
    let windows: Vec<(usize, usize)> =
        (0..h.div_ceil(tile_size)).flat_map(|r| (0..w.div_ceil(tile_size)).map(move |c| (r * tile_size, c * tile_size))).collect();
    let maps: Vec<SegmentationMap> = windows
        .par_iter()
        .map(|&(row, col)| {
            let window = raster.window(col, row, tile_size, tile_size);
            let logits = ternausnet::forward(params, &train::image_tensor(&window))?;
            Ok(vectorize::argmax_map(&logits, window.transform)?)
        })
        .collect::<Result<_>>()?;
    let mut out =
        SegmentationMap { width: w, height: h, classes: vec![0; w * h], confidence: vec![0.0; w * h], transform: raster.transform };
    for (&(row, col), map) in windows.iter().zip(&maps) {
        let copy_w = tile_size.min(w - col);
        for r in 0..tile_size.min(h - row) {
            let (src, dst) = (r * tile_size, (row + r) * w + col);
            out.classes[dst..dst + copy_w].copy_from_slice(&map.classes[src..src + copy_w]);
            out.confidence[dst..dst + copy_w].copy_from_slice(&map.confidence[src..src + copy_w]);
        }
    }
    Ok(out)
}

/// Predicts the whole image with the best trained weights.
pub fn predict_stage(m: &PipelineManifest) -> Result<()> {
    let params = ternausnet::load_weights(&m.out(MODEL_DIR).join(WEIGHTS_BEST), &m.model)?;
    let raster = geodata::load_raster_bundle(&m.paths.image, &m.world_path())?;
    let map = predict_raster(&params, &raster, m.tiling.tile_size)?;
    create_dir(&m.out(PREDICTION_DIR))?;
    geodata::save_mask(&map.class_mask(), &m.prediction(CLASSES_PNG))?;
    geodata::write_world_file(&map.transform, &m.prediction(CLASSES_WORLD))?;
    geodata::save_unit_grid(&map.confidence, map.width, map.height, &m.prediction(CONFIDENCE_PNG))?;
    Ok(())
}

/// Reads the stored prediction back into a segmentation map.
pub fn load_prediction(m: &PipelineManifest) -> Result<SegmentationMap> {
    let mask = geodata::load_mask(&m.prediction(CLASSES_PNG))?;
    let transform = geodata::read_world_file(&m.prediction(CLASSES_WORLD))?;
    let (confidence, cw, ch) = geodata::load_unit_grid(&m.prediction(CONFIDENCE_PNG))?;
    if (cw, ch) != (mask.width, mask.height) {
        return Err(PipelineError::Manifest(format!("confidence grid is {cw}x{ch} but classes are {}x{}", mask.width, mask.height)));
    }
    Ok(SegmentationMap { confidence, ..SegmentationMap::from_mask(&mask, transform) })
}

/// Polygonizes the stored prediction; returns the dwelling count.
pub fn vectorize_stage(m: &PipelineManifest) -> Result<usize> {
    let map = load_prediction(m)?;
    let polys = vectorize::polygonize_with(&map, m.vectorize.epsilon, m.vectorize.min_component_size);
    geodata::write_dwellings_geojson(&polys, &m.legend()?, &m.out(DWELLINGS_GEOJSON))?;
    Ok(polys.len())
}

fn render_clusters(cells: &[risk::ClusterCell]) -> String {
    let mut s = String::from("cell_x\tcell_y\tcount\tmean_score\tlevel\thigh_risk_share\n");
    for c in cells {
        let _ = writeln!(s, "{}\t{}\t{}\t{:.6}\t{}\t{:.6}", c.cell.0, c.cell.1, c.count, c.mean_score, c.level, c.high_risk_share);
    }
    s
}

/// Scores the vectorized dwellings and aggregates them into cells;
/// returns the dwelling count.
pub fn score_stage(m: &PipelineManifest) -> Result<usize> {
    let polys = geodata::read_dwellings_geojson(&m.out(DWELLINGS_GEOJSON))?;
    let grid = HazardGrid::load(&m.paths.hazard)?;
    let (water, roads) = risk::load_context_layers(&m.paths.context)?;
    let scored = risk::score_dwellings(&polys, &m.legend()?, &grid, &water, &roads, &m.scoring)?;
    geodata::write_geojson_with_meta(&scored, Some(m.scoring.metadata()), &m.out(RISK_GEOJSON))?;
    let cells = risk::aggregate_clusters(&scored, m.scoring.cluster_cell_m)?;
    write_text(&m.out(CLUSTERS_TSV), &render_clusters(&cells))?;
    Ok(scored.len())
}

/// Metrics of `pred` against `truth` over every pixel.
pub fn evaluate_masks(pred: &ClassMask, truth: &ClassMask) -> Result<MetricsReport> {
    if (pred.width, pred.height) != (truth.width, truth.height) {
        return Err(PipelineError::Manifest(format!(
            "prediction is {}x{} but truth is {}x{}",
            pred.width, pred.height, truth.width, truth.height
        )));
    }
    Ok(MetricsReport::compute(&pred.data, &truth.data, &vec![true; pred.data.len()])?)
}

/// Evaluates two mask files and writes the report text to `out`.
pub fn evaluate_files(pred: &Path, truth: &Path, legend: &ClassLegend, out: &Path) -> Result<MetricsReport> {
    let report = evaluate_masks(&geodata::load_mask(pred)?, &geodata::load_mask(truth)?)?;
    let names: Vec<&str> = (0..geodata::NUM_CLASSES as u8).map(|c| legend.name(c)).collect();
    write_text(out, &report.render(&names))?;
    Ok(report)
}

/// Writes a colored class map: legend colors, black background.
pub fn render_file(mask: &Path, legend: &ClassLegend, out: &Path) -> Result<()> {
    let mask = geodata::load_mask(mask)?;
    geodata::save_rgb(&geodata::render_mask(&mask, legend), out)?;
    Ok(())
}

/// Everything [`run_pipeline`] produced, for reporting.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSummary {
    pub tiles: TileSummary,
    pub best_epoch: usize,
    pub dwellings: usize,
    pub risk_geojson: PathBuf,
}

/// rasterize, tile, train, predict, vectorize and score in sequence.
pub fn run_pipeline(m: &PipelineManifest) -> Result<PipelineSummary> {
    m.validate()?;
    rasterize_stage(m)?;
    let tiles = tile_stage(m)?;
    let best_epoch = train_stage(m)?;
    predict_stage(m)?;
    vectorize_stage(m)?;
    let dwellings = score_stage(m)?;
    Ok(PipelineSummary { tiles, best_epoch, dwellings, risk_geojson: m.out(RISK_GEOJSON) })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[paths]
image = "a/image.png"
labels = "labels.geojson"
hazard = "/abs/hazard.asc"
context = "context.geojson"
output = "out"
[train]
seed = 99
max_epochs = 2
"#;

    #[test]
    fn manifest_resolves_and_defaults() {
        let m = PipelineManifest::from_toml_str(MINIMAL, Path::new("/data")).unwrap();
        assert_eq!(m.paths.image, Path::new("/data/a/image.png"));
        assert_eq!(m.world_path(), Path::new("/data/a/image.wld"));
        assert_eq!(m.paths.hazard, Path::new("/abs/hazard.asc"));
        assert_eq!(m.train.seed, 3);
        assert_eq!(m.train.max_epochs, 2);
        assert_eq!(m.tiling, TilingParams::default());
        assert!(matches!(m.validate(), Err(PipelineError::Manifest(msg)) if msg.contains("does not exist")));
    }

    #[test]
    fn overrides_apply() {
        let mut m = PipelineManifest::from_toml_str(MINIMAL, Path::new(".")).unwrap();
        m.apply(&Overrides { seed: Some(5), width_scale: Some(0.25), epsilon: Some(1.0), output: Some("x".into()) });
        assert_eq!((m.seed, m.train.seed, m.model.width_scale, m.vectorize.epsilon), (5, 5, 0.25, 1.0));
        assert_eq!(m.paths.output, Path::new("x"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = MINIMAL.replace("[train]", "[train]\nlearning_rat = 1.0");
        assert!(PipelineManifest::from_toml_str(&text, Path::new(".")).is_err());
    }

    #[test]
    fn predict_covers_ragged_extent() {
        let params = ternausnet::build_model(&ModelConfig::scaled(1.0 / 16.0), 0).unwrap();
        let t = geodata::GeoTransform::north_up(0.0, 100.0, 1.0);
        let raster = GeoRaster::new(40, 70, 3, (0..40 * 70 * 3).map(|i| (i % 251) as u8).collect(), t).unwrap();
        let map = predict_raster(&params, &raster, 32).unwrap();
        assert_eq!((map.width, map.height, map.classes.len()), (40, 70, 2800));
        assert!(map.confidence.iter().all(|&c| c > 0.0 && c <= 1.0));
        // The top-left window matches a direct forward pass.
        let direct =
            vectorize::argmax_map(&ternausnet::forward(&params, &train::image_tensor(&raster.window(0, 0, 32, 32))).unwrap(), t).unwrap();
        assert_eq!(map.classes[0..32], direct.classes[0..32]);
    }
}
