//! The `roofrisk` command line. Stage subcommands read a pipeline manifest
//! and write into its output directory; `pipeline` runs them in order.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::geodata::ClassLegend;
use crate::pipeline::{self, Overrides, PipelineError, PipelineManifest};
use crate::synth::{self, SynthConfig};
use crate::ternausnet::{self, PretrainConfig};
use crate::train::AdamConfig;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "ROOFRISK_THREADS";

#[derive(Debug, Parser)]
#[command(name = "roofrisk", version, about = "Roof-type segmentation and dwelling flood-risk scoring")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Pipeline manifest (TOML).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Overrides the manifest seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the model width scale, in (0, 1].
    #[arg(long, global = true)]
    width_scale: Option<f64>,
    /// Overrides the simplification tolerance in meters.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic AOI (imagery, labels, hazard grid, context layers, manifest) to --out.
    Synth {
        /// Raster side in pixels.
        #[arg(long, default_value_t = 512)]
        size: usize,
    },
    /// Rasterize the label polygons over the image extent.
    RasterizeLabels,
    /// Tile image and label mask, drop empty tiles and split.
    Tile,
    /// Pretrain an encoder on synthetic texture patches and write it to --out.
    Pretrain {
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        patches_per_class: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
    },
    /// Train the segmentation network on the tile store.
    Train,
    /// Predict class and confidence maps for the whole image.
    Predict,
    /// Polygonize the predicted class map.
    Vectorize,
    /// Score vectorized dwellings against the hazard grid and context layers.
    Score,
    /// Compare a predicted mask with a ground-truth mask.
    Evaluate {
        /// Predicted mask; defaults to the pipeline prediction.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Ground-truth mask; defaults to the rasterized labels.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Color a class mask with the legend colors.
    Render {
        /// Class mask; defaults to the pipeline prediction.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Output PNG; defaults next to the prediction.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run rasterize-labels, tile, train, predict, vectorize and score.
    Pipeline,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0} requires --manifest")]
    NeedsManifest(&'static str),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={value:?} is not a positive integer")))?;
    // A second configuration in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn manifest(global: &GlobalArgs, what: &'static str) -> Result<PipelineManifest, CliError> {
    let path = global.manifest.as_deref().ok_or(CliError::NeedsManifest(what))?;
    let mut m = PipelineManifest::load(path)?;
    m.apply(&Overrides { seed: global.seed, width_scale: global.width_scale, epsilon: global.epsilon, output: global.out.clone() });
    m.validate()?;
    Ok(m)
}

fn legend_for(global: &GlobalArgs) -> Result<ClassLegend, CliError> {
    match &global.manifest {
        Some(_) => Ok(manifest(global, "")?.legend()?),
        None => Ok(ClassLegend::default()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let g = &cli.global;
    match cli.command {
        Command::Synth { size } => {
            let out = g.out.clone().ok_or_else(|| CliError::Usage("synth requires --out".into()))?;
            if size < 64 {
                return Err(CliError::Usage(format!("--size {size} must be at least 64")));
            }
            let defaults = SynthConfig::default();
            let cfg = SynthConfig { width: size, height: size, seed: g.seed.unwrap_or(defaults.seed), ..defaults };
            let files = synth::write_aoi(&synth::generate_aoi(&cfg), &ClassLegend::default(), &out).map_err(PipelineError::from)?;
            println!("wrote synthetic AOI; manifest {}", files.manifest.display());
        }
        Command::RasterizeLabels => {
            let m = manifest(g, "rasterize-labels")?;
            let mask = pipeline::rasterize_stage(&m)?;
            println!("rasterized {} dwelling pixels", mask.data.iter().filter(|&&c| c != 0).count());
        }
        Command::Tile => {
            let s = pipeline::tile_stage(&manifest(g, "tile")?)?;
            println!("kept {} tiles (discarded {}): {} train, {} val, {} test", s.kept, s.discarded, s.train, s.val, s.test);
        }
        Command::Pretrain { epochs, patches_per_class, learning_rate } => {
            let m = manifest(g, "pretrain")?;
            let out = g.out.clone().ok_or_else(|| CliError::Usage("pretrain requires --out <encoder file>".into()))?;
            let patches = synth::texture_patches(patches_per_class, 32, m.model.num_classes, m.seed);
            let cfg = PretrainConfig {
                epochs,
                num_classes: m.model.num_classes,
                adam: AdamConfig { learning_rate, ..AdamConfig::default() },
                seed: m.seed,
                ..PretrainConfig::default()
            };
            let losses = ternausnet::pretrain_encoder(&m.model, &patches, &cfg, &out).map_err(PipelineError::from)?;
            println!("pretrained encoder written to {} (final loss {:?})", out.display(), losses.last());
        }
        Command::Train => {
            let best = pipeline::train_stage(&manifest(g, "train")?)?;
            println!("kept weights from epoch {best}");
        }
        Command::Predict => {
            pipeline::predict_stage(&manifest(g, "predict")?)?;
            println!("prediction written");
        }
        Command::Vectorize => {
            let n = pipeline::vectorize_stage(&manifest(g, "vectorize")?)?;
            println!("{n} dwelling polygons");
        }
        Command::Score => {
            let n = pipeline::score_stage(&manifest(g, "score")?)?;
            println!("scored {n} dwellings");
        }
        Command::Evaluate { pred, truth } => {
            let (pred, truth, legend, out) = match (&g.manifest, pred, truth) {
                (_, Some(p), Some(t)) => {
                    let out = g.out.clone().map(|d| d.join(pipeline::EVALUATION_TXT));
                    (p, t, legend_for(g)?, out)
                }
                (Some(_), p, t) => {
                    let m = manifest(g, "evaluate")?;
                    let p = p.unwrap_or_else(|| m.prediction(pipeline::CLASSES_PNG));
                    let t = t.unwrap_or_else(|| m.out(pipeline::LABEL_MASK));
                    (p, t, m.legend()?, Some(m.out(pipeline::EVALUATION_TXT)))
                }
                (None, _, _) => return Err(CliError::Usage("evaluate requires --pred and --truth, or --manifest".into())),
            };
            let report = match &out {
                Some(path) => pipeline::evaluate_files(&pred, &truth, &legend, path)?,
                None => pipeline::evaluate_masks(
                    &crate::geodata::load_mask(&pred).map_err(PipelineError::from)?,
                    &crate::geodata::load_mask(&truth).map_err(PipelineError::from)?,
                )?,
            };
            let names: Vec<&str> = (0..crate::geodata::NUM_CLASSES as u8).map(|c| legend.name(c)).collect();
            print!("{}", report.render(&names));
        }
        Command::Render { mask, output } => {
            let (mask, output, legend) = match (&g.manifest, mask, output) {
                (_, Some(mask), Some(out)) => (mask, out, legend_for(g)?),
                (Some(_), mask, out) => {
                    let m = manifest(g, "render")?;
                    let mask = mask.unwrap_or_else(|| m.prediction(pipeline::CLASSES_PNG));
                    (mask, out.unwrap_or_else(|| m.prediction(pipeline::CLASSES_COLOR_PNG)), m.legend()?)
                }
                (None, _, _) => return Err(CliError::Usage("render requires --mask and --output, or --manifest".into())),
            };
            pipeline::render_file(&mask, &legend, &output)?;
            println!("rendered {}", output.display());
        }
        Command::Pipeline => {
            let s = pipeline::run_pipeline(&manifest(g, "pipeline")?)?;
            println!(
                "{} tiles ({} train); weights from epoch {}; {} dwellings scored into {}",
                s.tiles.kept,
                s.tiles.train,
                s.best_epoch,
                s.dwellings,
                s.risk_geojson.display()
            );
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status: 0 on success, 1 on failure, 2 on usage errors.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e @ (CliError::Usage(_) | CliError::NeedsManifest(_))) => {
            eprintln!("roofrisk: {e}");
            2
        }
        Err(e) => {
            eprintln!("roofrisk: error: {}", error_chain(&e));
            1
        }
    }
}

/// `e` followed by its sources, colon-separated, on one line.
fn error_chain(e: &dyn std::error::Error) -> String {
    let mut s = e.to_string();
    let mut cur = e.source();
    while let Some(src) = cur {
        let text = src.to_string();
        if !s.contains(&text) {
            s.push_str(": ");
            s.push_str(&text);
        }
        cur = src.source();
    }
    s
}

/// Convenience for tests and scripts: runs `roofrisk <args>`.
pub fn run_args(args: &[&str]) -> i32 {
    run_command(std::iter::once("roofrisk").chain(args.iter().copied()))
}

#[cfg(test)]
mod tests {
    use std::fs;
    use std::path::{Path, PathBuf};

    use super::run_args;
    use crate::geodata::{self, ClassMask};
    use crate::pipeline;

    fn s(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    /// A small synthetic AOI whose manifest trains for two epochs only.
    fn small_aoi(dir: &Path) -> PathBuf {
        let aoi = dir.join("aoi");
        assert_eq!(run_args(&["synth", "--size", "192", "--out", s(&aoi)]), 0);
        let manifest = aoi.join("manifest.toml");
        let text = fs::read_to_string(&manifest).unwrap();
        assert!(text.contains("max_epochs = 150"));
        fs::write(&manifest, text.replace("max_epochs = 150", "max_epochs = 2")).unwrap();
        manifest
    }

    #[test]
    fn chained_stages_reproduce_the_pipeline_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_aoi(dir.path());
        let (whole, staged) = (dir.path().join("whole"), dir.path().join("staged"));
        assert_eq!(run_args(&["pipeline", "--manifest", s(&manifest), "--out", s(&whole)]), 0);
        for stage in ["rasterize-labels", "tile", "train", "predict", "vectorize", "score"] {
            assert_eq!(run_args(&[stage, "--manifest", s(&manifest), "--out", s(&staged)]), 0, "{stage}");
        }
        let files = [
            PathBuf::from(pipeline::LABEL_MASK),
            Path::new(pipeline::PREDICTION_DIR).join(pipeline::CLASSES_PNG),
            Path::new(pipeline::PREDICTION_DIR).join(pipeline::CONFIDENCE_PNG),
            PathBuf::from(pipeline::DWELLINGS_GEOJSON),
            PathBuf::from(pipeline::RISK_GEOJSON),
            PathBuf::from(pipeline::CLUSTERS_TSV),
        ];
        for f in files {
            let (a, b) = (fs::read(whole.join(&f)).unwrap(), fs::read(staged.join(&f)).unwrap());
            assert!(a == b, "{} differs", f.display());
        }
    }

    #[test]
    fn evaluate_of_a_mask_against_itself_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let mut mask = ClassMask::zeros(20, 10);
        for i in 0..200 {
            mask.data[i] = (i % 8) as u8;
        }
        let path = dir.path().join("m.png");
        geodata::save_mask(&mask, &path).unwrap();
        assert_eq!(run_args(&["evaluate", "--pred", s(&path), "--truth", s(&path), "--out", s(dir.path())]), 0);
        let report = fs::read_to_string(dir.path().join(pipeline::EVALUATION_TXT)).unwrap();
        for key in ["weighted_accuracy", "weighted_iou", "binary_accuracy", "binary_precision", "binary_recall"] {
            assert!(report.contains(&format!("{key} = 1.000000\n")), "{key} in\n{report}");
        }
    }

    #[test]
    fn rendering_an_all_background_mask_is_black() {
        let dir = tempfile::tempdir().unwrap();
        let (mask, png) = (dir.path().join("bg.png"), dir.path().join("bg_color.png"));
        geodata::save_mask(&ClassMask::zeros(7, 5), &mask).unwrap();
        assert_eq!(run_args(&["render", "--mask", s(&mask), "--output", s(&png)]), 0);
        let img = image::open(&png).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (7, 5));
        assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(run_args(&["frobnicate"]), 2);
    }

    #[test]
    fn stage_without_manifest_is_a_usage_error() {
        assert_eq!(run_args(&["tile"]), 2);
    }

    #[test]
    fn missing_input_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_aoi(dir.path());
        fs::remove_file(dir.path().join("aoi").join("hazard.asc")).unwrap();
        assert_eq!(run_args(&["pipeline", "--manifest", s(&manifest)]), 1);
        assert!(!dir.path().join("aoi").join("out").exists());
    }

    #[test]
    fn out_of_range_override_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_aoi(dir.path());
        assert_eq!(run_args(&["tile", "--manifest", s(&manifest), "--width-scale", "2"]), 1);
        assert!(!dir.path().join("aoi").join("out").join(pipeline::TILES_DIR).exists());
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run_args(&["--help"]), 0);
    }
}
