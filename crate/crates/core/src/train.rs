//! Adam training over tiled datasets with optional augmentation,
//! validation-IoU model selection, early stopping and checkpointing.

use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodata::GeoRaster;
use crate::metrics::{self, ConfusionMatrix};
use crate::tensor::{softmax_cross_entropy, Scalar, Tensor, TensorError};
use crate::ternausnet::{self, ModelError, ModelParams};
use crate::tiler::{seeded_permutation, Split, TileSample, ValidRegion};

pub const WEIGHTS_BEST: &str = "best_weights.bin";
pub const WEIGHTS_LAST: &str = "last_weights.bin";
pub const OPTIMIZER_LAST: &str = "last_optimizer.bin";
pub const TRAIN_LOG: &str = "train_log.txt";
const LOG_HEADER: &str = "epoch\ttrain_loss\tval_weighted_acc\tval_weighted_iou";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("no {0} tiles")]
    EmptySplit(Split),
    #[error("non-finite gradient in tensor {0}")]
    NonFinite(String),
    #[error("optimizer state does not match parameters: {0}")]
    State(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Maps an 8-bit sample to roughly `[-2, 2]`.
pub fn normalize_pixel(v: u8) -> f32 {
    (v as f32 / 255.0 - 0.5) / 0.25
}

/// `[1, 3, H, W]` network input; single-band rasters are replicated.
pub fn image_tensor(raster: &GeoRaster) -> Tensor<f32> {
    let plane = raster.width * raster.height;
    let data: Vec<f32> = (0..3)
        .flat_map(|b| {
            let band = if raster.bands == 3 { b } else { 0 };
            raster.data[band * plane..(band + 1) * plane].iter().map(|&v| normalize_pixel(v))
        })
        .collect();
    Tensor::from_vec(&[1, 3, raster.height, raster.width], data).expect("raster data matches its extent")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::Config(format!("{name} {b} not in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(TrainError::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Adam moments mirroring the parameter list, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        OptimizerState { m: shapes.iter().map(|s| Tensor::zeros(s)).collect(), v: shapes.iter().map(|s| Tensor::zeros(s)).collect(), t: 0 }
    }

    pub fn for_params(params: &ModelParams<T>) -> Self {
        let shapes: Vec<&[usize]> = params.tensors().iter().map(Tensor::shape).collect();
        Self::new(&shapes)
    }
}

/// One Adam update. Gradients are checked for finiteness before anything
/// is modified; the first offending tensor is named in the error.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    names: &[String],
    state: &mut OptimizerState<T>,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(TrainError::State(format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(TrainError::State(format!("tensor {i} shape {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFinite(names.get(i).cloned().unwrap_or_else(|| format!("#{i}"))));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(config.beta1), T::from_f64(config.beta2));
    let (one, lr, eps) = (T::one(), T::from_f64(config.learning_rate), T::from_f64(config.epsilon));
    let c1 = T::from_f64(1.0 - config.beta1.powi(t));
    let c2 = T::from_f64(1.0 - config.beta2.powi(t));
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn save_optimizer_state(state: &OptimizerState<f32>, names: &[String], path: &Path) -> Result<()> {
    // The step counter is stored as four exact 16-bit limbs, most significant first.
    let limbs: Vec<f32> = (0..4).rev().map(|k| ((state.t >> (16 * k)) & 0xffff) as f32).collect();
    let step = Tensor::from_vec(&[4], limbs)?;
    let m_names: Vec<String> = names.iter().map(|n| format!("m.{n}")).collect();
    let v_names: Vec<String> = names.iter().map(|n| format!("v.{n}")).collect();
    let mut pairs: Vec<(&str, &Tensor<f32>)> = vec![("step", &step)];
    pairs.extend(m_names.iter().map(String::as_str).zip(&state.m));
    pairs.extend(v_names.iter().map(String::as_str).zip(&state.v));
    Ok(ternausnet::write_tensor_file(path, &pairs)?)
}

pub fn load_optimizer_state(path: &Path, params: &ModelParams<f32>) -> Result<OptimizerState<f32>> {
    let mut tensors = ternausnet::read_tensor_file(path)?.into_iter();
    let n = params.tensors().len();
    let (name, step) = tensors.next().ok_or_else(|| TrainError::State("empty optimizer file".into()))?;
    if name != "step" || step.len() != 4 {
        return Err(TrainError::State("missing step counter".into()));
    }
    let h = step.data();
    let t = ((h[0] as u64) << 48) | ((h[1] as u64) << 32) | ((h[2] as u64) << 16) | h[3] as u64;
    let rest: Vec<(String, Tensor<f32>)> = tensors.collect();
    if rest.len() != 2 * n {
        return Err(TrainError::State(format!("{} moment tensors for {n} parameters", rest.len())));
    }
    for (i, (name, tensor)) in rest.iter().enumerate() {
        let (prefix, p) = if i < n { ("m", i) } else { ("v", i - n) };
        let expected = format!("{prefix}.{}", params.names()[p]);
        if *name != expected || tensor.shape() != params.tensors()[p].shape() {
            return Err(TrainError::State(format!(
                "expected {expected} {:?}, found {name} {:?}",
                params.tensors()[p].shape(),
                tensor.shape()
            )));
        }
    }
    let (m, v): (Vec<_>, Vec<_>) = rest.into_iter().enumerate().partition(|(i, _)| *i < n);
    Ok(OptimizerState { m: m.into_iter().map(|(_, (_, t))| t).collect(), v: v.into_iter().map(|(_, (_, t))| t).collect(), t })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Augment {
    Hflip,
    Rot90,
    Randcrop,
}

fn map_planes(sample: &TileSample, size: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> (Vec<u8>, Vec<u8>) {
    let bands = sample.image.bands;
    let mut image = vec![0u8; bands * size * size];
    let mut mask = vec![0u8; size * size];
    for r in 0..size {
        for c in 0..size {
            let (sr, sc) = f(r, c);
            mask[r * size + c] = sample.mask.data[sr * size + sc];
            for b in 0..bands {
                image[(b * size + r) * size + c] = sample.image.data[(b * size + sr) * size + sc];
            }
        }
    }
    (image, mask)
}

fn with_planes(sample: &TileSample, image: Vec<u8>, mask: Vec<u8>, valid: ValidRegion) -> TileSample {
    let mut out = sample.clone();
    out.image.data = image;
    out.mask.data = mask;
    out.valid_region = valid;
    out
}

/// Rows (or columns) `i` in `0..size` whose source index `src(i)` lies in `[lo, hi)`.
fn preimage(size: usize, lo: usize, hi: usize, src: impl Fn(usize) -> usize) -> (usize, usize) {
    let hits: Vec<usize> = (0..size).filter(|&i| (lo..hi).contains(&src(i))).collect();
    match (hits.first(), hits.last()) {
        (Some(&a), Some(&b)) => (a, b + 1 - a),
        _ => (0, 0),
    }
}

/// Applies one augmentation; image, mask and valid region move together.
///
/// `Hflip` mirrors columns and `Rot90` rotates a quarter turn
/// counter-clockwise; neither consumes randomness. `Randcrop` takes a
/// uniformly placed `size/2` crop and scales it back up, bilinear for the
/// image and nearest-neighbour for the mask.
pub fn augment_sample(sample: &TileSample, mode: Augment, rng: &mut impl Rng) -> TileSample {
    let s = sample.size();
    let vr = sample.valid_region;
    match mode {
        Augment::Hflip => {
            let (image, mask) = map_planes(sample, s, |r, c| (r, s - 1 - c));
            let col0 = if vr.width == 0 { 0 } else { s - vr.col0 - vr.width };
            with_planes(sample, image, mask, ValidRegion { col0, ..vr })
        }
        Augment::Rot90 => {
            let (image, mask) = map_planes(sample, s, |r, c| (c, s - 1 - r));
            let row0 = if vr.width == 0 { 0 } else { s - vr.col0 - vr.width };
            with_planes(sample, image, mask, ValidRegion { col0: vr.row0, row0, width: vr.height, height: vr.width })
        }
        Augment::Randcrop => {
            let half = (s / 2).max(1);
            let oy = rng.random_range(0..=s - half);
            let ox = rng.random_range(0..=s - half);
            let nearest = |i: usize| ((i as f64 + 0.5) * half as f64 / s as f64).floor() as usize;
            let (_, mask) = map_planes(sample, s, |r, c| (oy + nearest(r), ox + nearest(c)));
            let bands = sample.image.bands;
            let mut image = vec![0u8; bands * s * s];
            let coord = |i: usize| (((i as f64 + 0.5) * half as f64 / s as f64) - 0.5).clamp(0.0, (half - 1) as f64);
            for r in 0..s {
                let y = coord(r);
                let (y0, fy) = (y.floor() as usize, y - y.floor());
                let y1 = (y0 + 1).min(half - 1);
                for c in 0..s {
                    let x = coord(c);
                    let (x0, fx) = (x.floor() as usize, x - x.floor());
                    let x1 = (x0 + 1).min(half - 1);
                    for b in 0..bands {
                        let px = |yy: usize, xx: usize| sample.image.data[(b * s + oy + yy) * s + ox + xx] as f64;
                        let v = (1.0 - fy) * ((1.0 - fx) * px(y0, x0) + fx * px(y0, x1)) + fy * ((1.0 - fx) * px(y1, x0) + fx * px(y1, x1));
                        image[(b * s + r) * s + c] = v.round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
            let (row0, height) = preimage(s, vr.row0, vr.row0 + vr.height, |r| oy + nearest(r));
            let (col0, width) = preimage(s, vr.col0, vr.col0 + vr.width, |c| ox + nearest(c));
            let valid = if width == 0 || height == 0 { ValidRegion::at_origin(0, 0) } else { ValidRegion { col0, row0, width, height } };
            with_planes(sample, image, mask, valid)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; `None` never stops early.
    pub early_stop_patience: Option<usize>,
    pub augment: Vec<Augment>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 4,
            max_epochs: 50,
            early_stop_patience: Some(10),
            augment: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Network input, targets and validity for a batch of tiles.
pub fn batch_tensors(tiles: &[&TileSample]) -> Result<(Tensor<f32>, Vec<u8>, Vec<bool>)> {
    let images: Vec<Tensor<f32>> = tiles.iter().map(|t| image_tensor(&t.image)).collect();
    let targets = tiles.iter().flat_map(|t| t.mask.data.iter().copied()).collect();
    let valid = tiles.iter().flat_map(|t| t.valid_mask()).collect();
    Ok((Tensor::stack(&images)?, targets, valid))
}

/// One optimizer step on a batch; returns the batch loss, or `None` when
/// the batch has no valid pixels (nothing is updated then).
pub fn train_step(
    params: &mut ModelParams<f32>,
    state: &mut OptimizerState<f32>,
    tiles: &[&TileSample],
    adam: &AdamConfig,
) -> Result<Option<f32>> {
    let (x, targets, valid) = batch_tensors(tiles)?;
    if !valid.iter().any(|&v| v) {
        return Ok(None);
    }
    let (logits, tape) = ternausnet::forward_train(params, &x)?;
    let (loss, grad) = softmax_cross_entropy(&logits, &targets, &valid)?;
    let (grads, _) = ternausnet::backward(params, tape, grad, false)?;
    let names = params.names().to_vec();
    adam_step(params.tensors_mut(), &grads, &names, state, adam)?;
    Ok(Some(loss))
}

/// Confusion matrix of the model's argmax predictions over valid pixels.
pub fn evaluate_tiles(params: &ModelParams<f32>, tiles: &[&TileSample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    for tile in tiles {
        let logits = ternausnet::forward(params, &image_tensor(&tile.image))?;
        let (_, c, h, w) = logits.dims4()?;
        let plane = h * w;
        let x = logits.data();
        let pred: Vec<u8> =
            (0..plane).map(|p| (1..c).fold(0, |best, k| if x[k * plane + p] > x[best * plane + p] { k } else { best }) as u8).collect();
        let valid = tile.valid_mask();
        if valid.iter().any(|&v| v) {
            cm += metrics::confusion(&pred, &tile.mask.data, &valid)?;
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_weighted_acc: f64,
    pub val_weighted_iou: f64,
}

pub fn render_log(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}", e.epoch, e.train_loss, e.val_weighted_acc, e.val_weighted_iou);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ModelParams<f32>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub last: ModelParams<f32>,
    pub state: OptimizerState<f32>,
    pub log: Vec<EpochLog>,
}

fn io_err(path: &Path, e: std::io::Error) -> TrainError {
    TrainError::Model(ModelError::Io { path: path.display().to_string(), source: e })
}

/// Trains on the TRAIN tiles, selecting by validation weighted IoU.
///
/// Epoch `e` (1-based) shuffles with seed `seed + e` and draws augmentation
/// choices from a ChaCha8 stream seeded the same way, so a run is fully
/// determined by the seed. With `checkpoint_dir` set, the best and last
/// weights, the last optimizer state and the log are rewritten each epoch.
pub fn train_loop(
    params: ModelParams<f32>,
    tiles: &[TileSample],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train: Vec<&TileSample> = tiles.iter().filter(|t| t.split == Split::Train).collect();
    let val: Vec<&TileSample> = tiles.iter().filter(|t| t.split == Split::Val).collect();
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }
    train_loop_with(params, &train, &val, config, checkpoint_dir, |_| ControlFlow::Continue(()))
}

/// [`train_loop`] on explicit training and validation sets, calling
/// `on_epoch` after each epoch is logged; `ControlFlow::Break` ends training
/// after that epoch.
pub fn train_loop_with(
    mut params: ModelParams<f32>,
    train: &[&TileSample],
    val: &[&TileSample],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let adam = config.adam();
    let mut state = OptimizerState::for_params(&params);
    let mut best = params.clone();
    let (mut best_iou, mut best_epoch, mut stale) = (f64::NEG_INFINITY, 0, 0);
    let mut log = Vec::new();
    for epoch in 1..=config.max_epochs {
        let epoch_seed = config.seed.wrapping_add(epoch as u64);
        let order = seeded_permutation(train.len(), epoch_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let (mut total, mut batches) = (0.0f64, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let augmented: Vec<TileSample> = chunk.iter().map(|&i| augment_random(train[i], &config.augment, &mut rng)).collect();
            let refs: Vec<&TileSample> = augmented.iter().collect();
            if let Some(loss) = train_step(&mut params, &mut state, &refs, &adam)? {
                total += loss as f64;
                batches += 1;
            }
        }
        let cm = evaluate_tiles(&params, val)?;
        let entry = EpochLog {
            epoch,
            train_loss: if batches > 0 { total / batches as f64 } else { f64::NAN },
            val_weighted_acc: metrics::weighted_accuracy(&cm),
            val_weighted_iou: metrics::weighted_iou(&cm),
        };
        log.push(entry);
        if entry.val_weighted_iou > best_iou {
            best_iou = entry.val_weighted_iou;
            best_epoch = epoch;
            best = params.clone();
            stale = 0;
            if let Some(dir) = checkpoint_dir {
                ternausnet::save_weights(&best, &dir.join(WEIGHTS_BEST))?;
            }
        } else {
            stale += 1;
        }
        if let Some(dir) = checkpoint_dir {
            ternausnet::save_weights(&params, &dir.join(WEIGHTS_LAST))?;
            save_optimizer_state(&state, params.names(), &dir.join(OPTIMIZER_LAST))?;
            let path = dir.join(TRAIN_LOG);
            fs::write(&path, render_log(&log)).map_err(|e| io_err(&path, e))?;
        }
        if on_epoch(&entry).is_break() || config.early_stop_patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    Ok(TrainOutcome { best, best_epoch, last: params, state, log })
}

/// Applies each configured augmentation at random: flips and crops with
/// probability 1/2, rotations by a uniform number of quarter turns.
fn augment_random(sample: &TileSample, modes: &[Augment], rng: &mut ChaCha8Rng) -> TileSample {
    let mut out = sample.clone();
    for &mode in modes {
        let times = match mode {
            Augment::Rot90 => (rng.next_u32() % 4) as usize,
            _ => (rng.next_u32() % 2) as usize,
        };
        for _ in 0..times {
            out = augment_sample(&out, mode, rng);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::{ClassMask, GeoTransform};

    fn tile(size: usize) -> TileSample {
        let image = GeoRaster::new(
            size,
            size,
            3,
            (0..3 * size * size).map(|i| (i * 7 % 251) as u8).collect(),
            GeoTransform::north_up(0.0, 0.0, 0.5),
        )
        .unwrap();
        let mask = ClassMask { width: size, height: size, data: (0..size * size).map(|i| (i % 8) as u8).collect() };
        TileSample {
            image,
            mask,
            aoi_id: "a".into(),
            tile_index: (0, 0),
            valid_region: ValidRegion::at_origin(size, size - 3),
            split: Split::Train,
        }
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = vec![Tensor::<f64>::full(&[3], 0.5)];
        let mut st = OptimizerState::new(&[&[3]]);
        for _ in 0..5 {
            adam_step(&mut p, &[Tensor::zeros(&[3])], &["w".into()], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p[0].data(), &[0.5; 3]);
        assert_eq!(st.m[0].data(), &[0.0; 3]);
        assert_eq!(st.v[0].data(), &[0.0; 3]);
        assert_eq!(st.t, 5);
    }

    #[test]
    fn first_step_is_lr_sized() {
        let mut p = vec![Tensor::<f64>::zeros(&[1])];
        let mut st = OptimizerState::new(&[&[1]]);
        adam_step(&mut p, &[Tensor::full(&[1], 1.0)], &["w".into()], &mut st, &AdamConfig::default()).unwrap();
        assert!((p[0].data()[0] - (-1e-4 / (1.0 + 1e-8))).abs() < 1e-18);
        assert!((p[0].data()[0] + 9.99999990e-5).abs() < 1e-13);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = vec![Tensor::<f32>::zeros(&[1]), Tensor::zeros(&[2])];
        let mut st = OptimizerState::new(&[&[1], &[2]]);
        let g = vec![Tensor::zeros(&[1]), Tensor::from_vec(&[2], vec![0.0, f32::INFINITY]).unwrap()];
        let err = adam_step(&mut p, &g, &["a".into(), "dec3.up.weight".into()], &mut st, &AdamConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient in tensor dec3.up.weight");
        assert_eq!(st.t, 0);
    }

    #[test]
    fn hflip_and_rot90_cycles() {
        let t = tile(32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = augment_sample(&t, Augment::Hflip, &mut rng);
        assert_eq!(f.mask.data[31], t.mask.data[0]);
        assert_eq!(augment_sample(&f, Augment::Hflip, &mut rng), t);
        let mut r = t.clone();
        for _ in 0..4 {
            r = augment_sample(&r, Augment::Rot90, &mut rng);
        }
        assert_eq!(r, t);
        let once = augment_sample(&t, Augment::Rot90, &mut rng);
        assert_eq!(once.mask.data[0], t.mask.data[31]);
        let mut a = once.mask.data.clone();
        let mut b = t.mask.data.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        // Padded bottom rows become padded right columns.
        assert_eq!(once.valid_region, ValidRegion { col0: 0, row0: 0, width: 29, height: 32 });
    }

    #[test]
    fn randcrop_keeps_classes_aligned() {
        let mut t = tile(32);
        t.mask.data = (0..32 * 32).map(|i| if i % 32 < 16 { 1 } else { 2 }).collect();
        t.image.data[..32 * 32].copy_from_slice(&t.mask.data.iter().map(|&c| c * 100).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = augment_sample(&t, Augment::Randcrop, &mut rng);
        for (i, &m) in c.mask.data.iter().enumerate() {
            let v = c.image.data[i];
            assert!(v == m * 100 || (100..=200).contains(&v), "pixel {i}: mask {m} image {v}");
        }
        assert!(c.valid_region.width <= 32 && c.valid_region.height <= 32);
    }

    #[test]
    fn optimizer_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = ternausnet::build_model(&ternausnet::ModelConfig::scaled(0.0625), 0).unwrap();
        let mut st = OptimizerState::for_params(&params);
        st.t = (1 << 40) + 12345;
        st.m[3].data_mut()[0] = 0.25;
        let path = dir.path().join("opt.bin");
        save_optimizer_state(&st, params.names(), &path).unwrap();
        assert_eq!(load_optimizer_state(&path, &params).unwrap(), st);
    }

    #[test]
    fn zero_epochs_returns_initial() {
        let params = ternausnet::build_model(&ternausnet::ModelConfig::scaled(0.0625), 0).unwrap();
        let mut v = tile(32);
        v.split = Split::Val;
        let cfg = TrainConfig { max_epochs: 0, ..Default::default() };
        let out = train_loop(params.clone(), &[tile(32), v], &cfg, None).unwrap();
        assert_eq!(out.best, params);
        assert!(out.log.is_empty());
        assert!(matches!(train_loop(params, &[tile(32)], &cfg, None), Err(TrainError::EmptySplit(Split::Val))));
    }
}
