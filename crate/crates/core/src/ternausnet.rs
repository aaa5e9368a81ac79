//! VGG-encoder U-Net ("TernausNet") for per-pixel roof-type classification.
//!
//! Channel plan at `width_scale = 1` for the VGG11 encoder:
//!
//! ```text
//! encoder  conv 3->64 | M | 64->128 | M | 128->256, 256->256 | M
//!          256->512, 512->512 | M | 512->512, 512->512 | M
//! center   conv 512->512, up 512->256
//! dec5     cat(center, enc5) 768 -> conv 512, up 256
//! dec4     cat(dec5, enc4)   768 -> conv 512, up 128
//! dec3     cat(dec4, enc3)   384 -> conv 256, up 64
//! dec2     cat(dec3, enc2)   192 -> conv 128, up 32
//! dec1     cat(dec2, enc1)    96 -> conv 32
//! final    1x1 conv 32 -> num_classes (no activation)
//! ```
//!
//! `M` is 2x2 max-pooling, every `conv` is 3x3 / pad 1 followed by ReLU and
//! every `up` is a 4x4 / stride 2 / pad 1 transposed convolution followed by
//! ReLU, which exactly doubles the spatial extent. The VGG16 variant uses the
//! deeper encoder (64,64 | 128,128 | 256x3 | 512x3 | 512x3) and TernausNet16's
//! wider dec4 (`up` to 256). Each channel count `c` is scaled to
//! `max(1, round(c * width_scale))`.
//!
//! Parameters are stored in layer order, weight then bias:
//! `encoder.{i}`, `center.conv`, `center.up`, `dec5.conv`, `dec5.up`, ...,
//! `dec2.up`, `dec1.conv`, `final`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    self, concat_channels, conv2d, maxpool2d, maxpool2d_backward, relu, relu_backward, split_channels, transposed_conv2d,
    transposed_conv2d_backward, ConvSpec, Scalar, Tensor, TensorError,
};
use crate::train::{self, AdamConfig, OptimizerState};

const WEIGHT_MAGIC: &[u8; 8] = b"RRTENSOR";
const WEIGHT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input extent {0}x{1} is not divisible by 32")]
    Indivisible(usize, usize),
    #[error("expected a [N,3,H,W] batch, got {0:?}")]
    InputShape(Vec<usize>),
    #[error("shape mismatch at tensor {name}: file has {found:?}, model expects {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("weight file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Train(Box<train::TrainError>),
}

impl From<train::TrainError> for ModelError {
    fn from(e: train::TrainError) -> Self {
        ModelError::Train(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    #[serde(rename = "vgg11")]
    Vgg11,
    #[serde(rename = "vgg16")]
    Vgg16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub width_scale: f64,
    pub num_classes: usize,
    pub pretrained_encoder_path: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { encoder: EncoderKind::Vgg11, width_scale: 1.0, num_classes: 8, pretrained_encoder_path: None }
    }
}

impl ModelConfig {
    pub fn scaled(width_scale: f64) -> Self {
        ModelConfig { width_scale, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(ModelError::Config(format!("width_scale {} not in (0, 1]", self.width_scale)));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config(format!("num_classes {} < 2", self.num_classes)));
        }
        Ok(())
    }

    fn ch(&self, base: usize) -> usize {
        ((base as f64 * self.width_scale).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub spec: ConvSpec,
    pub transposed: bool,
    pub relu: bool,
}

/// Layer table and wiring derived from a [`ModelConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
    /// Encoder layer indices grouped by pooling stage.
    pub stages: Vec<Vec<usize>>,
    /// `(conv, up)` for the center block then dec5..dec2.
    pub up_blocks: Vec<(usize, usize)>,
    pub dec1: usize,
    pub head: usize,
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let enc_plan: &[&[usize]] = match config.encoder {
            EncoderKind::Vgg11 => &[&[64], &[128], &[256, 256], &[512, 512], &[512, 512]],
            EncoderKind::Vgg16 => &[&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]],
        };
        // (mid, out) per up block: center, dec5, dec4, dec3, dec2.
        let dec_plan: [(usize, usize); 5] = match config.encoder {
            EncoderKind::Vgg11 => [(512, 256), (512, 256), (512, 128), (256, 64), (128, 32)],
            EncoderKind::Vgg16 => [(512, 256), (512, 256), (512, 256), (256, 64), (128, 32)],
        };
        let mut layers = Vec::new();
        let mut push = |name: String, spec: ConvSpec, transposed: bool, relu: bool| {
            layers.push(LayerSpec { name, spec, transposed, relu });
            layers.len() - 1
        };
        let conv3 = |i, o| ConvSpec::square(i, o, 3, 1, 1);
        let up4 = |i, o| ConvSpec::square(i, o, 4, 2, 1);

        let mut stages = Vec::new();
        let mut stage_out = Vec::new();
        let mut c_in = 3;
        let mut idx = 0;
        for stage in enc_plan {
            let mut ids = Vec::new();
            for &base in *stage {
                let c_out = config.ch(base);
                ids.push(push(format!("encoder.{idx}"), conv3(c_in, c_out), false, true));
                c_in = c_out;
                idx += 1;
            }
            stages.push(ids);
            stage_out.push(c_in);
        }
        let names = ["center", "dec5", "dec4", "dec3", "dec2"];
        let mut up_blocks = Vec::new();
        let mut h = c_in;
        for (b, (&(mid, out), name)) in dec_plan.iter().zip(names).enumerate() {
            let cin = if b == 0 { h } else { h + stage_out[stage_out.len() - b] };
            let (mid, out) = (config.ch(mid), config.ch(out));
            let conv = push(format!("{name}.conv"), conv3(cin, mid), false, true);
            let up = push(format!("{name}.up"), up4(mid, out), true, true);
            up_blocks.push((conv, up));
            h = out;
        }
        let nf = config.ch(32);
        let dec1 = push("dec1.conv".into(), conv3(h + stage_out[0], nf), false, true);
        let head = push("final".into(), ConvSpec::square(nf, config.num_classes, 1, 1, 0), false, false);
        Ok(Architecture { layers, stages, up_blocks, dec1, head })
    }

    pub fn weight_shape(&self, layer: usize) -> Vec<usize> {
        let l = &self.layers[layer];
        let (kh, kw) = l.spec.kernel;
        if l.transposed {
            vec![l.spec.in_channels, l.spec.out_channels, kh, kw]
        } else {
            vec![l.spec.out_channels, l.spec.in_channels, kh, kw]
        }
    }

    /// `(name, shape)` of every parameter tensor in storage order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [(format!("{}.weight", l.name), self.weight_shape(i)), (format!("{}.bias", l.name), vec![l.spec.out_channels])]
            })
            .collect()
    }

    pub fn encoder_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.stages.iter().flatten().copied()
    }
}

/// Named parameter tensors of a built model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub arch: Architecture,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn weight(&self, layer: usize) -> &Tensor<T> {
        &self.tensors[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor<T> {
        &self.tensors[2 * layer + 1]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            arch: self.arch.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Zero tensors shaped like the parameters.
    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }
}

/// Builds a model: He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
///
/// For a transposed convolution the fan-in is the number of inputs that
/// reach one output pixel, `in_channels * kh * kw / (sh * sw)`. When
/// `pretrained_encoder_path` is set the encoder tensors are replaced by the
/// file's contents; the random stream is drawn in full either way, so the
/// decoder is identical with and without pretraining for the same seed.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams<f32>> {
    let arch = Architecture::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (i, layer) in arch.layers.iter().enumerate() {
        let shape = arch.weight_shape(i);
        let (kh, kw) = layer.spec.kernel;
        let fan_in = if layer.transposed {
            (layer.spec.in_channels * kh * kw) as f64 / (layer.spec.stride.0 * layer.spec.stride.1) as f64
        } else {
            (layer.spec.in_channels * kh * kw) as f64
        };
        let std = (2.0 / fan_in).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * std) as f32
            })
            .collect();
        names.push(format!("{}.weight", layer.name));
        tensors.push(Tensor::from_vec(&shape, data)?);
        names.push(format!("{}.bias", layer.name));
        tensors.push(Tensor::zeros(&[layer.spec.out_channels]));
    }
    let mut params = ModelParams { config: config.clone(), arch, names, tensors };
    if let Some(path) = &config.pretrained_encoder_path {
        load_encoder_into(&mut params, path)?;
    }
    Ok(params)
}

fn load_encoder_into(params: &mut ModelParams<f32>, path: &Path) -> Result<()> {
    let loaded = read_tensor_file(path)?;
    let encoder: Vec<usize> = params.arch.encoder_layers().flat_map(|l| [2 * l, 2 * l + 1]).collect();
    if loaded.len() != encoder.len() {
        return Err(ModelError::Format(format!("encoder file has {} tensors, model encoder has {}", loaded.len(), encoder.len())));
    }
    for ((name, tensor), idx) in loaded.into_iter().zip(encoder) {
        check_tensor(&name, &tensor, &params.names[idx], params.tensors[idx].shape())?;
        params.tensors[idx] = tensor;
    }
    Ok(())
}

fn check_tensor(name: &str, tensor: &Tensor<f32>, expected_name: &str, expected_shape: &[usize]) -> Result<()> {
    if name != expected_name || tensor.shape() != expected_shape {
        return Err(ModelError::ShapeMismatch {
            name: expected_name.to_string(),
            found: tensor.shape().to_vec(),
            expected: expected_shape.to_vec(),
        });
    }
    Ok(())
}

fn check_input<T: Scalar>(batch: &Tensor<T>) -> Result<()> {
    let (_, c, h, w) = batch.dims4().map_err(|_| ModelError::InputShape(batch.shape().to_vec()))?;
    if c != 3 {
        return Err(ModelError::InputShape(batch.shape().to_vec()));
    }
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(ModelError::Indivisible(h, w));
    }
    Ok(())
}

/// One recorded forward operation, replayed in reverse by [`backward`].
#[derive(Clone, Debug)]
enum Step<T> {
    Conv { layer: usize, input: Tensor<T>, output: Tensor<T> },
    Pool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Concat { first: usize, skip: usize },
    Skip(usize),
    GlobalAvgPool { input_shape: Vec<usize> },
}

/// Activations recorded by [`forward_train`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    steps: Vec<Step<T>>,
    skips: usize,
}

impl<T: Scalar> Tape<T> {
    /// Which piece of the piecewise-linear network this pass ran in: the
    /// on/off state of every ReLU unit and the winner of every pooling
    /// window. Passes with equal regions differ only by smooth changes.
    pub fn linear_region(&self, params: &ModelParams<T>) -> Vec<usize> {
        let mut region = Vec::new();
        for step in &self.steps {
            match step {
                Step::Conv { layer, output, .. } if params.arch.layers[*layer].relu => {
                    region.extend(output.data().iter().map(|&v| usize::from(v > T::zero())));
                }
                Step::Pool { argmax, .. } => region.extend_from_slice(argmax),
                _ => {}
            }
        }
        region
    }
}

struct Runner<'a, T> {
    params: &'a ModelParams<T>,
    steps: Option<Vec<Step<T>>>,
}

impl<T: Scalar> Runner<'_, T> {
    fn conv(&mut self, layer: usize, x: Tensor<T>) -> Result<Tensor<T>> {
        let l = &self.params.arch.layers[layer];
        let (w, b) = (self.params.weight(layer), self.params.bias(layer));
        let pre = if l.transposed { transposed_conv2d(&x, w, b, &l.spec)? } else { conv2d(&x, w, b, &l.spec)? };
        let out = if l.relu { relu(&pre) } else { pre };
        if let Some(steps) = &mut self.steps {
            steps.push(Step::Conv { layer, input: x, output: out.clone() });
        }
        Ok(out)
    }

    fn pool(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let pooled = maxpool2d(&x)?;
        if let Some(steps) = &mut self.steps {
            steps.push(Step::Pool { argmax: pooled.argmax, input_shape: pooled.input_shape });
        }
        Ok(pooled.output)
    }

    fn concat(&mut self, h: Tensor<T>, skip: usize, skip_t: &Tensor<T>) -> Result<Tensor<T>> {
        let first = h.dims4()?.1;
        let out = concat_channels(&h, skip_t)?;
        if let Some(steps) = &mut self.steps {
            steps.push(Step::Concat { first, skip });
        }
        Ok(out)
    }

    fn mark_skip(&mut self, s: usize) {
        if let Some(steps) = &mut self.steps {
            steps.push(Step::Skip(s));
        }
    }

    /// Encoder stages; returns the stage outputs (skip connections).
    fn encoder(&mut self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let arch = &self.params.arch;
        let mut skips = Vec::with_capacity(arch.stages.len());
        let mut h = x.clone();
        for (s, stage) in arch.stages.iter().enumerate() {
            if s > 0 {
                h = self.pool(h)?;
            }
            for &layer in stage {
                h = self.conv(layer, h)?;
            }
            self.mark_skip(s);
            skips.push(h.clone());
        }
        Ok(skips)
    }

    fn network(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let arch = &self.params.arch;
        let skips = self.encoder(x)?;
        let mut h = self.pool(skips.last().expect("encoder has stages").clone())?;
        for (b, &(conv, up)) in arch.up_blocks.iter().enumerate() {
            if b > 0 {
                let s = skips.len() - b;
                h = self.concat(h, s, &skips[s])?;
            }
            h = self.conv(conv, h)?;
            h = self.conv(up, h)?;
        }
        h = self.concat(h, 0, &skips[0])?;
        h = self.conv(arch.dec1, h)?;
        self.conv(arch.head, h)
    }
}

/// Logits `[N, num_classes, H, W]` for a `[N, 3, H, W]` batch.
pub fn forward<T: Scalar>(params: &ModelParams<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    check_input(batch)?;
    Runner { params, steps: None }.network(batch)
}

/// As [`forward`], also recording what [`backward`] needs.
pub fn forward_train<T: Scalar>(params: &ModelParams<T>, batch: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
    check_input(batch)?;
    let mut runner = Runner { params, steps: Some(Vec::new()) };
    let logits = runner.network(batch)?;
    Ok((logits, Tape { steps: runner.steps.unwrap_or_default(), skips: params.arch.stages.len() }))
}

/// Parameter gradients in storage order, plus the input gradient if requested.
pub type Gradients<T> = (Vec<Tensor<T>>, Option<Tensor<T>>);

/// Gradients of the recorded computation with respect to every parameter
/// (storage order) and, when `input_grad` is set, the network input.
pub fn backward<T: Scalar>(params: &ModelParams<T>, tape: Tape<T>, grad_output: Tensor<T>, input_grad: bool) -> Result<Gradients<T>> {
    let mut grads = params.zeros_like();
    let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; tape.skips];
    let mut g = grad_output;
    let mut dx = None;
    for step in tape.steps.into_iter().rev() {
        match step {
            Step::Conv { layer, input, output } => {
                let l = &params.arch.layers[layer];
                if l.relu {
                    g = relu_backward(&output, &g)?;
                }
                let w = params.weight(layer);
                let first = layer == 0;
                let (cg, gin) = if l.transposed {
                    let cg = transposed_conv2d_backward(&input, w, &l.spec, &g)?;
                    let gin = cg.input.clone();
                    (cg, Some(gin))
                } else {
                    tensor::conv2d_backward_impl(&input, w, &l.spec, &g, !first || input_grad)?
                };
                grads[2 * layer].add_assign(&cg.weights)?;
                grads[2 * layer + 1].add_assign(&cg.bias)?;
                match gin {
                    Some(gin) if first => {
                        dx = Some(gin);
                        break;
                    }
                    Some(gin) => g = gin,
                    None => break,
                }
            }
            Step::Pool { argmax, input_shape } => g = maxpool2d_backward(&argmax, &input_shape, &g)?,
            Step::Concat { first, skip } => {
                let (gh, gs) = split_channels(&g, first)?;
                match &mut skip_grads[skip] {
                    Some(acc) => acc.add_assign(&gs)?,
                    slot => *slot = Some(gs),
                }
                g = gh;
            }
            Step::Skip(s) => {
                if let Some(sg) = skip_grads[s].take() {
                    g.add_assign(&sg)?;
                }
            }
            Step::GlobalAvgPool { input_shape } => {
                let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
                let inv = T::one() / T::from_f64((h * w) as f64);
                let mut out = Tensor::zeros(&input_shape);
                for (plane, &gv) in out.data_mut().chunks_mut(h * w).zip(g.data()) {
                    plane.fill(gv * inv);
                }
                debug_assert_eq!(g.len(), n * c);
                g = out;
            }
        }
    }
    Ok((grads, dx))
}

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Writes named `f32` tensors in the versioned binary weight format:
/// magic `RRTENSOR`, `u32` version, `u32` count, then per tensor a `u32`
/// name length, the UTF-8 name, a `u32` rank, `u64` extents and the
/// little-endian `f32` payload.
pub fn write_tensor_file(path: &Path, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    write_u32(&mut buf, WEIGHT_VERSION);
    write_u32(&mut buf, tensors.len() as u32);
    for (name, t) in tensors {
        write_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        write_u32(&mut buf, t.shape().len() as u32);
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    f.write_all(&buf).map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelError::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(WEIGHT_MAGIC.len())? != WEIGHT_MAGIC {
        return Err(ModelError::Format("bad magic; not a weight file".into()));
    }
    let version = cur.u32()?;
    if version != WEIGHT_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| ModelError::Format("tensor name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = cur.take(n.checked_mul(4).ok_or_else(|| ModelError::Format("tensor too large".into()))?)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(ModelError::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save_weights(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let pairs: Vec<(&str, &Tensor<f32>)> = params.names.iter().map(String::as_str).zip(&params.tensors).collect();
    write_tensor_file(path, &pairs)
}

/// Loads a weight file, checking every tensor against `config` in order.
pub fn load_weights(path: &Path, config: &ModelConfig) -> Result<ModelParams<f32>> {
    let arch = Architecture::new(config)?;
    let layout = arch.tensor_layout();
    let loaded = read_tensor_file(path)?;
    for ((name, shape), (found_name, t)) in layout.iter().zip(&loaded) {
        check_tensor(found_name, t, name, shape)?;
    }
    if loaded.len() != layout.len() {
        return Err(ModelError::Format(format!("file has {} tensors, model has {}", loaded.len(), layout.len())));
    }
    let (names, tensors) = loaded.into_iter().unzip();
    Ok(ModelParams { config: ModelConfig { pretrained_encoder_path: None, ..config.clone() }, arch, names, tensors })
}

/// Writes only the encoder tensors of `params`.
pub fn save_encoder(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let pairs: Vec<(&str, &Tensor<f32>)> =
        params.arch.encoder_layers().flat_map(|l| [2 * l, 2 * l + 1]).map(|i| (params.names[i].as_str(), &params.tensors[i])).collect();
    write_tensor_file(path, &pairs)
}

/// An RGB patch (planar `3 x size x size`) with a class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Vec<u8>,
    pub size: usize,
    pub class: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub num_classes: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 10, batch_size: 16, num_classes: 8, adam: AdamConfig::default(), seed: 0 }
    }
}

/// Encoder plus global-average-pool classification head.
struct Classifier<'a> {
    params: &'a ModelParams<f32>,
    head_w: &'a Tensor<f32>,
    head_b: &'a Tensor<f32>,
    head_spec: ConvSpec,
}

impl Classifier<'_> {
    fn forward(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Tape<f32>)> {
        let mut runner = Runner { params: self.params, steps: Some(Vec::new()) };
        let skips = runner.encoder(x)?;
        let feat = runner.pool(skips.last().expect("encoder has stages").clone())?;
        let (n, c, h, w) = feat.dims4()?;
        let pooled: Vec<f32> = feat.data().chunks(h * w).map(|p| p.iter().sum::<f32>() / (h * w) as f32).collect();
        let pooled = Tensor::from_vec(&[n, c, 1, 1], pooled)?;
        let logits = conv2d(&pooled, self.head_w, self.head_b, &self.head_spec)?;
        let mut steps = runner.steps.unwrap_or_default();
        steps.push(Step::GlobalAvgPool { input_shape: feat.shape().to_vec() });
        Ok((logits, Tape { steps, skips: self.params.arch.stages.len() }))
    }
}

/// Trains the encoder with a temporary pooled classification head on
/// labeled patches and writes the encoder tensors to `out`. Returns the mean
/// training loss of each epoch.
pub fn pretrain_encoder(model: &ModelConfig, patches: &[Patch], config: &PretrainConfig, out: &Path) -> Result<Vec<f32>> {
    if patches.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if config.num_classes < 2 {
        return Err(ModelError::Config("pretraining needs at least 2 classes".into()));
    }
    let size = patches[0].size;
    if !size.is_multiple_of(32) || patches.iter().any(|p| p.size != size || p.pixels.len() != 3 * size * size) {
        return Err(ModelError::Config(format!("patches must all be 3x{size}x{size} with {size} divisible by 32")));
    }
    let init = ModelConfig { pretrained_encoder_path: None, ..model.clone() };
    let mut params = build_model(&init, config.seed)?;
    let encoder_idx: Vec<usize> = params.arch.encoder_layers().flat_map(|l| [2 * l, 2 * l + 1]).collect();
    let c_last = params.arch.layers[*params.arch.stages.last().and_then(|s| s.last()).expect("encoder")].spec.out_channels;
    let head_spec = ConvSpec::square(c_last, config.num_classes, 1, 1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_4ead);
    let std = (2.0 / c_last as f64).sqrt();
    let mut head = vec![
        Tensor::from_vec(
            &[config.num_classes, c_last, 1, 1],
            (0..config.num_classes * c_last)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                })
                .collect(),
        )?,
        Tensor::zeros(&[config.num_classes]),
    ];
    let shapes: Vec<&[usize]> = encoder_idx.iter().map(|&i| params.tensors[i].shape()).chain(head.iter().map(Tensor::shape)).collect();
    let mut state = OptimizerState::new(&shapes);
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = crate::tiler::seeded_permutation(patches.len(), config.seed.wrapping_add(epoch as u64 + 1));
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let items: Vec<Tensor<f32>> = chunk
                .iter()
                .map(|&i| Tensor::from_vec(&[1, 3, size, size], patches[i].pixels.iter().map(|&v| train::normalize_pixel(v)).collect()))
                .collect::<std::result::Result<_, _>>()?;
            let batch = Tensor::stack(&items)?;
            let targets: Vec<u8> = chunk.iter().map(|&i| patches[i].class).collect();
            let classifier = Classifier { params: &params, head_w: &head[0], head_b: &head[1], head_spec };
            let (logits, tape) = classifier.forward(&batch)?;
            let (loss, g_logits) = tensor::softmax_cross_entropy(&logits, &targets, &vec![true; targets.len()])?;
            let pooled_shape = [chunk.len(), c_last, 1, 1];
            // Head gradients, then the gradient flowing into the pooled features.
            let pooled_in = pooled_features(&params, &tape)?;
            debug_assert_eq!(pooled_in.shape(), pooled_shape);
            let hg = tensor::conv2d_backward(&pooled_in, &head[0], &head_spec, &g_logits)?;
            let (grads, _) = backward(&params, tape, hg.input, false)?;
            let mut trainable: Vec<Tensor<f32>> =
                encoder_idx.iter().map(|&i| params.tensors[i].clone()).chain(head.iter().cloned()).collect();
            let grad_list: Vec<Tensor<f32>> = encoder_idx.iter().map(|&i| grads[i].clone()).chain([hg.weights, hg.bias]).collect();
            let names: Vec<String> =
                encoder_idx.iter().map(|&i| params.names[i].clone()).chain(["head.weight".into(), "head.bias".into()]).collect();
            train::adam_step(&mut trainable, &grad_list, &names, &mut state, &config.adam)?;
            let mut it = trainable.into_iter();
            for &i in &encoder_idx {
                params.tensors[i] = it.next().expect("encoder tensor");
            }
            head = it.collect();
            total += loss as f64;
            batches += 1;
        }
        losses.push((total / batches as f64) as f32);
    }
    save_encoder(&params, out)?;
    Ok(losses)
}

/// Recomputes the pooled `[N, C, 1, 1]` features from a classifier tape.
fn pooled_features(params: &ModelParams<f32>, tape: &Tape<f32>) -> Result<Tensor<f32>> {
    // The last conv output before the final pool and average pool.
    let last_layer = *params.arch.stages.last().and_then(|s| s.last()).expect("encoder");
    let conv_out = tape
        .steps
        .iter()
        .rev()
        .find_map(|s| match s {
            Step::Conv { layer, output, .. } if *layer == last_layer => Some(output),
            _ => None,
        })
        .ok_or_else(|| ModelError::Config("classifier tape lacks encoder output".into()))?;
    let pooled = maxpool2d(conv_out)?.output;
    let (n, c, h, w) = pooled.dims4()?;
    let data = pooled.data().chunks(h * w).map(|p| p.iter().sum::<f32>() / (h * w) as f32).collect();
    Ok(Tensor::from_vec(&[n, c, 1, 1], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_conv_shapes() {
        let full = build_model(&ModelConfig::default(), 0).unwrap();
        assert_eq!(full.get("encoder.0.weight").unwrap().shape(), &[64, 3, 3, 3]);
        let eighth = build_model(&ModelConfig::scaled(0.125), 0).unwrap();
        assert_eq!(eighth.get("encoder.0.weight").unwrap().shape(), &[8, 3, 3, 3]);
        assert_eq!(eighth.get("final.weight").unwrap().shape(), &[8, 4, 1, 1]);
    }

    #[test]
    fn reference_decoder_widths() {
        let arch = Architecture::new(&ModelConfig::default()).unwrap();
        let spec = |name: &str| arch.layers.iter().find(|l| l.name == name).unwrap().spec;
        assert_eq!((spec("center.conv").in_channels, spec("center.up").out_channels), (512, 256));
        assert_eq!(spec("dec5.conv").in_channels, 768);
        assert_eq!((spec("dec4.conv").in_channels, spec("dec4.up").out_channels), (768, 128));
        assert_eq!((spec("dec3.conv").in_channels, spec("dec3.up").out_channels), (384, 64));
        assert_eq!((spec("dec2.conv").in_channels, spec("dec2.up").out_channels), (192, 32));
        assert_eq!((spec("dec1.conv").in_channels, spec("dec1.conv").out_channels), (96, 32));
        assert_eq!(arch.layers.len(), 8 + 10 + 2);
        let vgg16 = Architecture::new(&ModelConfig { encoder: EncoderKind::Vgg16, ..Default::default() }).unwrap();
        assert_eq!(vgg16.encoder_layers().count(), 13);
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::scaled(0.125);
        assert_eq!(build_model(&cfg, 11).unwrap(), build_model(&cfg, 11).unwrap());
        assert_ne!(build_model(&cfg, 11).unwrap(), build_model(&cfg, 12).unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(build_model(&ModelConfig::scaled(0.0), 0).is_err());
        assert!(build_model(&ModelConfig::scaled(1.5), 0).is_err());
        assert!(build_model(&ModelConfig { num_classes: 1, ..ModelConfig::scaled(0.125) }, 0).is_err());
    }

    #[test]
    fn forward_shapes() {
        let params = build_model(&ModelConfig::scaled(0.125), 3).unwrap();
        let x = Tensor::<f32>::full(&[2, 3, 64, 64], 0.1);
        assert_eq!(forward(&params, &x).unwrap().shape(), &[2, 8, 64, 64]);
        let bad = Tensor::<f32>::zeros(&[1, 3, 100, 100]);
        assert!(matches!(forward(&params, &bad), Err(ModelError::Indivisible(100, 100))));
    }

    #[test]
    fn truncated_weight_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let cfg = ModelConfig::scaled(0.0625);
        save_weights(&build_model(&cfg, 1).unwrap(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_weights(&path, &cfg).unwrap_err();
        assert!(err.to_string().contains("unexpected end of file"), "{err}");
        fs::write(&path, b"NOTAFILE").unwrap();
        assert!(load_weights(&path, &cfg).unwrap_err().to_string().contains("magic"));
    }
}
