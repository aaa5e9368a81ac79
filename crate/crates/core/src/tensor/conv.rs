//! 2-D convolution (cross-correlation) and its transpose, via chunked im2col + GEMM.

use std::ops::Range;

use rayon::prelude::*;

use super::{gemm, Result, Scalar, Tensor, TensorError, View};

/// Upper bound on the number of elements in one im2col buffer.
const COLS_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    /// Square kernel, stride and padding.
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { in_channels, out_channels, kernel: (kernel, kernel), stride: (stride, stride), padding: (padding, padding) }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [self.in_channels, self.out_channels, self.kernel.0, self.kernel.1, self.stride.0, self.stride.1];
        if extents.contains(&0) {
            return Err(TensorError::Spec(format!("{self:?}: extents must be >= 1")));
        }
        Ok(())
    }

    /// Output extent of the forward convolution.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |len: usize, k: usize, s: usize, p: usize, name: &str| -> Result<usize> {
            let padded = len + 2 * p;
            if padded < k || !(padded - k).is_multiple_of(s) {
                return Err(TensorError::NonIntegralExtent(format!("{name}: ({len} + 2*{p} - {k}) / {s} is not a non-negative integer")));
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.padding.0, "height")?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1, "width")?,
        ))
    }

    /// Output extent of the transposed convolution: `(H - 1) * s - 2p + k`.
    pub fn transposed_output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |len: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            let full = (len - 1) * s + k;
            if full <= 2 * p {
                return Err(TensorError::Shape(format!("transposed conv output ({len}-1)*{s}+{k}-2*{p} is not positive")));
            }
            Ok(full - 2 * p)
        };
        Ok((axis(h, self.kernel.0, self.stride.0, self.padding.0)?, axis(w, self.kernel.1, self.stride.1, self.padding.1)?))
    }
}

/// Gradients of a convolution with respect to its three inputs.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Correlation geometry between a "big" image (`h x w`) and the "small"
/// grid of kernel placements (`oh x ow`).
#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Geometry {
    fn new(c: usize, (h, w): (usize, usize), (oh, ow): (usize, usize), spec: &ConvSpec) -> Self {
        Geometry {
            c,
            h,
            w,
            oh,
            ow,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
        }
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn chunks(&self) -> Vec<Range<usize>> {
        let per_row = (self.col_rows() * self.ow).max(1);
        let step = (COLS_BUDGET / per_row).max(1);
        (0..self.oh).step_by(step).map(|s| s..(s + step).min(self.oh)).collect()
    }

    /// Range of `ox` whose source column `ox*sw + kx - pw` lies inside `0..w`.
    fn valid_ox(&self, kx: usize) -> Range<usize> {
        let lo = if kx >= self.pw { 0 } else { (self.pw - kx).div_ceil(self.sw) };
        let hi = if self.w + self.pw > kx { (self.w + self.pw - kx).div_ceil(self.sw) } else { 0 };
        lo.min(self.ow)..hi.min(self.ow).max(lo.min(self.ow))
    }

    fn source_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

fn im2col<T: Scalar>(src: &[T], g: &Geometry, rows: Range<usize>, cols: &mut [T]) {
    let p = rows.len() * g.ow;
    for ci in 0..g.c {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[r * p..(r + 1) * p];
                let oxs = g.valid_ox(kx);
                for (li, oy) in rows.clone().enumerate() {
                    let drow = &mut dst[li * g.ow..(li + 1) * g.ow];
                    let Some(iy) = g.source_row(oy, ky) else {
                        drow.fill(T::zero());
                        continue;
                    };
                    let srow = &plane[iy * g.w..(iy + 1) * g.w];
                    drow[..oxs.start].fill(T::zero());
                    drow[oxs.end..].fill(T::zero());
                    if oxs.is_empty() {
                        continue;
                    }
                    let ix0 = oxs.start * g.sw + kx - g.pw;
                    if g.sw == 1 {
                        drow[oxs.clone()].copy_from_slice(&srow[ix0..ix0 + oxs.len()]);
                    } else {
                        for (j, ox) in oxs.clone().enumerate() {
                            drow[ox] = srow[ix0 + j * g.sw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &Geometry, rows: Range<usize>, dst: &mut [T]) {
    let p = rows.len() * g.ow;
    for ci in 0..g.c {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[r * p..(r + 1) * p];
                let oxs = g.valid_ox(kx);
                if oxs.is_empty() {
                    continue;
                }
                for (li, oy) in rows.clone().enumerate() {
                    let Some(iy) = g.source_row(oy, ky) else { continue };
                    let srow = &src[li * g.ow..(li + 1) * g.ow];
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let ix0 = oxs.start * g.sw + kx - g.pw;
                    for (j, ox) in oxs.clone().enumerate() {
                        drow[ix0 + j * g.sw] += srow[ox];
                    }
                }
            }
        }
    }
}

fn check_vector(t: &Tensor<impl Scalar>, len: usize, what: &str) -> Result<()> {
    if t.shape() != [len] {
        return Err(TensorError::Shape(format!("{what}: expected [{len}], got {:?}", t.shape())));
    }
    Ok(())
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chan, b) in out.chunks_mut(plane).zip(bias) {
        for v in chan {
            *v += *b;
        }
    }
}

fn channel_sums<T: Scalar>(grad: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); channels];
    for img in grad.chunks(channels * plane) {
        for (s, chan) in sums.iter_mut().zip(img.chunks(plane)) {
            *s += chan.iter().copied().sum();
        }
    }
    sums
}

/// Sums per-image partial tensors in image order, so the result does not
/// depend on how the images were scheduled.
fn ordered_sum<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
    acc
}

fn check_conv(input: &Tensor<impl Scalar>, weights: &Tensor<impl Scalar>, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    let (_, c, _, _) = input.dims4()?;
    let expected = [spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1];
    if weights.shape() != expected {
        return Err(TensorError::Shape(format!("conv weights {:?} do not match spec {:?}", weights.shape(), expected)));
    }
    if c != spec.in_channels {
        return Err(TensorError::Shape(format!("conv input has {c} channels, spec expects {}", spec.in_channels)));
    }
    Ok(())
}

/// Cross-correlation of `input [N,C,H,W]` with `weights [K,C,kh,kw]` plus `bias [K]`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    check_conv(input, weights, spec)?;
    check_vector(bias, spec.out_channels, "conv bias")?;
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = spec.output_extent(h, w)?;
    let k = spec.out_channels;
    let g = Geometry::new(c, (h, w), (oh, ow), spec);
    let ckk = g.col_rows();
    let chunks = g.chunks();
    let images: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &input.data()[i * c * h * w..(i + 1) * c * h * w];
            let mut out = vec![T::zero(); k * oh * ow];
            let mut cols = Vec::new();
            for rows in &chunks {
                let p = rows.len() * ow;
                cols.resize(ckk * p, T::zero());
                im2col(x, &g, rows.clone(), &mut cols);
                gemm(
                    k,
                    ckk,
                    p,
                    weights.data(),
                    View::row_major(0, ckk),
                    &cols,
                    View::row_major(0, p),
                    T::zero(),
                    &mut out,
                    View { offset: rows.start * ow, rs: oh * ow, cs: 1 },
                );
            }
            add_bias(&mut out, bias.data(), oh * ow);
            out
        })
        .collect();
    Tensor::from_vec(&[n, k, oh, ow], images.concat())
}

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, spec: &ConvSpec, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let (grads, input_grad) = conv2d_backward_impl(input, weights, spec, grad_out, true)?;
    Ok(ConvGrads { input: input_grad.expect("requested"), ..grads })
}

/// As [`conv2d_backward`]; `input_grad = false` skips the input gradient
/// (used for the first layer of a network) and returns an empty tensor there.
pub(crate) fn conv2d_backward_impl<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    input_grad: bool,
) -> Result<(ConvGrads<T>, Option<Tensor<T>>)> {
    check_conv(input, weights, spec)?;
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = spec.output_extent(h, w)?;
    let k = spec.out_channels;
    if grad_out.shape() != [n, k, oh, ow] {
        return Err(TensorError::Shape(format!("conv grad_out {:?}, expected {:?}", grad_out.shape(), [n, k, oh, ow])));
    }
    let g = Geometry::new(c, (h, w), (oh, ow), spec);
    let ckk = g.col_rows();
    let chunks = g.chunks();
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &input.data()[i * c * h * w..(i + 1) * c * h * w];
            let go = &grad_out.data()[i * k * oh * ow..(i + 1) * k * oh * ow];
            let mut dw = vec![T::zero(); k * ckk];
            let mut dx = if input_grad { vec![T::zero(); c * h * w] } else { Vec::new() };
            let mut cols = Vec::new();
            let mut dcols = Vec::new();
            for rows in &chunks {
                let p = rows.len() * ow;
                let gv = View { offset: rows.start * ow, rs: oh * ow, cs: 1 };
                cols.resize(ckk * p, T::zero());
                im2col(x, &g, rows.clone(), &mut cols);
                gemm(k, p, ckk, go, gv, &cols, View::transposed(0, p), T::one(), &mut dw, View::row_major(0, ckk));
                if input_grad {
                    dcols.resize(ckk * p, T::zero());
                    gemm(ckk, k, p, weights.data(), View::transposed(0, ckk), go, gv, T::zero(), &mut dcols, View::row_major(0, p));
                    col2im_add(&dcols, &g, rows.clone(), &mut dx);
                }
            }
            (dw, dx)
        })
        .collect();
    let (dws, dxs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let dw = ordered_sum(dws, k * ckk);
    let grads = ConvGrads {
        input: Tensor::zeros(&[0]),
        weights: Tensor::from_vec(weights.shape(), dw)?,
        bias: Tensor::from_vec(&[k], channel_sums(grad_out.data(), k, oh * ow))?,
    };
    let dx = if input_grad { Some(Tensor::from_vec(&[n, c, h, w], dxs.concat())?) } else { None };
    Ok((grads, dx))
}

fn check_transposed(input: &Tensor<impl Scalar>, weights: &Tensor<impl Scalar>, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    let (_, c, _, _) = input.dims4()?;
    let expected = [spec.in_channels, spec.out_channels, spec.kernel.0, spec.kernel.1];
    if weights.shape() != expected {
        return Err(TensorError::Shape(format!("transposed conv weights {:?} do not match spec {:?}", weights.shape(), expected)));
    }
    if c != spec.in_channels {
        return Err(TensorError::Shape(format!("transposed conv input has {c} channels, spec expects {}", spec.in_channels)));
    }
    Ok(())
}

/// Transposed convolution of `input [N,C,H,W]` with `weights [C,K,kh,kw]`:
/// the adjoint of [`conv2d`] with the same spec, plus `bias [K]`.
pub fn transposed_conv2d<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    check_transposed(input, weights, spec)?;
    check_vector(bias, spec.out_channels, "transposed conv bias")?;
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = spec.transposed_output_extent(h, w)?;
    let k = spec.out_channels;
    // The correlation runs from the large output grid down to the input grid.
    let g = Geometry::new(k, (oh, ow), (h, w), spec);
    let kkk = g.col_rows();
    let chunks = g.chunks();
    let images: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &input.data()[i * c * h * w..(i + 1) * c * h * w];
            let mut out = vec![T::zero(); k * oh * ow];
            let mut cols = Vec::new();
            for rows in &chunks {
                let p = rows.len() * w;
                cols.resize(kkk * p, T::zero());
                gemm(
                    kkk,
                    c,
                    p,
                    weights.data(),
                    View::transposed(0, kkk),
                    x,
                    View { offset: rows.start * w, rs: h * w, cs: 1 },
                    T::zero(),
                    &mut cols,
                    View::row_major(0, p),
                );
                col2im_add(&cols, &g, rows.clone(), &mut out);
            }
            add_bias(&mut out, bias.data(), oh * ow);
            out
        })
        .collect();
    Tensor::from_vec(&[n, k, oh, ow], images.concat())
}

/// Gradients of [`transposed_conv2d`] given the upstream gradient `grad_out`.
pub fn transposed_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    check_transposed(input, weights, spec)?;
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = spec.transposed_output_extent(h, w)?;
    let k = spec.out_channels;
    if grad_out.shape() != [n, k, oh, ow] {
        return Err(TensorError::Shape(format!("transposed conv grad_out {:?}, expected {:?}", grad_out.shape(), [n, k, oh, ow])));
    }
    let g = Geometry::new(k, (oh, ow), (h, w), spec);
    let kkk = g.col_rows();
    let chunks = g.chunks();
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &input.data()[i * c * h * w..(i + 1) * c * h * w];
            let go = &grad_out.data()[i * k * oh * ow..(i + 1) * k * oh * ow];
            let mut dw = vec![T::zero(); c * kkk];
            let mut dx = vec![T::zero(); c * h * w];
            let mut cols = Vec::new();
            for rows in &chunks {
                let p = rows.len() * w;
                let xv = View { offset: rows.start * w, rs: h * w, cs: 1 };
                cols.resize(kkk * p, T::zero());
                im2col(go, &g, rows.clone(), &mut cols);
                gemm(c, kkk, p, weights.data(), View::row_major(0, kkk), &cols, View::row_major(0, p), T::zero(), &mut dx, xv);
                gemm(c, p, kkk, x, xv, &cols, View::transposed(0, p), T::one(), &mut dw, View::row_major(0, kkk));
            }
            (dw, dx)
        })
        .collect();
    let (dws, dxs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok(ConvGrads {
        input: Tensor::from_vec(&[n, c, h, w], dxs.concat())?,
        weights: Tensor::from_vec(weights.shape(), ordered_sum(dws, c * kkk))?,
        bias: Tensor::from_vec(&[k], channel_sums(grad_out.data(), k, oh * ow))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop correlation, independent of im2col.
    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>, s: &ConvSpec) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let (oh, ow) = s.output_extent(h, w).unwrap();
        let k = s.out_channels;
        let (kh, kw) = s.kernel;
        let mut out = Tensor::zeros(&[n, k, oh, ow]);
        for ni in 0..n {
            for ko in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[ko];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * s.stride.0 + ky) as isize - s.padding.0 as isize;
                                    let ix = (ox * s.stride.1 + kx) as isize - s.padding.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((ko * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out.data_mut()[((ni * k + ko) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect()).unwrap()
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let wt = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::<f32>::zeros(&[1]);
        let y = conv2d(&x, &wt, &b, &ConvSpec::square(1, 1, 3, 1, 1)).unwrap();
        assert_eq!(y.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let x = ramp(&[2, 3, 5, 4], 0.3);
        let spec = ConvSpec::square(3, 2, 3, 1, 1);
        let y = conv2d(&x, &Tensor::zeros(&[2, 3, 3, 3]), &Tensor::zeros(&[2]), &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_for_strides_and_padding() {
        for (kernel, stride, pad, h, w) in [(3, 1, 1, 6, 5), (3, 2, 1, 7, 9), (2, 2, 0, 6, 4), (1, 1, 0, 3, 3), (4, 2, 1, 8, 6)] {
            let spec = ConvSpec::square(2, 3, kernel, stride, pad);
            let x = ramp(&[2, 2, h, w], 0.1);
            let wt = ramp(&[3, 2, kernel, kernel], 0.05);
            let b = ramp(&[3], 1.0);
            let fast = conv2d(&x, &wt, &b, &spec).unwrap();
            let slow = naive_conv(&x, &wt, &b, &spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn rejects_mismatches() {
        let spec = ConvSpec::square(3, 2, 3, 1, 1);
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        assert!(matches!(conv2d(&x, &Tensor::zeros(&[2, 3, 3, 3]), &Tensor::zeros(&[2]), &spec), Err(TensorError::Shape(_))));
        let spec = ConvSpec::square(1, 1, 2, 2, 0);
        let x = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        assert!(matches!(conv2d(&x, &Tensor::zeros(&[1, 1, 2, 2]), &Tensor::zeros(&[1]), &spec), Err(TensorError::NonIntegralExtent(_))));
    }

    #[test]
    fn transposed_single_stamp_is_cropped_centre() {
        let spec = ConvSpec::square(1, 1, 4, 2, 1);
        let x = Tensor::<f64>::full(&[1, 1, 1, 1], 2.5);
        let y = transposed_conv2d(&x, &Tensor::full(&[1, 1, 4, 4], 1.0), &Tensor::zeros(&[1]), &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[2.5; 4]);
    }

    #[test]
    fn transposed_zero_input_gives_zero() {
        let spec = ConvSpec::square(3, 2, 4, 2, 1);
        let y = transposed_conv2d(&Tensor::<f64>::zeros(&[1, 3, 4, 4]), &ramp(&[3, 2, 4, 4], 0.2), &Tensor::zeros(&[2]), &spec).unwrap();
        assert_eq!(y.shape(), &[1, 2, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposed_forward_equals_conv_input_gradient() {
        let spec = ConvSpec::square(2, 3, 4, 2, 1);
        let x = ramp(&[1, 2, 8, 6], 0.1);
        let wt = ramp(&[3, 2, 4, 4], 0.07);
        let go = ramp(&[1, 3, 4, 3], 0.3);
        let grads = conv2d_backward(&x, &wt, &spec, &go).unwrap();
        let tspec = ConvSpec { in_channels: 3, out_channels: 2, ..spec };
        let y = transposed_conv2d(&go, &wt, &Tensor::zeros(&[2]), &tspec).unwrap();
        assert_eq!(y.shape(), grads.input.shape());
        for (a, b) in y.data().iter().zip(grads.input.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn chunked_im2col_matches_single_chunk() {
        // 3 * 9 * 1024 columns per row forces several chunks.
        let spec = ConvSpec::square(3, 2, 3, 1, 1);
        let x = ramp(&[1, 3, 96, 1024], 0.01);
        let wt = ramp(&[2, 3, 3, 3], 0.1);
        let b = Tensor::zeros(&[2]);
        let g = Geometry::new(3, (96, 1024), (96, 1024), &spec);
        assert!(g.chunks().len() > 1);
        let fast = conv2d(&x, &wt, &b, &spec).unwrap();
        let slow = naive_conv(&x, &wt, &b, &spec);
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}
