//! Elementwise and channel-wise kernels: ReLU, concatenation, softmax and
//! the fused softmax / cross-entropy loss.

use super::{Result, Scalar, Tensor, TensorError};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`]. `activation` may be either the ReLU input or its
/// output: both are positive at exactly the same positions. The derivative
/// at zero is taken as zero.
pub fn relu_backward<T: Scalar>(activation: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if activation.shape() != grad_out.shape() {
        return Err(TensorError::Shape(format!("relu grad {:?} vs activation {:?}", grad_out.shape(), activation.shape())));
    }
    let data = activation.data().iter().zip(grad_out.data()).map(|(&a, &g)| if a > T::zero() { g } else { T::zero() }).collect();
    Tensor::from_vec(activation.shape(), data)
}

/// Concatenates `[N,Ca,H,W]` and `[N,Cb,H,W]` into `[N,Ca+Cb,H,W]`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(TensorError::Shape(format!("concat of {:?} and {:?}", a.shape(), b.shape())));
    }
    let plane = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        data.extend_from_slice(&a.data()[n * ca * plane..(n + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[n * cb * plane..(n + 1) * cb * plane]);
    }
    Tensor::from_vec(&[na, ca + cb, ha, wa], data)
}

/// Inverse of [`concat_channels`]: the first `first` channels and the rest.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = t.dims4()?;
    if first > c {
        return Err(TensorError::Shape(format!("cannot split {first} channels from {c}")));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * (c - first) * plane);
    for img in t.data().chunks(c * plane) {
        a.extend_from_slice(&img[..first * plane]);
        b.extend_from_slice(&img[first * plane..]);
    }
    Ok((Tensor::from_vec(&[n, first, h, w], a)?, Tensor::from_vec(&[n, c - first, h, w], b)?))
}

/// Softmax over the channel axis of `[N,C,H,W]`, max-subtracted.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let mut out = Tensor::zeros(logits.shape());
    let x = logits.data();
    let y = out.data_mut();
    for img in 0..n {
        let base = img * c * plane;
        for p in 0..plane {
            let at = |k: usize| base + k * plane + p;
            let max = (0..c).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..c {
                let e = (x[at(k)] - max).exp();
                y[at(k)] = e;
                total += e;
            }
            for k in 0..c {
                y[at(k)] = y[at(k)] / total;
            }
        }
    }
    Ok(out)
}

/// Mean categorical cross-entropy over valid pixels and its gradient with
/// respect to the logits.
///
/// `targets` and `valid` are per pixel in `[N,H,W]` order. The gradient is
/// `(softmax - onehot) / count` on valid pixels and zero elsewhere.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[u8], valid: &[bool]) -> Result<(T, Tensor<T>)> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    if targets.len() != n * plane || valid.len() != n * plane {
        return Err(TensorError::Shape(format!(
            "loss targets/valid have {}/{} pixels, logits have {}",
            targets.len(),
            valid.len(),
            n * plane
        )));
    }
    if let Some(&bad) = targets.iter().zip(valid).filter(|(_, &v)| v).map(|(t, _)| t).find(|&&t| t as usize >= c) {
        return Err(TensorError::Shape(format!("target class {bad} out of range for {c} channels")));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(TensorError::NoValidPixels);
    }
    let inv = T::one() / T::from_f64(count as f64);
    let mut grad = softmax_channels(logits)?;
    let x = logits.data();
    let g = grad.data_mut();
    let mut loss = T::zero();
    for img in 0..n {
        let base = img * c * plane;
        for p in 0..plane {
            let pix = img * plane + p;
            let at = |k: usize| base + k * plane + p;
            if !valid[pix] {
                for k in 0..c {
                    g[at(k)] = T::zero();
                }
                continue;
            }
            let t = targets[pix] as usize;
            let max = (0..c).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let log_sum = (0..c).map(|k| (x[at(k)] - max).exp()).sum::<T>().ln() + max;
            loss += log_sum - x[at(t)];
            g[at(t)] = g[at(t)] - T::one();
            for k in 0..c {
                g[at(k)] = g[at(k)] * inv;
            }
        }
    }
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives_and_zero_gradient_at_zero() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative() {
        let x = Tensor::<f32>::from_vec(&[4], vec![-3.0, -0.5, -1e-6, -9.0]).unwrap();
        assert!(relu(&x).data().iter().all(|&v| v == 0.0));
        assert!(relu_backward(&x, &Tensor::full(&[4], 5.0)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_orders_channels_and_accepts_empty() {
        let a = Tensor::<f32>::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), &[1, 2, 1, 1]);
        assert_eq!(ab.data(), &[1.0, 2.0]);
        let empty = Tensor::<f32>::zeros(&[1, 0, 1, 1]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
    }

    #[test]
    fn concat_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let b = Tensor::<f32>::zeros(&[1, 1, 2, 3]);
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn uniform_logits_give_ln8() {
        let logits = Tensor::<f64>::full(&[2, 8, 3, 3], 0.7);
        let targets: Vec<u8> = (0..18).map(|i| (i % 8) as u8).collect();
        let (loss, _) = softmax_cross_entropy(&logits, &targets, &[true; 18]).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
        assert!((loss - 2.079442).abs() < 1e-6);
    }

    #[test]
    fn confident_true_class_has_vanishing_loss() {
        let mut logits = Tensor::<f64>::zeros(&[1, 8, 2, 2]);
        let targets = [3u8, 0, 7, 5];
        for (p, &t) in targets.iter().enumerate() {
            logits.data_mut()[t as usize * 4 + p] = 50.0;
        }
        let (loss, _) = softmax_cross_entropy(&logits, &targets, &[true; 4]).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn invalid_pixels_are_ignored() {
        let logits = Tensor::<f64>::from_vec(&[1, 2, 1, 2], vec![0.0, 9.0, 0.0, -9.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 0], &[true, false]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(grad.data()[1], 0.0);
        assert_eq!(grad.data()[3], 0.0);
        assert_eq!(softmax_cross_entropy(&logits, &[0, 0], &[false, false]).unwrap_err(), TensorError::NoValidPixels);
    }

    #[test]
    fn softmax_sums_to_one() {
        let logits = Tensor::<f32>::from_vec(&[1, 8, 1, 2], (0..16).map(|i| i as f32 * 3.1 - 20.0).collect()).unwrap();
        let p = softmax_channels(&logits).unwrap();
        for px in 0..2 {
            let s: f32 = (0..8).map(|k| p.data()[k * 2 + px]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
