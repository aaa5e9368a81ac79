//! 2x2 / stride-2 max pooling.

use super::{Result, Scalar, Tensor, TensorError};

/// Pooled output plus, for every output element, the flat input index that won.
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
    pub input_shape: Vec<usize>,
}

/// Max over each 2x2 window. Ties go to the first maximal element in
/// row-major window order.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<Pooled<T>> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddExtent(h, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Pooled { output: Tensor::from_vec(&[n, c, oh, ow], out)?, argmax, input_shape: input.shape().to_vec() })
}

/// Routes each output gradient to the input element that won its window.
pub fn maxpool2d_backward<T: Scalar>(argmax: &[usize], input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(TensorError::Shape(format!("pool grad_out has {} values for {} windows", grad_out.len(), argmax.len())));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        g[idx] += v;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_window_max() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let p = maxpool2d(&x).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
        assert_eq!(p.argmax, vec![3]);
    }

    #[test]
    fn ties_route_to_top_left() {
        let x = Tensor::<f64>::full(&[1, 2, 4, 4], 7.0);
        let p = maxpool2d(&x).unwrap();
        assert!(p.output.data().iter().all(|&v| v == 7.0));
        let g = maxpool2d_backward(&p.argmax, &p.input_shape, &Tensor::full(&[1, 2, 2, 2], 1.0)).unwrap();
        for plane in g.data().chunks(16) {
            for (i, &v) in plane.iter().enumerate() {
                let (r, c) = (i / 4, i % 4);
                let expect = if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(v, expect, "at ({r},{c})");
            }
        }
    }

    #[test]
    fn odd_extent_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]);
        assert_eq!(maxpool2d(&x).unwrap_err(), TensorError::OddExtent(3, 4));
    }
}
