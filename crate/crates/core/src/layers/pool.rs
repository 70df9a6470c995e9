use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max pooling over NCHW input. Returns the pooled tensor and, per output
/// cell, the flat input index that won (first in row-major scan on ties).
pub fn maxpool2d_forward(
    x: &Tensor,
    window: [usize; 2],
    stride: [usize; 2],
) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = *x.shape() else {
        return Err(Error::shape(format!(
            "max pool expects NCHW input, got {:?}",
            x.shape()
        )));
    };
    let [wh, ww] = window;
    let [sh, sw] = stride;
    if wh == 0 || ww == 0 || sh == 0 || sw == 0 {
        return Err(Error::invalid("pool window and stride must be positive"));
    }
    if wh > h || ww > w {
        return Err(Error::shape(format!(
            "pool window {wh}x{ww} exceeds input {h}x{w}"
        )));
    }
    let oh = (h - wh) / sh + 1;
    let ow = (w - ww) / sw + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * sh * w + ox * sw;
                let mut best_v = data[best];
                for m in 0..wh {
                    for k in 0..ww {
                        let i = base + (oy * sh + m) * w + ox * sw + k;
                        if data[i] > best_v {
                            best_v = data[i];
                            best = i;
                        }
                    }
                }
                out.push(best_v);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

/// Routes each upstream gradient to the winning input cell.
pub fn maxpool2d_backward(grad_out: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape("max pool gradient does not match the cached argmax"));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// Mean over the spatial axes: `(N, C, H, W)` → `(N, C)`.
pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *x.shape() else {
        return Err(Error::shape(format!(
            "global average pool expects NCHW input, got {:?}",
            x.shape()
        )));
    };
    let area = h * w;
    if area == 0 {
        return Err(Error::shape("global average pool over an empty spatial extent"));
    }
    let out = x
        .data()
        .chunks_exact(area)
        .map(|p| p.iter().sum::<f64>() / area as f64)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::shape("global average pool input must be NCHW"));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::shape("global average pool gradient has the wrong shape"));
    }
    let area = (h * w) as f64;
    let mut dx = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat_n(g / area, h * w));
    }
    Tensor::new(input_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_window_max() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d_forward(&x, [2, 2], [2, 2]).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn constant_input_routes_to_first_cell() {
        let x = Tensor::full(vec![1, 1, 4, 4], 3.0);
        let (y, arg) = maxpool2d_forward(&x, [2, 2], [2, 2]).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        let g = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let dx = maxpool2d_backward(&g, &arg, x.shape()).unwrap();
        let expect = [
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(dx.data(), &expect);
    }

    #[test]
    fn window_too_large() {
        let x = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(maxpool2d_forward(&x, [3, 3], [1, 1]).is_err());
    }

    #[test]
    fn gap_cases() {
        let x = Tensor::full(vec![1, 1, 3, 3], 7.0);
        assert_eq!(global_avg_pool_forward(&x).unwrap().data(), &[7.0]);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool_forward(&x).unwrap().data(), &[4.0]);
        let dx = global_avg_pool_backward(&Tensor::full(vec![1, 1], 1.0), x.shape()).unwrap();
        assert_eq!(dx.data(), &[0.25; 4]);
        assert!(global_avg_pool_forward(&Tensor::zeros(vec![1, 1, 0, 2])).is_err());
    }
}
