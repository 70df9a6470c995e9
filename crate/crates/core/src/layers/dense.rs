use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

fn check(x: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let [n, d_in] = *x.shape() else {
        return Err(Error::shape(format!(
            "dense layer expects (N, d_in), got {:?}",
            x.shape()
        )));
    };
    let [w_in, d_out] = *weight.shape() else {
        return Err(Error::shape("dense weight must be (d_in, d_out)"));
    };
    if w_in != d_in {
        return Err(Error::shape(format!(
            "dense weight expects {w_in} inputs, got {d_in}"
        )));
    }
    Ok((n, d_in, d_out))
}

/// `y = x·W + b`.
pub fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d_in, d_out) = check(x, weight)?;
    if bias.shape() != [d_out] {
        return Err(Error::shape(format!(
            "dense bias {:?}, expected [{d_out}]",
            bias.shape()
        )));
    }
    let mut out = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm_nn(n, d_in, d_out, x.data(), weight.data(), &mut out);
    Tensor::new(vec![n, d_out], out)
}

/// Returns `(dx, dW, db)` with `dW = xᵀ·dY`, `dx = dY·Wᵀ`, `db = Σ_rows dY`.
pub fn dense_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d_in, d_out) = check(x, weight)?;
    if grad_out.shape() != [n, d_out] {
        return Err(Error::shape("dense gradient has the wrong shape"));
    }
    let mut dw = vec![0.0; d_in * d_out];
    gemm_tn(d_in, n, d_out, x.data(), grad_out.data(), &mut dw);
    let mut dx = vec![0.0; n * d_in];
    gemm_nt(n, d_out, d_in, grad_out.data(), weight.data(), &mut dx);
    let mut db = vec![0.0; d_out];
    for row in grad_out.data().chunks_exact(d_out) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((
        Tensor::new(vec![n, d_in], dx)?,
        Tensor::new(vec![d_in, d_out], dw)?,
        Tensor::new(vec![d_out], db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dense_forward(&x, &eye, &Tensor::zeros(vec![2])).unwrap(), x);
    }

    #[test]
    fn small_case() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[4.0]);
        assert!(dense_forward(&x, &Tensor::zeros(vec![3, 1]), &b).is_err());
    }
}
