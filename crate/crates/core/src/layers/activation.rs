use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking the log in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// The gate is 1 strictly above zero; zero itself gates to 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape("relu gradient has the wrong shape"));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn rows(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, k] if k >= 1 => Ok((n, k)),
        ref s => Err(Error::shape(format!("softmax expects (N, K>=1), got {s:?}"))),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_forward(x: &Tensor) -> Result<Tensor> {
    let (_, k) = rows(x)?;
    if !x.is_finite() {
        return Err(Error::NonFiniteValues("softmax logits"));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let total: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Vector-Jacobian product of softmax: `dx = y ⊙ (g − Σ g·y)` per row.
pub fn softmax_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (_, k) = rows(y)?;
    if y.shape() != grad_out.shape() {
        return Err(Error::shape("softmax gradient has the wrong shape"));
    }
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks_exact(k).zip(grad_out.data().chunks_exact(k)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(a, b)| a * (b - dot)));
    }
    Tensor::new(y.shape().to_vec(), dx)
}

/// Mean categorical cross-entropy of `probs` against class indices, plus the
/// fused softmax+CE gradient with respect to the logits, `(p − onehot)/N`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = rows(probs)?;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} probability rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!(
            "target class {bad} out of range for {k} classes"
        )));
    }
    let mut loss = 0.0;
    let mut grad = probs.data().to_vec();
    for (i, &label) in labels.iter().enumerate() {
        loss -= probs.data()[i * k + label].max(PROB_FLOOR).ln();
        grad[i * k + label] -= 1.0;
    }
    let scale = 1.0 / n.max(1) as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, Tensor::new(probs.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_cases() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(vec![3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let neg = Tensor::full(vec![4], -3.0);
        assert!(relu_forward(&neg).data().iter().all(|&v| v == 0.0));
        let g = relu_backward(&neg, &Tensor::full(vec![4], 5.0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_cases() {
        let y = softmax_forward(&Tensor::zeros(vec![1, 3])).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_forward(&Tensor::new(vec![1, 2], vec![0.0, 2f64.ln()]).unwrap()).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);

        let base = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 3.0, 0.0]).unwrap();
        let shifted = base.map(|v| v + 1000.0);
        assert_eq!(
            softmax_forward(&base).unwrap(),
            softmax_forward(&shifted).unwrap()
        );
        let bad = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(softmax_forward(&bad).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let perfect = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&perfect, &[1]).unwrap();
        assert_eq!(loss, 0.0);
        let uniform = Tensor::full(vec![2, 4], 0.25);
        let (loss, grad) = cross_entropy(&uniform, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((grad.data()[0] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!(cross_entropy(&uniform, &[0, 4]).is_err());
    }
}
