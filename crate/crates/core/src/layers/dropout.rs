use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, otherwise
/// `1/(1−p)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_rate(p)?;
    if p == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect())
}

pub fn apply_mask(x: &Tensor, mask: &[f64]) -> Result<Tensor> {
    if mask.len() != x.len() {
        return Err(Error::shape("dropout mask length differs from the input"));
    }
    let data = x.data().iter().zip(mask).map(|(v, m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let m = dropout_mask(3, 0.0, &mut rng).unwrap();
        assert_eq!(apply_mask(&x, &m).unwrap(), x);
    }

    #[test]
    fn rejects_rate_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(dropout_mask(3, 1.0, &mut rng).is_err());
        assert!(dropout_mask(3, -0.1, &mut rng).is_err());
    }

    #[test]
    fn half_rate_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::full(vec![100_000], 1.0);
        let m = dropout_mask(x.len(), 0.5, &mut rng).unwrap();
        let y = apply_mask(&x, &m).unwrap();
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    }
}
