use rand::Rng;

use super::{expect_2d, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(input.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

/// Numerically stable softmax of one logit vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::dim("softmax of an empty logit vector"));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Row-wise softmax of a `[batch, classes]` matrix.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = expect_2d(logits, "softmax")?;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        out.extend(softmax(&logits.data()[r * cols..][..cols])?);
    }
    Tensor::new(logits.shape(), out)
}

/// `-log p[label]`.
pub fn cross_entropy<T: Scalar>(probs: &[T], label: usize) -> Result<T> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::Param(format!("label {label} outside {} classes", probs.len())))?;
    Ok(-p.ln())
}

fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Fused softmax + cross-entropy averaged over the batch. Returns the mean
/// loss and the probabilities needed by [`softmax_xent_backward`].
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (rows, cols) = expect_2d(logits, "softmax_xent")?;
    if labels.len() != rows {
        return Err(Error::dim(format!("{rows} logit rows but {} labels", labels.len())));
    }
    let mut loss = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        if label >= cols {
            return Err(Error::Param(format!("label {label} outside {cols} classes")));
        }
        let z = &logits.data()[r * cols..][..cols];
        loss = loss + log_sum_exp(z) - z[label];
    }
    let probs = softmax_rows(logits)?;
    Ok((loss / T::lit(rows as f64), probs))
}

/// `(probs - one_hot(labels)) * grad_loss / batch`.
pub fn softmax_xent_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    grad_loss: T,
) -> Result<Tensor<T>> {
    let (rows, cols) = expect_2d(probs, "softmax_xent backward")?;
    let scale = grad_loss / T::lit(rows as f64);
    let mut g = probs.data().to_vec();
    for (r, &label) in labels.iter().enumerate() {
        g[r * cols + label] = g[r * cols + label] - T::one();
    }
    for v in &mut g {
        *v = *v * scale;
    }
    Tensor::new(probs.shape(), g)
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise `1 / (1 - rate)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<T>> {
    check_rate(rate)?;
    let keep = T::lit(1.0 / (1.0 - rate));
    Ok((0..len)
        .map(|_| if rate > 0.0 && rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect())
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Param(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Applies dropout; in train mode also returns the mask used.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    check_rate(rate)?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let mask = dropout_mask(input.len(), rate, rng)?;
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((Tensor::new(input.shape(), data)?, Some(mask)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_uniform_probs() {
        assert_eq!(softmax(&[0.0f64; 4]).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let z = [0.3f64, -1.2, 2.5];
        let shifted: Vec<f64> = z.iter().map(|v| v + 100.0).collect();
        for (a, b) in softmax(&z).unwrap().iter().zip(softmax(&shifted).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1e4f64, -1e4, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_softmax_rejected() {
        assert!(matches!(softmax::<f32>(&[]), Err(Error::Dimension(_))));
    }

    #[test]
    fn cross_entropy_of_label() {
        assert!((cross_entropy(&[0.25f64, 0.75], 1).unwrap() + 0.75f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[0.5f64, 0.5], 2).is_err());
    }

    #[test]
    fn rate_zero_and_infer_are_identity() {
        let x = Tensor::<f32>::from_f64(&[4], &[1., 2., 3., 4.]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.0, Mode::Infer, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.5, Mode::Infer, &mut rng).unwrap().0, x);
    }

    #[test]
    fn rate_one_rejected() {
        let x = Tensor::<f32>::zeros(&[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(dropout(&x, 1.0, Mode::Train, &mut rng), Err(Error::Param(_))));
    }

    #[test]
    fn half_rate_statistics() {
        let x = Tensor::<f64>::full(&[10_000], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (y, _) = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 10_000.0;
        assert!((survivors - 0.5).abs() <= 0.03, "survivor fraction {survivors}");
        let mean = y.sum() / 10_000.0;
        assert!((mean - 1.0).abs() <= 0.05, "mean {mean}");
    }
}
