use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{BinaryMask, ImageTensor};

/// Fidelity loss on unbroken pixels: `sum (1 - M) (y_c - x)^2` over all
/// channels, with gradient `2 (1 - M) (x - y_c)`.
pub fn loss_fidelity<S: Scalar>(
    x_hat: &ImageTensor<S>,
    y_c: &ImageTensor<S>,
    scratch: &BinaryMask,
) -> Result<(S, ImageTensor<S>)> {
    x_hat.ensure_same_shape(y_c, "fidelity loss")?;
    x_hat.ensure_mask_fits(scratch, "fidelity loss")?;
    let n = x_hat.pixel_count();
    let two = S::lit(2.0);
    let mut loss = S::zero();
    let grad = x_hat
        .data()
        .iter()
        .zip(y_c.data())
        .enumerate()
        .map(|(k, (&x, &y))| {
            if scratch.data()[k % n] {
                S::zero()
            } else {
                let d = x - y;
                loss += d * d;
                two * d
            }
        })
        .collect();
    let (c, h, w) = x_hat.shape();
    Ok((loss, ImageTensor::from_parts(c, h, w, grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_at_minimum() {
        let x = ImageTensor::<f64>::from_fn(3, 2, 2, |c, i, j| (c + i * j) as f64 * 0.1).unwrap();
        let (l, g) = loss_fidelity(&x, &x, &BinaryMask::zeros(2, 2).unwrap()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fully_masked_is_zero() {
        let x = ImageTensor::<f64>::filled(3, 2, 2, 0.9).unwrap();
        let y = ImageTensor::<f64>::filled(3, 2, 2, -0.4).unwrap();
        let (l, g) = loss_fidelity(&x, &y, &BinaryMask::ones(2, 2).unwrap()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_arithmetic() {
        let x = ImageTensor::<f64>::filled(1, 1, 1, 0.1).unwrap();
        let y = ImageTensor::<f64>::filled(1, 1, 1, 0.5).unwrap();
        let (l, g) = loss_fidelity(&x, &y, &BinaryMask::zeros(1, 1).unwrap()).unwrap();
        assert!((l - 0.16).abs() < 1e-15);
        assert!((g.data()[0] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let x = ImageTensor::<f64>::zeros(1, 2, 2).unwrap();
        assert!(loss_fidelity(&x, &x, &BinaryMask::zeros(2, 3).unwrap()).is_err());
        let y = ImageTensor::<f64>::zeros(3, 2, 2).unwrap();
        assert!(loss_fidelity(&x, &y, &BinaryMask::zeros(2, 2).unwrap()).is_err());
    }
}
