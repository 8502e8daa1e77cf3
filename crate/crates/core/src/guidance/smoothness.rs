use crate::error::Result;
use crate::scalar::{signum0, Scalar};
use crate::tensor::{BinaryMask, ImageTensor};

/// Masked edge magnitude:
///
/// `D_ij = |y_ij - y_i,j+1| M_ij M_i,j+1 + |y_ij - y_i+1,j| M_ij M_i+1,j`,
///
/// averaged over channels. Neighbours outside the image contribute 0.
pub fn edge_magnitude<S: Scalar>(y: &ImageTensor<S>, mask: &BinaryMask) -> Result<ImageTensor<S>> {
    y.ensure_mask_fits(mask, "edge magnitude")?;
    let (c, h, w) = y.shape();
    let m = mask.data();
    let inv_c = S::one() / S::lit(c as f64);
    let mut out = vec![S::zero(); h * w];
    for ch in 0..c {
        let p = y.plane(ch);
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                if !m[k] {
                    continue;
                }
                let mut acc = S::zero();
                if j + 1 < w && m[k + 1] {
                    acc += (p[k] - p[k + 1]).abs();
                }
                if i + 1 < h && m[k + w] {
                    acc += (p[k] - p[k + w]).abs();
                }
                out[k] += acc * inv_c;
            }
        }
    }
    Ok(ImageTensor::from_parts(1, h, w, out))
}

/// Smoothness loss `sum (D(y_n, M) - D(x, M))^2` and its gradient in `x`.
///
/// The absolute value uses the subgradient `sign(0) = 0`.
pub fn loss_smoothness<S: Scalar>(
    x_hat: &ImageTensor<S>,
    y_n: &ImageTensor<S>,
    mask: &BinaryMask,
) -> Result<(S, ImageTensor<S>)> {
    x_hat.ensure_same_shape(y_n, "smoothness loss")?;
    let dx = edge_magnitude(x_hat, mask)?;
    let dy = edge_magnitude(y_n, mask)?;
    let (c, h, w) = x_hat.shape();
    let m = mask.data();
    let inv_c = S::one() / S::lit(c as f64);
    let two = S::lit(2.0);

    let mut loss = S::zero();
    // r_ij = dL/dD(x)_ij, pre-divided by C
    let resid: Vec<S> = dx
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&a, &b)| {
            let d = a - b;
            loss += d * d;
            two * d * inv_c
        })
        .collect();

    let mut grad = vec![S::zero(); c * h * w];
    for ch in 0..c {
        let p = x_hat.plane(ch);
        let g = &mut grad[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                if !m[k] || resid[k] == S::zero() {
                    continue;
                }
                if j + 1 < w && m[k + 1] {
                    let s = resid[k] * signum0(p[k] - p[k + 1]);
                    g[k] += s;
                    g[k + 1] -= s;
                }
                if i + 1 < h && m[k + w] {
                    let s = resid[k] * signum0(p[k] - p[k + w]);
                    g[k] += s;
                    g[k + w] -= s;
                }
            }
        }
    }
    Ok((loss, ImageTensor::from_parts(c, h, w, grad)))
}
