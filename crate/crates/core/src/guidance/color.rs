use serde::{Deserialize, Serialize};

use crate::color::{lab_to_rgb_pixel, rgb_to_lab_pixel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BinaryMask, ImageTensor};

/// Space in which channel statistics are matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    #[default]
    Rgb,
    /// Reinhard lαβ (decorrelated log-LMS).
    Lab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferOptions {
    pub space: ColorSpace,
    /// Clamp the result to `[-1, 1]`.
    pub clamp: bool,
}

impl Default for TransferOptions {
    fn default() -> Self {
        Self {
            space: ColorSpace::Rgb,
            clamp: true,
        }
    }
}

/// Population mean and standard deviation of `values` over `mask`.
pub fn masked_moments(values: &[f64], mask: &BinaryMask) -> Option<(f64, f64)> {
    let n = mask.count();
    if n == 0 {
        return None;
    }
    let sel = || values.iter().zip(mask.data()).filter(|(_, &m)| m).map(|(v, _)| *v);
    let mean = sel().sum::<f64>() / n as f64;
    let var = sel().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Some((mean, var.sqrt()))
}

fn planes_f64<S: Scalar>(img: &ImageTensor<S>, space: ColorSpace) -> Vec<Vec<f64>> {
    let n = img.pixel_count();
    match space {
        ColorSpace::Rgb => (0..img.channels())
            .map(|c| img.plane(c).iter().map(|v| v.as_f64()).collect())
            .collect(),
        ColorSpace::Lab => {
            let mut out = vec![vec![0.0; n]; 3];
            for p in 0..n {
                let lab = rgb_to_lab_pixel([
                    img.plane(0)[p].as_f64(),
                    img.plane(1)[p].as_f64(),
                    img.plane(2)[p].as_f64(),
                ]);
                for c in 0..3 {
                    out[c][p] = lab[c];
                }
            }
            out
        }
    }
}

/// Per-channel statistics matching: inside `mask_c`,
/// `out = (x - mu_c) * sigma_r / sigma_c + mu_r`, with moments taken over the
/// respective masks. Pixels outside `mask_c` are copied. A flat content
/// channel (`sigma_c = 0`) maps to `mu_r`. If either mask is empty the
/// content is returned unchanged.
pub fn color_transfer_with<S: Scalar>(
    content: &ImageTensor<S>,
    reference: &ImageTensor<S>,
    mask_c: &BinaryMask,
    mask_r: &BinaryMask,
    opts: TransferOptions,
) -> Result<ImageTensor<S>> {
    if content.channels() != reference.channels() {
        return Err(Error::shape(format!(
            "color transfer channel mismatch: {} vs {}",
            content.channels(),
            reference.channels()
        )));
    }
    if opts.space == ColorSpace::Lab && content.channels() != 3 {
        return Err(Error::invalid("lαβ color transfer needs 3-channel images"));
    }
    content.ensure_mask_fits(mask_c, "color transfer content")?;
    reference.ensure_mask_fits(mask_r, "color transfer reference")?;
    if mask_c.is_empty() || mask_r.is_empty() {
        return Ok(content.clone());
    }

    let mut src = planes_f64(content, opts.space);
    let refp = planes_f64(reference, opts.space);
    for (plane, rplane) in src.iter_mut().zip(&refp) {
        let (mu_c, sd_c) = masked_moments(plane, mask_c).expect("nonempty");
        let (mu_r, sd_r) = masked_moments(rplane, mask_r).expect("nonempty");
        for (v, &m) in plane.iter_mut().zip(mask_c.data()) {
            if m {
                *v = if sd_c > 0.0 { (*v - mu_c) * (sd_r / sd_c) + mu_r } else { mu_r };
            }
        }
    }

    let n = content.pixel_count();
    let mut data: Vec<S> = content.data().to_vec();
    for p in 0..n {
        if !mask_c.data()[p] {
            continue;
        }
        match opts.space {
            ColorSpace::Rgb => {
                for c in 0..content.channels() {
                    data[c * n + p] = S::lit(src[c][p]);
                }
            }
            ColorSpace::Lab => {
                let rgb = lab_to_rgb_pixel([src[0][p], src[1][p], src[2][p]]);
                for c in 0..3 {
                    data[c * n + p] = S::lit(rgb[c]);
                }
            }
        }
    }
    if opts.clamp {
        for v in &mut data {
            *v = v.max(-S::one()).min(S::one());
        }
    }
    let (c, h, w) = content.shape();
    Ok(ImageTensor::from_parts(c, h, w, data))
}

/// RGB statistics matching with clamping; see [`color_transfer_with`].
pub fn color_transfer<S: Scalar>(
    content: &ImageTensor<S>,
    reference: &ImageTensor<S>,
    mask_c: &BinaryMask,
    mask_r: &BinaryMask,
) -> Result<ImageTensor<S>> {
    color_transfer_with(content, reference, mask_c, mask_r, TransferOptions::default())
}

/// Color loss `sum skin (y_s - x)^2`, gradient `2 skin (x - y_s)`.
/// `y_s` is a constant target.
pub fn loss_color<S: Scalar>(
    x_hat_s: &ImageTensor<S>,
    y_s: &ImageTensor<S>,
    skin: &BinaryMask,
) -> Result<(S, ImageTensor<S>)> {
    x_hat_s.ensure_same_shape(y_s, "color loss")?;
    x_hat_s.ensure_mask_fits(skin, "color loss")?;
    let n = x_hat_s.pixel_count();
    let two = S::lit(2.0);
    let mut loss = S::zero();
    let grad = x_hat_s
        .data()
        .iter()
        .zip(y_s.data())
        .enumerate()
        .map(|(k, (&x, &y))| {
            if skin.data()[k % n] {
                let d = x - y;
                loss += d * d;
                two * d
            } else {
                S::zero()
            }
        })
        .collect();
    let (c, h, w) = x_hat_s.shape();
    Ok((loss, ImageTensor::from_parts(c, h, w, grad)))
}
