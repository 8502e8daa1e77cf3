//! Color-space helpers: HSV saturation and the Reinhard lαβ space.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// Per-pixel HSV saturation of a 3-channel `[-1, 1]` image.
///
/// Channels are remapped to `[0, 1]` first; `S = (max - min) / max`, and
/// `S = 0` where `max = 0`.
pub fn rgb_to_saturation<S: Scalar>(img: &ImageTensor<S>) -> Result<ImageTensor<S>> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!(
            "saturation needs a 3-channel image, got {} channel(s)",
            img.channels()
        )));
    }
    let half = S::lit(0.5);
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = (0..img.pixel_count())
        .map(|p| {
            let (r, g, b) = ((r[p] + S::one()) * half, (g[p] + S::one()) * half, (b[p] + S::one()) * half);
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            if max <= S::zero() {
                S::zero()
            } else {
                ((max - min) / max).max(S::zero()).min(S::one())
            }
        })
        .collect();
    Ok(ImageTensor::from_parts(1, img.height(), img.width(), data))
}

// RGB -> LMS matrix of the Reinhard lαβ transform.
const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];
const LMS_FLOOR: f64 = 1e-6;

fn inverse3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            // cofactor of (c, r), transposed
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            inv[r][c] = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    inv
}

fn mat3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Converts one `[-1, 1]` RGB triple to lαβ.
pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let unit = rgb.map(|v| (v + 1.0) * 0.5);
    let lms = mat3(&RGB_TO_LMS, unit).map(|v| v.max(LMS_FLOOR).log10());
    let (s3, s6, s2) = (3f64.sqrt(), 6f64.sqrt(), 2f64.sqrt());
    [
        (lms[0] + lms[1] + lms[2]) / s3,
        (lms[0] + lms[1] - 2.0 * lms[2]) / s6,
        (lms[0] - lms[1]) / s2,
    ]
}

/// Inverse of [`rgb_to_lab_pixel`] (exact up to the LMS floor).
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    let (s3, s6, s2) = (3f64.sqrt(), 6f64.sqrt(), 2f64.sqrt());
    let (a, b, c) = (lab[0] / s3, lab[1] / s6, lab[2] / s2);
    let log_lms = [a + b + c, a + b - c, a - 2.0 * b];
    let lms = log_lms.map(|v| 10f64.powf(v));
    mat3(&inverse3(&RGB_TO_LMS), lms).map(|v| v * 2.0 - 1.0)
}
