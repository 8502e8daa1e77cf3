//! Structure, color and edge diagnostics plus plain fidelity metrics.
//!
//! Mask conventions: the contour mask is every non-background label; feature
//! IoU is the mean over the groups in [`FEATURE_GROUPS`].

use crate::color::rgb_to_saturation;
use crate::error::{Error, Result};
use crate::guidance::edge_magnitude;
use crate::io::HISTOGRAM_BINS;
use crate::scalar::Scalar;
use crate::table::{fmt_float, TextTable};
use crate::tensor::{BinaryMask, ImageTensor, ParsingMap};

/// Label groups compared by [`feature_iou`]: eyes, brows, nose, mouth and lips.
pub const FEATURE_GROUPS: [(&str, &[u8]); 4] = [
    ("eyes", &[4, 5]),
    ("brows", &[2, 3]),
    ("nose", &[10]),
    ("mouth", &[11, 12, 13]),
];

/// Peak-to-peak range of the internal `[-1, 1]` pixel scale.
pub const PSNR_PEAK: f64 = 2.0;

/// `|a & b| / |a | b|`, and 1 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::shape(format!(
            "iou masks are {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn label_group_mask(p: &ParsingMap, labels: &[u8]) -> BinaryMask {
    BinaryMask::new(p.height(), p.width(), p.data().iter().map(|c| labels.contains(c)).collect())
        .expect("dims taken from the parsing map")
}

pub fn contour_mask(p: &ParsingMap) -> BinaryMask {
    BinaryMask::new(p.height(), p.width(), p.data().iter().map(|&c| c != 0).collect())
        .expect("dims taken from the parsing map")
}

pub fn contour_iou(a: &ParsingMap, b: &ParsingMap) -> Result<f64> {
    mask_iou(&contour_mask(a), &contour_mask(b))
}

pub fn feature_iou(a: &ParsingMap, b: &ParsingMap) -> Result<f64> {
    let mut acc = 0.0;
    for (_, labels) in FEATURE_GROUPS {
        acc += mask_iou(&label_group_mask(a, labels), &label_group_mask(b, labels))?;
    }
    Ok(acc / FEATURE_GROUPS.len() as f64)
}

/// 64-bin HSV saturation histogram, normalized to mass 1.
/// A value `s` lands in bin `min(floor(64 s), 63)`.
pub fn saturation_histogram<S: Scalar>(img: &ImageTensor<S>) -> Result<Vec<f64>> {
    let sat = rgb_to_saturation(img)?;
    let mut hist = vec![0.0; HISTOGRAM_BINS];
    for v in sat.data() {
        let b = ((v.as_f64() * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
        hist[b] += 1.0;
    }
    let n = sat.len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    Ok(hist)
}

fn normalized(h: &[f64], what: &str) -> Result<Vec<f64>> {
    if h.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid(format!("{what} histogram has negative or non-finite bins")));
    }
    let total: f64 = h.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid(format!("{what} histogram is empty")));
    }
    Ok(h.iter().map(|v| v / total).collect())
}

/// Wasserstein-1 distance between two histograms on `[0, 1]` with equal-width
/// bins: `sum_k |CDF_a(k) - CDF_b(k)| / bins`.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("histograms have {} and {} bins", a.len(), b.len())));
    }
    let (a, b) = (normalized(a, "first")?, normalized(b, "second")?);
    let (mut ca, mut cb, mut acc) = (0.0, 0.0, 0.0);
    for k in 0..a.len() - 1 {
        ca += a[k];
        cb += b[k];
        acc += (ca - cb).abs();
    }
    Ok(acc / a.len() as f64)
}

pub fn saturation_distance<S: Scalar>(img: &ImageTensor<S>, ref_hist: &[f64]) -> Result<f64> {
    if ref_hist.len() != HISTOGRAM_BINS {
        return Err(Error::invalid(format!(
            "reference histogram has {} bins, expected {HISTOGRAM_BINS}",
            ref_hist.len()
        )));
    }
    wasserstein1(&saturation_histogram(img)?, ref_hist)
}

/// Population standard deviation of the unmasked edge field over `region`;
/// 0 for an empty region.
pub fn edge_variation<S: Scalar>(img: &ImageTensor<S>, region: &BinaryMask) -> Result<f64> {
    img.ensure_mask_fits(region, "edge variation region")?;
    let d = edge_magnitude(img, &BinaryMask::ones(img.height(), img.width())?)?;
    let vals: Vec<f64> = d
        .data()
        .iter()
        .zip(region.data())
        .filter(|(_, &m)| m)
        .map(|(v, _)| v.as_f64())
        .collect();
    if vals.is_empty() {
        return Ok(0.0);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    Ok((vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt())
}

/// Mean squared error over `region` (all channels) and PSNR at peak 2.
/// Identical inputs give `psnr = +inf`.
pub fn mse_psnr<S: Scalar>(a: &ImageTensor<S>, b: &ImageTensor<S>, region: Option<&BinaryMask>) -> Result<(f64, f64)> {
    a.ensure_same_shape(b, "mse inputs")?;
    if let Some(m) = region {
        a.ensure_mask_fits(m, "mse region")?;
    }
    let n = a.pixel_count();
    let (mut acc, mut count) = (0.0, 0usize);
    for (k, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if region.is_none_or(|m| m.data()[k % n]) {
            let d = x.as_f64() - y.as_f64();
            acc += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("mse region is empty"));
    }
    let mse = acc / count as f64;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()
    };
    Ok((mse, psnr))
}

/// One row of a metrics table. Missing entries print as `na`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub contour_iou: Option<f64>,
    pub feature_iou: Option<f64>,
    pub saturation_distance: Option<f64>,
    pub edge_variation: f64,
    pub mse: Option<f64>,
    pub psnr: Option<f64>,
}

pub const METRIC_COLUMNS: [&str; 7] = [
    "name",
    "contour_iou",
    "feature_iou",
    "saturation_distance",
    "edge_variation",
    "mse",
    "psnr",
];

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), fmt_float)
}

impl MetricRow {
    pub fn cells(&self) -> Vec<String> {
        vec![
            self.name.clone(),
            opt_cell(self.contour_iou),
            opt_cell(self.feature_iou),
            opt_cell(self.saturation_distance),
            fmt_float(self.edge_variation),
            opt_cell(self.mse),
            opt_cell(self.psnr),
        ]
    }
}

pub fn metrics_table(rows: &[MetricRow]) -> TextTable {
    let mut t = TextTable::new(&METRIC_COLUMNS);
    t.rows = rows.iter().map(MetricRow::cells).collect();
    t
}

/// Inputs for one metrics row. Optional pieces switch their columns on.
#[derive(Debug, Clone, Copy)]
pub struct MetricInputs<'a, S> {
    pub image: &'a ImageTensor<S>,
    /// Parsing maps of the image and of the reference it is compared against.
    pub parsing: Option<(&'a ParsingMap, &'a ParsingMap)>,
    pub reference: Option<&'a ImageTensor<S>>,
    pub reference_hist: Option<&'a [f64]>,
    /// Region for edge variation and mse; the whole image when absent.
    pub region: Option<&'a BinaryMask>,
}

pub fn compute_row<S: Scalar>(name: &str, inputs: MetricInputs<'_, S>) -> Result<MetricRow> {
    if name.is_empty() || name.contains(char::is_whitespace) {
        return Err(Error::invalid(format!("metric row name {name:?} must be one non-empty word")));
    }
    let img = inputs.image;
    let whole = BinaryMask::ones(img.height(), img.width())?;
    let region = inputs.region.unwrap_or(&whole);
    let (contour, feature) = match inputs.parsing {
        Some((a, b)) => (Some(contour_iou(a, b)?), Some(feature_iou(a, b)?)),
        None => (None, None),
    };
    let sat = inputs.reference_hist.map(|h| saturation_distance(img, h)).transpose()?;
    let fid = inputs.reference.map(|r| mse_psnr(img, r, Some(region))).transpose()?;
    Ok(MetricRow {
        name: name.to_string(),
        contour_iou: contour,
        feature_iou: feature,
        saturation_distance: sat,
        edge_variation: edge_variation(img, region)?,
        mse: fid.map(|f| f.0),
        psnr: fid.map(|f| f.1),
    })
}
