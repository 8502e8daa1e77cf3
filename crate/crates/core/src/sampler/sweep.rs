use rayon::prelude::*;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::metrics::{compute_row, MetricInputs, MetricRow};
use crate::regions::RegionMasks;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::{BinaryMask, ImageTensor, ParsingMap};

use super::{restore, GuidanceConfig};

/// One input of a sweep.
#[derive(Debug, Clone)]
pub struct SweepInput<S> {
    pub name: String,
    pub degraded: ImageTensor<S>,
    pub restored: Option<ImageTensor<S>>,
    pub scratch: BinaryMask,
    pub parsing: ParsingMap,
    /// Ground truth for the mse column; the degraded input when absent.
    pub reference: Option<ImageTensor<S>>,
    pub reference_hist: Option<Vec<f64>>,
}

/// Values to sweep; an empty axis keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepGrid {
    pub s_w: Vec<f64>,
    pub s_s: Vec<f64>,
    pub t1: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub s_w: f64,
    pub s_s: f64,
    pub t1: usize,
}

impl SweepGrid {
    /// Cartesian product in `s_w`, `s_s`, `t1` order.
    pub fn points(&self, base: &GuidanceConfig, steps: usize) -> Vec<SweepPoint> {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let t1s = if self.t1.is_empty() { vec![base.stage_boundary(steps)] } else { self.t1.clone() };
        let mut out = Vec::new();
        for &s_w in &or(&self.s_w, base.s_w) {
            for &s_s in &or(&self.s_s, base.s_s) {
                for &t1 in &t1s {
                    out.push(SweepPoint { s_w, s_s, t1 });
                }
            }
        }
        out
    }
}

/// A metrics row tagged with the input and grid point that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub input: String,
    pub point: SweepPoint,
    pub metrics: MetricRow,
}

/// Restores every input at every grid point, in parallel.
///
/// Each cell opens its own denoiser through `make_denoiser` and uses the base
/// seed, so rows do not depend on scheduling. Rows come back in
/// `(input, point)` order. The mse column compares the output with the
/// reference (or the degraded input) on unbroken pixels; edge variation is
/// taken inside the extended guide mask.
pub fn run_ablation_sweep<S, D, F>(
    inputs: &[SweepInput<S>],
    grid: &SweepGrid,
    base: &GuidanceConfig,
    sched: &NoiseSchedule<S>,
    make_denoiser: F,
) -> Result<Vec<SweepRow>>
where
    S: Scalar,
    D: Denoiser<S>,
    F: Fn() -> Result<D> + Sync,
{
    let steps = sched.steps();
    let points = grid.points(base, steps);
    if inputs.is_empty() {
        return Err(Error::invalid("sweep needs at least one input"));
    }
    let cells: Vec<(usize, SweepPoint)> = (0..inputs.len())
        .flat_map(|i| points.iter().map(move |p| (i, *p)))
        .collect();
    for (_, p) in &cells {
        point_config(base, p).validate(steps)?;
    }
    cells
        .par_iter()
        .map(|&(i, point)| {
            let input = &inputs[i];
            let cfg = point_config(base, &point);
            let mut den = make_denoiser()?;
            let out = restore(
                &input.degraded,
                input.restored.as_ref(),
                &input.scratch,
                &input.parsing,
                &mut den,
                sched,
                &cfg,
            )?;
            let masks = RegionMasks::build(
                &input.scratch,
                &input.parsing,
                &cfg.labels,
                cfg.radius_for(input.degraded.height()),
            )?;
            let reference = input.reference.as_ref().unwrap_or(&input.degraded);
            let mut metrics = compute_row(
                &input.name,
                MetricInputs {
                    image: &out.image,
                    parsing: None,
                    reference: None,
                    reference_hist: input.reference_hist.as_deref(),
                    region: Some(&masks.guide_ext),
                },
            )?;
            if !masks.valid.is_empty() {
                let (mse, psnr) = crate::metrics::mse_psnr(&out.image, reference, Some(&masks.valid))?;
                metrics.mse = Some(mse);
                metrics.psnr = Some(psnr);
            }
            Ok(SweepRow {
                input: input.name.clone(),
                point,
                metrics,
            })
        })
        .collect()
}

fn point_config(base: &GuidanceConfig, p: &SweepPoint) -> GuidanceConfig {
    GuidanceConfig {
        s_w: p.s_w,
        s_s: p.s_s,
        t1: Some(p.t1),
        ..base.clone()
    }
}

pub const SWEEP_COLUMNS: [&str; 10] = [
    "input",
    "s_w",
    "s_s",
    "t1",
    "contour_iou",
    "feature_iou",
    "saturation_distance",
    "edge_variation",
    "mse",
    "psnr",
];

impl SweepRow {
    pub fn cells(&self) -> Vec<String> {
        let mut m = self.metrics.cells();
        m.remove(0);
        let mut row = vec![
            self.input.clone(),
            self.point.s_w.to_string(),
            self.point.s_s.to_string(),
            self.point.t1.to_string(),
        ];
        row.extend(m);
        row
    }
}

pub fn sweep_table(rows: &[SweepRow]) -> crate::table::TextTable {
    let mut t = crate::table::TextTable::new(&SWEEP_COLUMNS);
    t.rows = rows.iter().map(SweepRow::cells).collect();
    t
}
