//! The two-pass guided sampler.
//!
//! Pass one draws a pseudo-label `y_p` under weak guidance toward the degraded
//! input. Pass two restores under strong guidance built from region views of
//! `y_p`: fidelity on unbroken pixels and breakage smoothness throughout,
//! plus skin color once `t <= T1`.
//!
//! Each pass draws its noise from its own ChaCha8 stream of the configured
//! seed, so a run is reproducible bit for bit and a zero-scale restore equals
//! plain ancestral sampling on the restoration stream.

mod config;
mod sweep;
mod trace;

pub use config::{
    parse_label, FidelitySource, GuidanceConfig, DEFAULT_STAGE_FRACTION, DEFAULT_STRONG_SCALE, DEFAULT_WEAK_SCALE,
};
pub use sweep::{run_ablation_sweep, sweep_table, SweepGrid, SweepInput, SweepPoint, SweepRow, SWEEP_COLUMNS};
pub use trace::{parse_trace, trace_table, Meta, Phase, StepTrace, TRACE_COLUMNS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::guidance::{
    assemble_gradient, color_transfer_with, loss_color, loss_fidelity, loss_smoothness, LossParts, Stage, Term,
};
use crate::regions::{select, RegionBundle, RegionMasks};
use crate::scalar::Scalar;
use crate::schedule::{guided_transition, posterior, predict_x0, renoise_step, NoiseSchedule};
use crate::tensor::{BinaryMask, ImageTensor, ParsingMap};

pub const PSEUDO_LABEL_STREAM: u64 = 0;
pub const RESTORE_STREAM: u64 = 1;

/// Seeded generator for one pass.
pub fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal image, drawn in `f64` and cast.
pub fn standard_normal<S: Scalar>(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Result<ImageTensor<S>> {
    let (c, h, w) = shape;
    ImageTensor::from_fn(c, h, w, |_, _, _| {
        let z: f64 = StandardNormal.sample(rng);
        S::lit(z)
    })
}

/// Final sample of one reverse pass plus its instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput<S> {
    pub image: ImageTensor<S>,
    pub trace: Vec<StepTrace>,
    /// `(t, x0_hat)` pairs at the configured cadence.
    pub snapshots: Vec<(usize, ImageTensor<S>)>,
}

struct StepGuide<S> {
    grad: Option<ImageTensor<S>>,
    scale: S,
    row: Option<StepTrace>,
}

/// Shared reverse loop `t = T..1`.
///
/// Per step and repeat: predict noise, form `x0_hat`, ask `guide` for a
/// gradient, take the guided transition, and (except on the last repeat)
/// push the candidate back to level `t` with fresh noise.
fn reverse_pass<S, D, F>(
    denoiser: &mut D,
    sched: &NoiseSchedule<S>,
    shape: (usize, usize, usize),
    rng: &mut ChaCha8Rng,
    repeats: usize,
    snapshot_every: Option<usize>,
    mut guide: F,
) -> Result<SampleOutput<S>>
where
    S: Scalar,
    D: Denoiser<S> + ?Sized,
    F: FnMut(usize, usize, &ImageTensor<S>) -> Result<StepGuide<S>>,
{
    let steps = sched.steps();
    let repeats = repeats.max(1);
    let mut x = standard_normal::<S>(rng, shape)?;
    let mut trace = Vec::with_capacity(steps);
    let mut snapshots = Vec::new();
    for t in (1..=steps).rev() {
        let mut row = None;
        for r in 0..repeats {
            let eps = denoiser.predict_eps(&x, t, sched)?;
            x.ensure_same_shape(&eps, "denoiser output")?;
            let x0 = predict_x0(&x, &eps, t, sched)?;
            if !x0.is_finite() {
                return Err(Error::NonFinite {
                    t,
                    last_row: trace.last().map(StepTrace::line).unwrap_or_default(),
                });
            }
            let g = guide(t, r, &x0)?;
            let moments = posterior(&x, &eps, t, sched)?;
            let noise = standard_normal::<S>(rng, shape)?;
            let cand = match &g.grad {
                Some(grad) => guided_transition(&moments, grad, g.scale, &noise)?,
                None => guided_transition(&moments, &x.map(|_| S::zero()), S::zero(), &noise)?,
            };
            row = g.row;
            if r + 1 < repeats {
                let fresh = standard_normal::<S>(rng, shape)?;
                x = renoise_step(&cand, t, &fresh, sched)?;
            } else {
                x = cand;
                if let Some(k) = snapshot_every {
                    if (steps - t).is_multiple_of(k) || t == 1 {
                        snapshots.push((t, x0));
                    }
                }
            }
        }
        if let Some(row) = row {
            trace.push(row);
        }
    }
    Ok(SampleOutput {
        image: x,
        trace,
        snapshots,
    })
}

/// Unguided ancestral sampling from pure noise.
pub fn ancestral_sample<S: Scalar, D: Denoiser<S> + ?Sized>(
    denoiser: &mut D,
    sched: &NoiseSchedule<S>,
    shape: (usize, usize, usize),
    rng: &mut ChaCha8Rng,
    repeats: usize,
) -> Result<ImageTensor<S>> {
    let out = reverse_pass(denoiser, sched, shape, rng, repeats, None, |_, _, _| {
        Ok(StepGuide {
            grad: None,
            scale: S::zero(),
            row: None,
        })
    })?;
    Ok(out.image)
}

/// Weak-guidance pass: every transition is shifted along `2 (x0_hat - y0)`
/// scaled by `s_w`. With `s_w = 0` this is plain ancestral sampling.
pub fn generate_pseudo_label<S: Scalar, D: Denoiser<S> + ?Sized>(
    y0: &ImageTensor<S>,
    denoiser: &mut D,
    sched: &NoiseSchedule<S>,
    cfg: &GuidanceConfig,
) -> Result<SampleOutput<S>> {
    cfg.validate(sched.steps())?;
    let mut rng = noise_rng(cfg.seed, PSEUDO_LABEL_STREAM);
    let scale = S::lit(cfg.s_w);
    reverse_pass(denoiser, sched, y0.shape(), &mut rng, cfg.repeats, cfg.snapshot_every, |t, _, x0| {
        let diff = x0.sub(y0)?;
        let loss: S = diff.data().iter().map(|&d| d * d).sum();
        let grad = diff.scale(S::lit(2.0));
        let row = StepTrace {
            t,
            phase: Phase::PseudoLabel,
            l1: loss.as_f64(),
            l2: 0.0,
            l3: 0.0,
            grad_norms: [grad.norm_l2().as_f64(), 0.0, 0.0],
            leaks: [0.0; 3],
        };
        Ok(StepGuide {
            grad: Some(grad),
            scale,
            row: Some(row),
        })
    })
}

/// Everything a restore run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RestoreOutput<S> {
    pub image: ImageTensor<S>,
    pub pseudo_label: ImageTensor<S>,
    /// Rows of the weak pass (phase `P`).
    pub pseudo_trace: Vec<StepTrace>,
    /// Rows of the restoration pass (phases `I` / `II`).
    pub trace: Vec<StepTrace>,
    pub snapshots: Vec<(usize, ImageTensor<S>)>,
    /// Run parameters echoed into trace headers.
    pub meta: Vec<(String, String)>,
}

/// Full two-pass restoration.
#[allow(clippy::too_many_arguments)]
pub fn restore<S: Scalar, D: Denoiser<S> + ?Sized>(
    y0: &ImageTensor<S>,
    restored: Option<&ImageTensor<S>>,
    scratch: &BinaryMask,
    parsing: &ParsingMap,
    denoiser: &mut D,
    sched: &NoiseSchedule<S>,
    cfg: &GuidanceConfig,
) -> Result<RestoreOutput<S>> {
    check_inputs(y0, restored, scratch, parsing, sched, cfg)?;
    let weak = generate_pseudo_label(y0, denoiser, sched, cfg)?;
    let mut out = restore_from_pseudo_label(&weak.image, restored, scratch, parsing, denoiser, sched, cfg)?;
    out.pseudo_trace = weak.trace;
    Ok(out)
}

fn check_inputs<S: Scalar>(
    y: &ImageTensor<S>,
    restored: Option<&ImageTensor<S>>,
    scratch: &BinaryMask,
    parsing: &ParsingMap,
    sched: &NoiseSchedule<S>,
    cfg: &GuidanceConfig,
) -> Result<()> {
    cfg.validate(sched.steps())?;
    y.ensure_mask_fits(scratch, "scratch mask")?;
    if parsing.height() != y.height() || parsing.width() != y.width() {
        return Err(Error::shape(format!(
            "parsing map is {}x{}, image is {}x{}",
            parsing.height(),
            parsing.width(),
            y.height(),
            y.width()
        )));
    }
    if let Some(r) = restored {
        y.ensure_same_shape(r, "restored image")?;
    }
    if cfg.fidelity_source == FidelitySource::Restored && restored.is_none() {
        return Err(Error::config("fidelity_source", "`restored` selected but no restored image supplied"));
    }
    Ok(())
}

/// Restoration pass given an existing pseudo-label.
#[allow(clippy::too_many_arguments)]
pub fn restore_from_pseudo_label<S: Scalar, D: Denoiser<S> + ?Sized>(
    pseudo_label: &ImageTensor<S>,
    restored: Option<&ImageTensor<S>>,
    scratch: &BinaryMask,
    parsing: &ParsingMap,
    denoiser: &mut D,
    sched: &NoiseSchedule<S>,
    cfg: &GuidanceConfig,
) -> Result<RestoreOutput<S>> {
    check_inputs(pseudo_label, restored, scratch, parsing, sched, cfg)?;
    let steps = sched.steps();
    let t1 = cfg.stage_boundary(steps);
    let radius = cfg.radius_for(pseudo_label.height());
    let masks = RegionMasks::build(scratch, parsing, &cfg.labels, radius)?;
    let fidelity_source = match (cfg.fidelity_source, restored) {
        (FidelitySource::PseudoLabel, _) | (FidelitySource::Auto, None) => pseudo_label,
        (_, Some(r)) => r,
        (FidelitySource::Restored, None) => unreachable!("rejected by check_inputs"),
    };
    let bundle = RegionBundle::build(fidelity_source, pseudo_label, &masks)?;
    let weights = pixel_weights::<S>(parsing, cfg);
    let scale = S::lit(cfg.s_s);

    let mut y_s: Option<ImageTensor<S>> = None;
    let mut y_s_at = 0usize;
    let mut rng = noise_rng(cfg.seed, RESTORE_STREAM);
    let out = reverse_pass(
        denoiser,
        sched,
        pseudo_label.shape(),
        &mut rng,
        cfg.repeats,
        cfg.snapshot_every,
        |t, r, x0| {
            let stage = Stage::at(t, t1);
            if stage == Stage::RestorationColor && r == 0 {
                let refresh = match (&y_s, cfg.color_refresh) {
                    (None, _) => true,
                    (Some(_), Some(k)) => y_s_at - t >= k,
                    (Some(_), None) => false,
                };
                if refresh {
                    let skin_view = select(x0, &masks.skin)?;
                    y_s = Some(color_transfer_with(
                        &skin_view,
                        &bundle.y_p_skin.image,
                        &masks.skin,
                        &bundle.y_p_skin.mask,
                        cfg.color,
                    )?);
                    y_s_at = t;
                }
            }
            let parts = LossParts {
                fidelity: Term::from(loss_fidelity(x0, &bundle.y_c.image, &masks.scratch)?),
                smoothness: Term::from(loss_smoothness(x0, &bundle.y_n.image, &masks.guide_ext)?),
                color: match (&y_s, stage) {
                    (Some(ys), Stage::RestorationColor) => Some(Term::from(loss_color(x0, ys, &masks.skin)?)),
                    _ => None,
                },
            };
            let report = assemble_gradient(stage, &parts)?;
            let leaks = [
                leak(&parts.fidelity.grad, &masks.scratch),
                leak(&parts.smoothness.grad, &masks.guide_ext.not()),
                parts
                    .color
                    .as_ref()
                    .filter(|_| report.l3_active)
                    .map_or(0.0, |c| leak(&c.grad, &masks.skin.not())),
            ];
            let row = StepTrace {
                t,
                phase: Phase::Guided(stage),
                l1: report.l1.as_f64(),
                l2: report.l2.as_f64(),
                l3: report.l3.as_f64(),
                grad_norms: report.grad_norms.map(|g| g.as_f64()),
                leaks,
            };
            let grad = match &weights {
                Some(w) => apply_pixel_weights(&report.grad, w),
                None => report.grad,
            };
            Ok(StepGuide {
                grad: Some(grad),
                scale,
                row: Some(row),
            })
        },
    )?;

    Ok(RestoreOutput {
        image: out.image,
        pseudo_label: pseudo_label.clone(),
        pseudo_trace: Vec::new(),
        trace: out.trace,
        snapshots: out.snapshots,
        meta: run_meta(cfg, steps, t1, radius, restored.is_some()),
    })
}

fn leak<S: Scalar>(grad: &ImageTensor<S>, forbidden: &BinaryMask) -> f64 {
    let n = grad.pixel_count();
    grad.data()
        .iter()
        .enumerate()
        .filter(|(k, _)| forbidden.data()[k % n])
        .map(|(_, g)| g.abs().as_f64())
        .sum()
}

fn pixel_weights<S: Scalar>(parsing: &ParsingMap, cfg: &GuidanceConfig) -> Option<Vec<S>> {
    if cfg.label_weights.is_empty() {
        return None;
    }
    Some(
        parsing
            .data()
            .iter()
            .map(|code| S::lit(cfg.label_weights.get(code).copied().unwrap_or(1.0)))
            .collect(),
    )
}

fn apply_pixel_weights<S: Scalar>(grad: &ImageTensor<S>, w: &[S]) -> ImageTensor<S> {
    let n = grad.pixel_count();
    let data = grad.data().iter().enumerate().map(|(k, &g)| g * w[k % n]).collect();
    let (c, h, wd) = grad.shape();
    ImageTensor::from_parts(c, h, wd, data)
}

fn run_meta(cfg: &GuidanceConfig, steps: usize, t1: usize, radius: usize, has_restored: bool) -> Vec<(String, String)> {
    let mut meta = vec![
        ("steps".to_string(), steps.to_string()),
        ("t1".to_string(), t1.to_string()),
        ("s_w".to_string(), cfg.s_w.to_string()),
        ("s_s".to_string(), cfg.s_s.to_string()),
        ("repeats".to_string(), cfg.repeats.to_string()),
        ("radius".to_string(), radius.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        (
            "color_refresh".to_string(),
            cfg.color_refresh.map_or("none".to_string(), |k| k.to_string()),
        ),
        (
            "fidelity_source".to_string(),
            match (cfg.fidelity_source, has_restored) {
                (FidelitySource::PseudoLabel, _) | (FidelitySource::Auto, false) => "pseudo-label",
                _ => "restored",
            }
            .to_string(),
        ),
    ];
    if !cfg.label_weights.is_empty() {
        let list: Vec<String> = cfg.label_weights.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        meta.push(("label_weights".to_string(), list.join(",")));
    }
    meta
}
