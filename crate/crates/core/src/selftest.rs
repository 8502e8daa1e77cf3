//! Self-contained property checks on the analytic backends.
//!
//! Each check builds its own random instances, compares the library against
//! an independent oracle (finite differences, brute-force loops, Monte Carlo
//! moments) and reports the worst deviation. The brute-force oracles are
//! public so integration tests can reuse them.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{gaussian_predict_eps, DiagonalGaussianModel, GaussianDenoiser};
use crate::error::Result;
use crate::guidance::{
    color_transfer_with, edge_magnitude, loss_color, loss_fidelity, loss_smoothness, masked_moments, ColorSpace,
    TransferOptions,
};
use crate::regions::extend_mask;
use crate::sampler::{ancestral_sample, noise_rng, restore, GuidanceConfig, Phase, RESTORE_STREAM};
use crate::guidance::Stage;
use crate::schedule::{predict_x0, NoiseSchedule};
use crate::tensor::{BinaryMask, ImageTensor, ParsingMap};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative gradient error.
pub const FD_FLOOR: f64 = 1e-3;

/// Deliberate defects, used to prove the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FaultInjection {
    /// Negate the analytic fidelity gradient before comparing.
    pub flip_fidelity_sign: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed deviation and its tolerance, in words.
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

// ---------------------------------------------------------------- oracles

/// Direct double loop over the masked forward differences, channel-averaged.
pub fn edge_magnitude_oracle(y: &ImageTensor<f64>, m: &BinaryMask) -> Vec<f64> {
    let (c, h, w) = y.shape();
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut total = 0.0;
            for ch in 0..c {
                let mut v = 0.0;
                if j + 1 < w && m.get(i, j) && m.get(i, j + 1) {
                    v += (y.get(ch, i, j) - y.get(ch, i, j + 1)).abs();
                }
                if i + 1 < h && m.get(i, j) && m.get(i + 1, j) {
                    v += (y.get(ch, i, j) - y.get(ch, i + 1, j)).abs();
                }
                total += v;
            }
            out[i * w + j] = total / c as f64;
        }
    }
    out
}

/// Cross-shaped dilation by scanning every offset up to `r` on both axes.
pub fn dilation_oracle(m: &BinaryMask, r: usize) -> BinaryMask {
    let (h, w) = (m.height() as isize, m.width() as isize);
    BinaryMask::from_fn(m.height(), m.width(), |i, j| {
        let (i, j) = (i as isize, j as isize);
        let mut hit = false;
        for k in 0..=r as isize {
            for (di, dj) in [(k, 0), (-k, 0), (0, k), (0, -k)] {
                let (a, b) = (i + di, j + dj);
                if a >= 0 && a < h && b >= 0 && b < w && m.get(a as usize, b as usize) {
                    hit = true;
                }
            }
        }
        hit
    })
    .expect("same dims as input")
}

/// Central difference of `f` at every coordinate of `x`.
pub fn central_differences(x: &ImageTensor<f64>, h: f64, f: impl Fn(&ImageTensor<f64>) -> f64) -> Vec<f64> {
    let (c, hh, w) = x.shape();
    let mut data = x.data().to_vec();
    (0..data.len())
        .map(|k| {
            let orig = data[k];
            data[k] = orig + h;
            let plus = f(&ImageTensor::new(c, hh, w, data.clone()).expect("finite perturbation"));
            data[k] = orig - h;
            let minus = f(&ImageTensor::new(c, hh, w, data.clone()).expect("finite perturbation"));
            data[k] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, FD_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor<f64> {
    ImageTensor::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0)).expect("valid dims")
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(p)).expect("valid dims")
}

/// Whether every in-range neighbour difference of `(c, i, j)` exceeds `eps`.
fn kink_free(x: &ImageTensor<f64>, c: usize, i: usize, j: usize, eps: f64) -> bool {
    let (_, h, w) = x.shape();
    let v = x.get(c, i, j);
    let mut ok = true;
    if j + 1 < w {
        ok &= (v - x.get(c, i, j + 1)).abs() > eps;
    }
    if j > 0 {
        ok &= (v - x.get(c, i, j - 1)).abs() > eps;
    }
    if i + 1 < h {
        ok &= (v - x.get(c, i + 1, j)).abs() > eps;
    }
    if i > 0 {
        ok &= (v - x.get(c, i - 1, j)).abs() > eps;
    }
    ok
}

// ----------------------------------------------------------------- checks

/// Worst relative gradient errors `[L1, L2, L3]` over `instances` random
/// 8x8x3 problems; L2 is compared only at kink-free coordinates.
pub fn gradient_errors(instances: usize, seed: u64, fault: FaultInjection) -> Result<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..instances {
        let x = random_image(&mut rng, 3, 8, 8);
        let y = random_image(&mut rng, 3, 8, 8);
        let m = random_mask(&mut rng, 8, 8, 0.3);
        let skin = random_mask(&mut rng, 8, 8, 0.6);
        let ext = random_mask(&mut rng, 8, 8, 0.7);

        let (_, mut g1) = loss_fidelity(&x, &y, &m)?;
        if fault.flip_fidelity_sign {
            g1 = g1.scale(-1.0);
        }
        let fd1 = central_differences(&x, FD_STEP, |z| loss_fidelity(z, &y, &m).map(|r| r.0).unwrap_or(f64::NAN));
        let (_, g2) = loss_smoothness(&x, &y, &ext)?;
        let fd2 = central_differences(&x, FD_STEP, |z| loss_smoothness(z, &y, &ext).map(|r| r.0).unwrap_or(f64::NAN));
        let (_, g3) = loss_color(&x, &y, &skin)?;
        let fd3 = central_differences(&x, FD_STEP, |z| loss_color(z, &y, &skin).map(|r| r.0).unwrap_or(f64::NAN));

        for k in 0..x.len() {
            let (c, p) = (k / 64, k % 64);
            worst[0] = worst[0].max(relative_error(g1.data()[k], fd1[k]));
            worst[2] = worst[2].max(relative_error(g3.data()[k], fd3[k]));
            if kink_free(&x, c, p / 8, p % 8, 1e-3) {
                worst[1] = worst[1].max(relative_error(g2.data()[k], fd2[k]));
            }
        }
    }
    Ok(worst)
}

pub fn check_gradients(instances: usize, fault: FaultInjection) -> CheckResult {
    timed("gradients vs finite diff", || {
        let e = gradient_errors(instances, 0x5eed, fault)?;
        let ok = e[0] <= 1e-6 && e[2] <= 1e-6 && e[1] <= 1e-4;
        Ok((
            ok,
            format!(
                "{instances} instances: L1 {:.2e}, L3 {:.2e} (tol 1e-6); L2 {:.2e} (tol 1e-4)",
                e[0], e[2], e[1]
            ),
        ))
    })
}

/// Worst `|library - oracle|` for the edge operator and number of dilation
/// mismatches, over `instances` random 16x16 problems each.
pub fn operator_errors(instances: usize, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut edge, mut dil) = (0.0f64, 0usize);
    for n in 0..instances {
        let c = if n % 2 == 0 { 3 } else { 1 };
        let y = random_image(&mut rng, c, 16, 16);
        let m = random_mask(&mut rng, 16, 16, 0.5);
        let lib = edge_magnitude(&y, &m)?;
        for (a, b) in lib.data().iter().zip(edge_magnitude_oracle(&y, &m)) {
            edge = edge.max((a - b).abs());
        }
        let sparse = random_mask(&mut rng, 16, 16, 0.08);
        let r = rng.random_range(0..6);
        let lib = extend_mask(&sparse, r);
        let orc = dilation_oracle(&sparse, r);
        dil += lib.data().iter().zip(orc.data()).filter(|(a, b)| a != b).count();
    }
    Ok((edge, dil))
}

pub fn check_operators(instances: usize) -> CheckResult {
    timed("operators vs brute force", || {
        let (edge, dil) = operator_errors(instances, 0x0ac1e)?;
        Ok((
            edge <= 1e-12 && dil == 0,
            format!("{instances} instances: edge max err {edge:.2e} (tol 1e-12), dilation mismatches {dil}"),
        ))
    })
}

/// Worst deviation of transferred moments from the reference and of a
/// second application from the first, both without clamping.
pub fn color_transfer_errors(instances: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut moments, mut idem) = (0.0f64, 0.0f64);
    for n in 0..instances {
        let space = if n % 2 == 0 { ColorSpace::Rgb } else { ColorSpace::Lab };
        let opts = TransferOptions { space, clamp: false };
        let content = ImageTensor::<f64>::from_fn(3, 12, 12, |_, _, _| rng.random_range(-0.6..0.4))?;
        let reference = ImageTensor::<f64>::from_fn(3, 12, 12, |_, _, _| rng.random_range(-0.2..0.8))?;
        let mc = random_mask(&mut rng, 12, 12, 0.5);
        let mr = random_mask(&mut rng, 12, 12, 0.5);
        if mc.is_empty() || mr.is_empty() {
            continue;
        }
        let once = color_transfer_with(&content, &reference, &mc, &mr, opts)?;
        let twice = color_transfer_with(&once, &reference, &mc, &mr, opts)?;
        for (a, b) in once.data().iter().zip(twice.data()) {
            idem = idem.max((a - b).abs());
        }
        if space == ColorSpace::Rgb {
            for c in 0..3 {
                let (mo, so) = masked_moments(once.plane(c), &mc).expect("nonempty");
                let (mref, sref) = masked_moments(reference.plane(c), &mr).expect("nonempty");
                moments = moments.max((mo - mref).abs()).max((so - sref).abs());
            }
        }
    }
    Ok((moments, idem))
}

pub fn check_color_transfer(instances: usize) -> CheckResult {
    timed("color transfer exactness", || {
        let (m, i) = color_transfer_errors(instances, 0xc010)?;
        Ok((
            m <= 1e-6 && i <= 1e-6,
            format!("moment err {m:.2e}, idempotence err {i:.2e} (tol 1e-6)"),
        ))
    })
}

/// `predict_x0(xt, gaussian eps)` against the closed-form posterior mean.
pub fn check_keystone() -> CheckResult {
    timed("gaussian x0 keystone", || {
        let sched = NoiseSchedule::<f64>::linear(1000, 1e-4, 0.02)?;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = DiagonalGaussianModel::new(
            ImageTensor::from_fn(3, 8, 8, |_, _, _| rng.random_range(-0.5..0.5))?,
            ImageTensor::from_fn(3, 8, 8, |_, _, _| rng.random_range(0.0..1.0))?,
        )?;
        let mut worst = 0.0f64;
        for t in [1, 10, 250, 500, 999, 1000] {
            let xt = random_image(&mut rng, 3, 8, 8);
            let eps = gaussian_predict_eps(&model, &xt, t, &sched)?;
            let x0 = predict_x0(&xt, &eps, t, &sched)?;
            let ab = sched.alpha_bar(t);
            for k in 0..xt.len() {
                let (m, v) = (model.mean().data()[k], model.var().data()[k]);
                let exact = m + ab.sqrt() * v / (ab * v + 1.0 - ab) * (xt.data()[k] - ab.sqrt() * m);
                worst = worst.max((x0.data()[k] - exact).abs() / exact.abs().max(1.0));
            }
        }
        Ok((worst <= 1e-9, format!("max rel err {worst:.2e} (tol 1e-9)")))
    })
}

/// Per-pixel sample moments of unguided sampling against the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentErrors {
    pub max_mean_abs: f64,
    pub max_var_rel: f64,
}

pub fn moment_errors(
    sched: &NoiseSchedule<f64>,
    model: &DiagonalGaussianModel<f64>,
    samples: usize,
    seed: u64,
) -> Result<MomentErrors> {
    let shape = model.mean().shape();
    let n = model.mean().len();
    let mut den = GaussianDenoiser::new(model.clone());
    let mut rng = noise_rng(seed, RESTORE_STREAM);
    let (mut s1, mut s2) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..samples {
        let x = ancestral_sample(&mut den, sched, shape, &mut rng, 1)?;
        for (k, v) in x.data().iter().enumerate() {
            s1[k] += v;
            s2[k] += v * v;
        }
    }
    let ns = samples as f64;
    let mut out = MomentErrors { max_mean_abs: 0.0, max_var_rel: 0.0 };
    for k in 0..n {
        let mean = s1[k] / ns;
        let var = s2[k] / ns - mean * mean;
        let (mu, v) = (model.mean().data()[k], model.var().data()[k]);
        out.max_mean_abs = out.max_mean_abs.max((mean - mu).abs());
        out.max_var_rel = out.max_var_rel.max((var - v).abs() / v);
    }
    Ok(out)
}

/// Moment check at the default 1000-step schedule; tolerances widen by four
/// standard errors of the estimates.
pub fn check_moments(samples: usize) -> CheckResult {
    timed("ancestral sampling moments", || {
        let sched = NoiseSchedule::<f64>::linear(1000, 1e-4, 0.02)?;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = DiagonalGaussianModel::new(
            ImageTensor::from_fn(1, 4, 4, |_, _, _| rng.random_range(-0.5..0.5))?,
            ImageTensor::from_fn(1, 4, 4, |_, _, _| rng.random_range(0.25..1.0))?,
        )?;
        let e = moment_errors(&sched, &model, samples, 3)?;
        let ns = samples as f64;
        let mean_tol = 0.05 + 4.0 * (1.0 / ns).sqrt();
        let var_tol = 0.10 + 4.0 * (2.0 / ns).sqrt();
        Ok((
            e.max_mean_abs <= mean_tol && e.max_var_rel <= var_tol,
            format!(
                "{samples} samples: mean err {:.3} (tol {mean_tol:.3}), var rel err {:.3} (tol {var_tol:.3})",
                e.max_mean_abs, e.max_var_rel
            ),
        ))
    })
}

/// Stage gating and mask safety on one small restore run.
pub fn check_restore_invariants() -> CheckResult {
    timed("stage gating + mask safety", || {
        let sched = NoiseSchedule::<f64>::scaled_linear(50)?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = random_image(&mut rng, 3, 12, 12).map(|v| v * 0.5);
        let m = random_mask(&mut rng, 12, 12, 0.25);
        let p = ParsingMap::from_fn(12, 12, |i, j| [0u8, 1, 4, 17, 14, 11][(i / 2 + j / 4) % 6])?;
        let cfg = GuidanceConfig { t1: Some(20), radius: Some(1), seed: 9, ..Default::default() };
        let mut den = GaussianDenoiser::new(DiagonalGaussianModel::standard(3, 12, 12)?);
        let out = restore(&y, None, &m, &p, &mut den, &sched, &cfg)?;
        let mut ok = out.trace.len() == 50;
        let mut first_l3 = None;
        let mut leak = 0.0f64;
        for row in &out.trace {
            if row.t > 20 {
                ok &= row.l3 == 0.0 && row.grad_norms[2] == 0.0 && row.phase == Phase::Guided(Stage::Restoration);
            } else {
                ok &= row.phase == Phase::Guided(Stage::RestorationColor);
            }
            if row.l3 != 0.0 && first_l3.is_none() {
                first_l3 = Some(row.t);
            }
            leak += row.leaks.iter().sum::<f64>();
        }
        ok &= first_l3 == Some(20) && leak == 0.0;
        Ok((ok, format!("first nonzero l3 at t={first_l3:?} (want 20), total leak {leak:e}")))
    })
}

/// Two identical runs must agree bit for bit.
pub fn check_determinism() -> CheckResult {
    timed("determinism", || {
        let sched = NoiseSchedule::<f64>::scaled_linear(30)?;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = random_image(&mut rng, 3, 8, 8).map(|v| v * 0.5);
        let m = random_mask(&mut rng, 8, 8, 0.3);
        let p = ParsingMap::filled(8, 8, 1)?;
        let cfg = GuidanceConfig { seed: 77, repeats: 2, ..Default::default() };
        let run = || -> Result<_> {
            let mut den = GaussianDenoiser::new(DiagonalGaussianModel::standard(3, 8, 8)?);
            restore(&y, None, &m, &p, &mut den, &sched, &cfg)
        };
        let (a, b) = (run()?, run()?);
        let same = a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            && a.trace == b.trace
            && a.pseudo_trace == b.pseudo_trace;
        Ok((same, if same { "bitwise identical".into() } else { "runs differ".into() }))
    })
}

/// Size knobs of [`run_selftest`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelftestSizes {
    pub gradient_instances: usize,
    pub operator_instances: usize,
    pub color_instances: usize,
    pub moment_samples: usize,
}

impl Default for SelftestSizes {
    fn default() -> Self {
        Self {
            gradient_instances: 50,
            operator_instances: 100,
            color_instances: 40,
            moment_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

pub fn run_selftest(sizes: SelftestSizes, fault: FaultInjection) -> SelftestReport {
    SelftestReport {
        checks: vec![
            check_gradients(sizes.gradient_instances, fault),
            check_operators(sizes.operator_instances),
            check_color_transfer(sizes.color_instances),
            check_keystone(),
            check_moments(sizes.moment_samples),
            check_restore_invariants(),
            check_determinism(),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_selftest_passes() {
        let sizes = SelftestSizes {
            gradient_instances: 3,
            operator_instances: 6,
            color_instances: 4,
            moment_samples: 300,
        };
        let report = run_selftest(sizes, FaultInjection::default());
        assert!(report.all_passed(), "{report}");
    }

    #[test]
    fn flipped_fidelity_sign_is_caught() {
        let r = check_gradients(2, FaultInjection { flip_fidelity_sign: true });
        assert!(!r.passed, "{r}");
    }

    #[test]
    fn oracles_agree_on_spec_examples() {
        let y = ImageTensor::new(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(edge_magnitude_oracle(&y, &BinaryMask::ones(2, 2).unwrap()), vec![1.0, 0.0, 1.0, 0.0]);
        let c = BinaryMask::from_fn(3, 3, |i, j| i == 1 && j == 1).unwrap();
        assert_eq!(dilation_oracle(&c, 1).count(), 5);
    }
}
