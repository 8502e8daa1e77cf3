use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use selguide_core::denoiser::server::{serve_stream, serve_tcp, ServeMode};
use selguide_core::denoiser::{
    DiagonalGaussianModel, Endpoint, GaussianDenoiser, GaussianMixtureModel, GmmDenoiser, RemoteDenoiser,
};
use selguide_core::io::{load_histogram, load_image, load_mask, load_parsing_map, load_tensor, save_image, save_tensor};
use selguide_core::metrics::{compute_row, metrics_table, mse_psnr, saturation_histogram, MetricInputs, MetricRow};
use selguide_core::regions::RegionMasks;
use selguide_core::sampler::{
    generate_pseudo_label, restore, restore_from_pseudo_label, run_ablation_sweep, sweep_table, trace_table,
    SweepInput,
};
use selguide_core::selftest::{run_selftest, FaultInjection, SelftestReport, SelftestSizes};
use selguide_core::table::TextTable;
use selguide_core::{Error, ImageTensor, Result, Scalar};

use crate::config::{DenoiserConfig, InputPaths, Needs, Precision, RunConfig};

pub type BoxedDenoiser<S> = Box<dyn selguide_core::denoiser::Denoiser<S> + Send>;

/// Loads an image from a PNG or an `.ssdt` tensor, by extension.
pub fn load_any<S: Scalar>(path: &Path) -> Result<ImageTensor<S>> {
    let is_tensor = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ssdt"));
    if is_tensor {
        load_tensor(path)
    } else {
        load_image(path)
    }
}

/// Denoiser source prepared once and opened per worker.
pub enum DenoiserFactory<S> {
    StandardGaussian,
    Gaussian(DiagonalGaussianModel<S>),
    Gmm(GaussianMixtureModel<S>),
    Remote(Endpoint, Option<std::time::Duration>),
}

impl<S: Scalar> DenoiserFactory<S> {
    pub fn prepare(cfg: &DenoiserConfig) -> Result<Self> {
        Ok(match cfg {
            DenoiserConfig::Gaussian { mean: Some(m), var: Some(v) } => {
                DenoiserFactory::Gaussian(DiagonalGaussianModel::new(load_tensor(m)?, load_tensor(v)?)?)
            }
            DenoiserConfig::Gaussian { .. } => DenoiserFactory::StandardGaussian,
            DenoiserConfig::Gmm { components } => {
                let comps = components
                    .iter()
                    .map(|c| Ok((c.weight, DiagonalGaussianModel::new(load_tensor(&c.mean)?, load_tensor(&c.var)?)?)))
                    .collect::<Result<Vec<_>>>()?;
                DenoiserFactory::Gmm(GaussianMixtureModel::new(comps)?)
            }
            DenoiserConfig::Remote { .. } => {
                let (ep, timeout) = cfg.endpoint()?;
                DenoiserFactory::Remote(ep, timeout)
            }
        })
    }

    /// A fresh denoiser for images of `shape`; remote backends get their own connection.
    pub fn open(&self, shape: (usize, usize, usize)) -> Result<BoxedDenoiser<S>> {
        Ok(match self {
            DenoiserFactory::StandardGaussian => {
                let (c, h, w) = shape;
                Box::new(GaussianDenoiser::new(DiagonalGaussianModel::standard(c, h, w)?))
            }
            DenoiserFactory::Gaussian(m) => Box::new(GaussianDenoiser::new(m.clone())),
            DenoiserFactory::Gmm(m) => Box::new(GmmDenoiser::new(m.clone())),
            DenoiserFactory::Remote(ep, timeout) => Box::new(RemoteDenoiser::connect(ep, *timeout)?),
        })
    }
}

fn write_table(path: &Path, table: &TextTable) -> Result<()> {
    fs::write(path, table.render())?;
    Ok(())
}

fn job_dir(cfg: &RunConfig, job: &InputPaths) -> Result<PathBuf> {
    let root = cfg.output_dir()?;
    Ok(if cfg.batch.is_empty() {
        root.to_path_buf()
    } else {
        root.join(job.name.as_deref().unwrap_or("run"))
    })
}

fn job_name(job: &InputPaths) -> &str {
    job.name.as_deref().unwrap_or("run")
}

fn write_snapshots<S: Scalar>(dir: &Path, snaps: &[(usize, ImageTensor<S>)]) -> Result<()> {
    if snaps.is_empty() {
        return Ok(());
    }
    let sub = dir.join("snapshots");
    fs::create_dir_all(&sub)?;
    for (t, img) in snaps {
        save_tensor(img, sub.join(format!("x0_t{t:04}.ssdt")))?;
    }
    Ok(())
}

/// Runs `f` on every job, in parallel when there is more than one, and
/// writes the collected metric rows to `metrics.txt` in the output root.
fn run_jobs<F>(cfg: &RunConfig, f: F) -> Result<Vec<MetricRow>>
where
    F: Fn(&InputPaths, &Path) -> Result<MetricRow> + Sync,
{
    let jobs = cfg.jobs();
    let root = cfg.output_dir()?;
    fs::create_dir_all(root)?;
    let work = || -> Result<Vec<MetricRow>> {
        jobs.par_iter()
            .map(|job| {
                let dir = job_dir(cfg, job)?;
                fs::create_dir_all(&dir)?;
                f(job, &dir)
            })
            .collect()
    };
    let rows = with_pool(cfg.workers, work)?;
    write_table(&root.join("metrics.txt"), &metrics_table(&rows))?;
    Ok(rows)
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config("workers", e.to_string()))?
            .install(f),
        None => f(),
    }
}

fn base_meta(cfg: &RunConfig) -> Vec<(String, String)> {
    vec![
        ("backend".to_string(), cfg.denoiser.name().to_string()),
        (
            "precision".to_string(),
            match cfg.precision {
                Precision::F64 => "f64",
                Precision::F32 => "f32",
            }
            .to_string(),
        ),
        ("beta_start".to_string(), cfg.schedule.beta_start.to_string()),
        ("beta_end".to_string(), cfg.schedule.beta_end.to_string()),
    ]
}

fn load_hist(job: &InputPaths) -> Result<Option<Vec<f64>>> {
    job.reference_hist.as_deref().map(load_histogram).transpose()
}

pub fn pseudo_label(cfg: &RunConfig) -> Result<Vec<MetricRow>> {
    cfg.validate(Needs { degraded: true, regions: false })?;
    match cfg.precision {
        Precision::F64 => pseudo_label_as::<f64>(cfg),
        Precision::F32 => pseudo_label_as::<f32>(cfg),
    }
}

fn pseudo_label_as<S: Scalar>(cfg: &RunConfig) -> Result<Vec<MetricRow>> {
    let sched = cfg.schedule.build::<S>()?;
    let g = cfg.effective_guidance();
    let factory = DenoiserFactory::<S>::prepare(&cfg.denoiser)?;
    run_jobs(cfg, |job, dir| {
        let path = job.degraded.as_deref().ok_or_else(|| Error::config("inputs.degraded", "required"))?;
        let y0 = load_any::<S>(path)?;
        let reference = job.reference.as_deref().map(load_any::<S>).transpose()?;
        let hist = load_hist(job)?;
        let mut den = factory.open(y0.shape())?;
        let out = generate_pseudo_label(&y0, &mut den, &sched, &g)?;
        save_image(&out.image, dir.join("pseudo_label.png"))?;
        save_tensor(&out.image, dir.join("pseudo_label.ssdt"))?;
        let mut meta = vec![
            ("steps".to_string(), sched.steps().to_string()),
            ("s_w".to_string(), g.s_w.to_string()),
            ("repeats".to_string(), g.repeats.to_string()),
            ("seed".to_string(), g.seed.to_string()),
        ];
        meta.extend(base_meta(cfg));
        write_table(&dir.join("pseudo_trace.txt"), &trace_table(&meta, &out.trace))?;
        write_snapshots(dir, &out.snapshots)?;
        compute_row(
            job_name(job),
            MetricInputs {
                image: &out.image,
                parsing: None,
                reference: Some(reference.as_ref().unwrap_or(&y0)),
                reference_hist: hist.as_deref(),
                region: None,
            },
        )
    })
}

pub fn restore_cmd(cfg: &RunConfig) -> Result<Vec<MetricRow>> {
    cfg.validate(Needs { degraded: true, regions: true })?;
    match cfg.precision {
        Precision::F64 => restore_as::<f64>(cfg),
        Precision::F32 => restore_as::<f32>(cfg),
    }
}

fn restore_as<S: Scalar>(cfg: &RunConfig) -> Result<Vec<MetricRow>> {
    let sched = cfg.schedule.build::<S>()?;
    let g = cfg.effective_guidance();
    let factory = DenoiserFactory::<S>::prepare(&cfg.denoiser)?;
    run_jobs(cfg, |job, dir| {
        let required = |p: &Option<PathBuf>, field: &str| {
            p.clone().ok_or_else(|| Error::config(format!("inputs.{field}"), "required"))
        };
        let scratch = load_mask(required(&job.mask, "mask")?)?;
        let parsing = load_parsing_map(required(&job.parsing, "parsing")?)?;
        let restored = job.restored.as_deref().map(load_any::<S>).transpose()?;
        let reference = job.reference.as_deref().map(load_any::<S>).transpose()?;
        let hist = load_hist(job)?;
        let given_label = job.pseudo_label.as_deref().map(load_any::<S>).transpose()?;
        let degraded = job.degraded.as_deref().map(load_any::<S>).transpose()?;
        let shape = given_label.as_ref().or(degraded.as_ref()).map(ImageTensor::shape);
        let shape = shape.ok_or_else(|| Error::config("inputs.degraded", "required"))?;
        let mut den = factory.open(shape)?;
        let out = match (&given_label, &degraded) {
            (Some(yp), _) => restore_from_pseudo_label(yp, restored.as_ref(), &scratch, &parsing, &mut den, &sched, &g)?,
            (None, Some(y0)) => restore(y0, restored.as_ref(), &scratch, &parsing, &mut den, &sched, &g)?,
            (None, None) => unreachable!("shape came from one of them"),
        };
        save_image(&out.image, dir.join("restored.png"))?;
        save_tensor(&out.image, dir.join("restored.ssdt"))?;
        let mut meta = out.meta.clone();
        meta.extend(base_meta(cfg));
        write_table(&dir.join("trace.txt"), &trace_table(&meta, &out.trace))?;
        if given_label.is_none() {
            save_image(&out.pseudo_label, dir.join("pseudo_label.png"))?;
            save_tensor(&out.pseudo_label, dir.join("pseudo_label.ssdt"))?;
            write_table(&dir.join("pseudo_trace.txt"), &trace_table(&meta, &out.pseudo_trace))?;
        }
        write_snapshots(dir, &out.snapshots)?;

        let masks = RegionMasks::build(&scratch, &parsing, &g.labels, g.radius_for(shape.1))?;
        let target = reference.as_ref().or(degraded.as_ref()).unwrap_or(&out.pseudo_label);
        let mut row = compute_row(
            job_name(job),
            MetricInputs {
                image: &out.image,
                parsing: None,
                reference: None,
                reference_hist: hist.as_deref(),
                region: Some(&masks.guide_ext),
            },
        )?;
        if masks.valid.count() > 0 {
            let (mse, psnr) = mse_psnr(&out.image, target, Some(&masks.valid))?;
            row.mse = Some(mse);
            row.psnr = Some(psnr);
        }
        Ok(row)
    })
}

pub fn sweep_cmd(cfg: &RunConfig) -> Result<TextTable> {
    cfg.validate(Needs { degraded: true, regions: true })?;
    match cfg.precision {
        Precision::F64 => sweep_as::<f64>(cfg),
        Precision::F32 => sweep_as::<f32>(cfg),
    }
}

fn sweep_as<S: Scalar>(cfg: &RunConfig) -> Result<TextTable> {
    let sched = cfg.schedule.build::<S>()?;
    let g = cfg.effective_guidance();
    let grid = cfg.sweep.grid();
    for (k, &t1) in grid.t1.iter().enumerate() {
        if t1 > sched.steps() {
            return Err(Error::config(format!("sweep.t1[{k}]"), format!("{t1} exceeds the step count {}", sched.steps())));
        }
    }
    for (field, values) in [("sweep.s_w", &grid.s_w), ("sweep.s_s", &grid.s_s)] {
        for (k, v) in values.iter().enumerate() {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::config(format!("{field}[{k}]"), format!("must be finite and >= 0, got {v}")));
            }
        }
    }
    let factory = DenoiserFactory::<S>::prepare(&cfg.denoiser)?;
    let root = cfg.output_dir()?;
    fs::create_dir_all(root)?;
    let mut rows = Vec::new();
    for job in cfg.jobs() {
        let degraded = load_any::<S>(job.degraded.as_deref().ok_or_else(|| Error::config("inputs.degraded", "required"))?)?;
        let input = SweepInput {
            name: job_name(&job).to_string(),
            restored: job.restored.as_deref().map(load_any::<S>).transpose()?,
            scratch: load_mask(job.mask.as_deref().ok_or_else(|| Error::config("inputs.mask", "required"))?)?,
            parsing: load_parsing_map(job.parsing.as_deref().ok_or_else(|| Error::config("inputs.parsing", "required"))?)?,
            reference: job.reference.as_deref().map(load_any::<S>).transpose()?,
            reference_hist: load_hist(&job)?,
            degraded,
        };
        let shape = input.degraded.shape();
        let part = with_pool(cfg.workers, || {
            run_ablation_sweep(std::slice::from_ref(&input), &grid, &g, &sched, || factory.open(shape))
        })?;
        rows.extend(part);
    }
    let mut table = sweep_table(&rows);
    table.meta = base_meta(cfg);
    table.meta.insert(0, ("steps".to_string(), sched.steps().to_string()));
    table.meta.insert(1, ("seed".to_string(), g.seed.to_string()));
    write_table(&root.join("sweep.txt"), &table)?;
    Ok(table)
}

/// One row of a metrics manifest. Relative paths are taken from the manifest's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricEntry {
    pub name: String,
    pub image: PathBuf,
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub parsing: Option<PathBuf>,
    #[serde(default)]
    pub reference_parsing: Option<PathBuf>,
    /// PNG mask restricting edge variation and mse.
    #[serde(default)]
    pub region: Option<PathBuf>,
    #[serde(default)]
    pub reference_hist: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub entry: Vec<MetricEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("manifest", format!("{}: {e}", path.display())))?;
        let mut m: Manifest = toml::from_str(&text).map_err(|e| Error::config("manifest", e.message().to_string()))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for e in &mut m.entry {
            for p in [
                Some(&mut e.image),
                e.reference.as_mut(),
                e.parsing.as_mut(),
                e.reference_parsing.as_mut(),
                e.region.as_mut(),
                e.reference_hist.as_mut(),
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for (k, e) in self.entry.iter().enumerate() {
            let field = |f: &str| format!("entry[{k}].{f}");
            if e.name.is_empty() || e.name.contains(char::is_whitespace) {
                return Err(Error::config(field("name"), "must be one non-empty word"));
            }
            if !names.insert(e.name.as_str()) {
                return Err(Error::config(field("name"), format!("duplicate name `{}`", e.name)));
            }
            if e.parsing.is_some() != e.reference_parsing.is_some() {
                return Err(Error::config(field("reference_parsing"), "parsing and reference_parsing go together"));
            }
            for (f, p) in [
                ("image", Some(&e.image)),
                ("reference", e.reference.as_ref()),
                ("parsing", e.parsing.as_ref()),
                ("reference_parsing", e.reference_parsing.as_ref()),
                ("region", e.region.as_ref()),
                ("reference_hist", e.reference_hist.as_ref()),
            ] {
                if let Some(p) = p {
                    if !p.is_file() {
                        return Err(Error::config(field(f), format!("{} does not exist", p.display())));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One metric row per manifest entry. Without an explicit histogram, an RGB
/// reference supplies the saturation reference.
pub fn metrics_cmd(manifest: &Manifest) -> Result<TextTable> {
    manifest.validate()?;
    let rows = manifest
        .entry
        .iter()
        .map(|e| {
            let img = load_any::<f64>(&e.image)?;
            let reference = e.reference.as_deref().map(load_any::<f64>).transpose()?;
            let parsing = match (&e.parsing, &e.reference_parsing) {
                (Some(a), Some(b)) => Some((load_parsing_map(a)?, load_parsing_map(b)?)),
                _ => None,
            };
            let region = e.region.as_deref().map(load_mask).transpose()?;
            let hist = match (&e.reference_hist, &reference) {
                (Some(p), _) => Some(load_histogram(p)?),
                (None, Some(r)) if r.channels() == 3 => Some(saturation_histogram(r)?),
                _ => None,
            };
            compute_row(
                &e.name,
                MetricInputs {
                    image: &img,
                    parsing: parsing.as_ref().map(|(a, b)| (a, b)),
                    reference: reference.as_ref(),
                    reference_hist: hist.as_deref(),
                    region: region.as_ref(),
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics_table(&rows))
}

pub fn selftest_cmd(quick: bool, fault: FaultInjection) -> SelftestReport {
    let sizes = if quick {
        SelftestSizes {
            gradient_instances: 10,
            operator_instances: 20,
            color_instances: 10,
            moment_samples: 1000,
        }
    } else {
        SelftestSizes::default()
    };
    run_selftest(sizes, fault)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ServeKind {
    Echo,
    Gaussian,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ServeArgs {
    #[arg(long, value_enum, default_value = "echo")]
    pub mode: ServeKind,
    /// Prior mean tensor (gaussian mode).
    #[arg(long)]
    pub mean: Option<PathBuf>,
    /// Prior variance tensor (gaussian mode).
    #[arg(long)]
    pub var: Option<PathBuf>,
    #[arg(long, default_value_t = crate::config::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = crate::config::DEFAULT_BETA_START)]
    pub beta_start: f64,
    #[arg(long, default_value_t = crate::config::DEFAULT_BETA_END)]
    pub beta_end: f64,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
    /// `host:port` to listen on; stdin/stdout when absent.
    #[arg(long)]
    pub listen: Option<String>,
}

pub fn serve_cmd(args: &ServeArgs) -> Result<()> {
    match args.precision {
        Precision::F64 => serve_as::<f64>(args),
        Precision::F32 => serve_as::<f32>(args),
    }
}

fn serve_as<S: Scalar>(args: &ServeArgs) -> Result<()> {
    let mode = match args.mode {
        ServeKind::Echo => ServeMode::Echo,
        ServeKind::Gaussian => {
            let mean = args.mean.as_ref().ok_or_else(|| Error::config("mean", "required in gaussian mode"))?;
            let var = args.var.as_ref().ok_or_else(|| Error::config("var", "required in gaussian mode"))?;
            ServeMode::Gaussian {
                model: DiagonalGaussianModel::<S>::new(load_tensor(mean)?, load_tensor(var)?)?,
                schedule: crate::config::ScheduleConfig {
                    steps: args.steps,
                    beta_start: args.beta_start,
                    beta_end: args.beta_end,
                }
                .build()?,
            }
        }
    };
    match &args.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            eprintln!("listening on {}", listener.local_addr()?);
            serve_tcp(listener, mode)
        }
        None => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            let mut r = stdin.lock();
            let mut w = std::io::BufWriter::new(stdout.lock());
            serve_stream(&mut r, &mut w, &mode)
        }
    }
}
