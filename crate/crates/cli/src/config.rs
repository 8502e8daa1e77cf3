//! Run configuration: one TOML file plus command-line overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use selguide_core::denoiser::Endpoint;
use selguide_core::sampler::{parse_label, FidelitySource, GuidanceConfig, SweepGrid};
use selguide_core::schedule::NoiseSchedule;
use selguide_core::{Error, Result, Scalar};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_TIMEOUT_SECS: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build<S: Scalar>(&self) -> Result<NoiseSchedule<S>> {
        if self.steps == 0 {
            return Err(Error::config("schedule.steps", "must be at least 1"));
        }
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
            .map_err(|e| Error::config("schedule", e.to_string()))
    }
}

/// Paths for one image to process. Images may be PNG or `.ssdt` tensors;
/// masks and parsing maps are PNG.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    /// Output subdirectory and row name in batch mode.
    pub name: Option<String>,
    pub degraded: Option<PathBuf>,
    pub restored: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub parsing: Option<PathBuf>,
    /// Skip the weak pass and restore from this pseudo-label.
    pub pseudo_label: Option<PathBuf>,
    /// Ground truth for the mse/psnr columns.
    pub reference: Option<PathBuf>,
    /// `.ssh1` saturation histogram for the saturation column.
    pub reference_hist: Option<PathBuf>,
}

impl InputPaths {
    fn paths_mut(&mut self) -> [(&'static str, &mut Option<PathBuf>); 7] {
        [
            ("degraded", &mut self.degraded),
            ("restored", &mut self.restored),
            ("mask", &mut self.mask),
            ("parsing", &mut self.parsing),
            ("pseudo_label", &mut self.pseudo_label),
            ("reference", &mut self.reference),
            ("reference_hist", &mut self.reference_hist),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub weight: f64,
    pub mean: PathBuf,
    pub var: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase", deny_unknown_fields)]
pub enum DenoiserConfig {
    /// Diagonal Gaussian prior; standard normal when no files are given.
    Gaussian {
        #[serde(default)]
        mean: Option<PathBuf>,
        #[serde(default)]
        var: Option<PathBuf>,
    },
    Gmm {
        #[serde(default)]
        components: Vec<ComponentConfig>,
    },
    Remote {
        #[serde(default)]
        endpoint: Option<String>,
        #[serde(default)]
        timeout_secs: Option<f64>,
    },
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig::Gaussian { mean: None, var: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Backend {
    Gaussian,
    Gmm,
    Remote,
}

impl DenoiserConfig {
    pub fn backend(&self) -> Backend {
        match self {
            DenoiserConfig::Gaussian { .. } => Backend::Gaussian,
            DenoiserConfig::Gmm { .. } => Backend::Gmm,
            DenoiserConfig::Remote { .. } => Backend::Remote,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.backend() {
            Backend::Gaussian => "gaussian",
            Backend::Gmm => "gmm",
            Backend::Remote => "remote",
        }
    }

    pub fn endpoint(&self) -> Result<(Endpoint, Option<Duration>)> {
        match self {
            DenoiserConfig::Remote { endpoint, timeout_secs } => {
                let ep = endpoint
                    .as_deref()
                    .ok_or_else(|| Error::config("denoiser.endpoint", "required for the remote backend"))?
                    .parse::<Endpoint>()
                    .map_err(|e| Error::config("denoiser.endpoint", e.to_string()))?;
                let secs = timeout_secs.unwrap_or(DEFAULT_TIMEOUT_SECS);
                let timeout = (secs > 0.0).then(|| Duration::from_secs_f64(secs));
                Ok((ep, timeout))
            }
            _ => Err(Error::config("denoiser.backend", "not a remote backend")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub s_w: Vec<f64>,
    pub s_s: Vec<f64>,
    pub t1: Vec<usize>,
}

impl SweepConfig {
    pub fn grid(&self) -> SweepGrid {
        SweepGrid {
            s_w: self.s_w.clone(),
            s_s: self.s_s.clone(),
            t1: self.t1.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    /// Overrides `guidance.seed` when set.
    pub seed: Option<u64>,
    pub precision: Precision,
    /// Worker threads for batch and sweep runs; all cores when unset.
    pub workers: Option<usize>,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub inputs: InputPaths,
    /// Several named inputs processed in parallel; replaces `inputs` when non-empty.
    pub batch: Vec<InputPaths>,
    pub denoiser: DenoiserConfig,
    pub sweep: SweepConfig,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    #[arg(long, short = 'o')]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    /// Weak guidance scale (pseudo-label pass).
    #[arg(long)]
    pub s_w: Option<f64>,
    /// Strong guidance scale (restoration pass).
    #[arg(long)]
    pub s_s: Option<f64>,
    /// Stage boundary; defaults to round(0.4 * steps).
    #[arg(long)]
    pub t1: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Mask-extension radius in pixels.
    #[arg(long)]
    pub radius: Option<usize>,
    #[arg(long)]
    pub color_refresh: Option<usize>,
    #[arg(long)]
    pub snapshot_every: Option<usize>,
    #[arg(long, value_parser = parse_fidelity_source)]
    pub fidelity_source: Option<FidelitySource>,
    /// Per-label gradient weight, `LABEL=WEIGHT` with a code or name (repeatable).
    #[arg(long = "label-weight", value_parser = parse_label_weight)]
    pub label_weights: Vec<(u8, f64)>,
    #[arg(long)]
    pub degraded: Option<PathBuf>,
    #[arg(long)]
    pub restored: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub parsing: Option<PathBuf>,
    #[arg(long)]
    pub pseudo_label: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub reference_hist: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<Backend>,
    /// `tcp://host:port` or `stdio:<command> [args...]`; implies the remote backend.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
}

fn parse_fidelity_source(s: &str) -> std::result::Result<FidelitySource, String> {
    match s {
        "auto" => Ok(FidelitySource::Auto),
        "restored" => Ok(FidelitySource::Restored),
        "pseudo-label" => Ok(FidelitySource::PseudoLabel),
        _ => Err(format!("`{s}` is not one of auto, restored, pseudo-label")),
    }
}

fn parse_label_weight(s: &str) -> std::result::Result<(u8, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("`{s}` is not LABEL=WEIGHT"))?;
    let code = parse_label(k).ok_or_else(|| format!("unknown label `{k}`"))?;
    let w = v.trim().parse::<f64>().map_err(|e| format!("weight `{v}`: {e}"))?;
    Ok((code, w))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|r| field_at(text, r.start))
                .unwrap_or_else(|| "config".to_string());
            Error::config(field, e.message().to_string())
        })
    }

    /// Reads `path`; relative paths inside it are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = dir.join(&*q);
                }
            }
        };
        fix(&mut self.output_dir);
        for input in std::iter::once(&mut self.inputs).chain(self.batch.iter_mut()) {
            for (_, p) in input.paths_mut() {
                fix(p);
            }
        }
        match &mut self.denoiser {
            DenoiserConfig::Gaussian { mean, var } => {
                fix(mean);
                fix(var);
            }
            DenoiserConfig::Gmm { components } => {
                for c in components {
                    if c.mean.is_relative() {
                        c.mean = dir.join(&c.mean);
                    }
                    if c.var.is_relative() {
                        c.var = dir.join(&c.var);
                    }
                }
            }
            DenoiserConfig::Remote { .. } => {}
        }
    }

    /// Loads the file named by `--config` (if any) and applies every flag.
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut cfg = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(o);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(self.output_dir, o.output_dir.clone().map(Some));
        set!(self.seed, o.seed.map(Some));
        set!(self.precision, o.precision);
        set!(self.workers, o.workers.map(Some));
        set!(self.schedule.steps, o.steps);
        set!(self.schedule.beta_start, o.beta_start);
        set!(self.schedule.beta_end, o.beta_end);
        let g = &mut self.guidance;
        set!(g.s_w, o.s_w);
        set!(g.s_s, o.s_s);
        set!(g.t1, o.t1.map(Some));
        set!(g.repeats, o.repeats);
        set!(g.radius, o.radius.map(Some));
        set!(g.color_refresh, o.color_refresh.map(Some));
        set!(g.snapshot_every, o.snapshot_every.map(Some));
        set!(g.fidelity_source, o.fidelity_source);
        for &(code, w) in &o.label_weights {
            g.label_weights.insert(code, w);
        }
        let i = &mut self.inputs;
        set!(i.degraded, o.degraded.clone().map(Some));
        set!(i.restored, o.restored.clone().map(Some));
        set!(i.mask, o.mask.clone().map(Some));
        set!(i.parsing, o.parsing.clone().map(Some));
        set!(i.pseudo_label, o.pseudo_label.clone().map(Some));
        set!(i.reference, o.reference.clone().map(Some));
        set!(i.reference_hist, o.reference_hist.clone().map(Some));

        let backend = o.backend.or(o.endpoint.as_ref().map(|_| Backend::Remote));
        if let Some(b) = backend {
            if b != self.denoiser.backend() {
                self.denoiser = match b {
                    Backend::Gaussian => DenoiserConfig::Gaussian { mean: None, var: None },
                    Backend::Gmm => DenoiserConfig::Gmm { components: Vec::new() },
                    Backend::Remote => DenoiserConfig::Remote { endpoint: None, timeout_secs: None },
                };
            }
        }
        if let DenoiserConfig::Remote { endpoint, timeout_secs } = &mut self.denoiser {
            set!(*endpoint, o.endpoint.clone().map(Some));
            set!(*timeout_secs, o.timeout_secs.map(Some));
        }
    }

    /// The guidance settings with the top-level seed folded in.
    pub fn effective_guidance(&self) -> GuidanceConfig {
        let mut g = self.guidance.clone();
        if let Some(s) = self.seed {
            g.seed = s;
        }
        g
    }

    /// The inputs to process, with names (`run` for a single unnamed input).
    pub fn jobs(&self) -> Vec<InputPaths> {
        if self.batch.is_empty() {
            let mut one = self.inputs.clone();
            one.name.get_or_insert_with(|| "run".to_string());
            vec![one]
        } else {
            self.batch.clone()
        }
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| Error::config("output_dir", "required (set it in the config or pass --output-dir)"))
    }

    /// Checks everything that can be checked without reading image data.
    pub fn validate(&self, need: Needs) -> Result<()> {
        self.output_dir()?;
        if self.workers == Some(0) {
            return Err(Error::config("workers", "must be at least 1 when set"));
        }
        self.schedule.build::<f64>()?;
        self.effective_guidance().validate(self.schedule.steps)?;
        self.validate_denoiser()?;
        let jobs = self.jobs();
        let mut names = BTreeSet::new();
        for (k, job) in jobs.iter().enumerate() {
            let prefix = if self.batch.is_empty() { "inputs".to_string() } else { format!("batch[{k}]") };
            let name = job
                .name
                .as_deref()
                .ok_or_else(|| Error::config(format!("{prefix}.name"), "required in batch mode"))?;
            if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == '/' || c == '\\') || name == "." || name == ".." {
                return Err(Error::config(format!("{prefix}.name"), format!("`{name}` is not a plain directory name")));
            }
            if !names.insert(name.to_string()) {
                return Err(Error::config(format!("{prefix}.name"), format!("duplicate name `{name}`")));
            }
            let mut job = job.clone();
            let needs_degraded = need.degraded && job.pseudo_label.is_none();
            for (field, p) in job.paths_mut() {
                let required = match field {
                    "degraded" => needs_degraded,
                    "mask" | "parsing" => need.regions,
                    _ => false,
                };
                match p {
                    None if required => {
                        return Err(Error::config(format!("{prefix}.{field}"), "required for this command"));
                    }
                    Some(path) if !path.is_file() => {
                        return Err(Error::config(
                            format!("{prefix}.{field}"),
                            format!("{} does not exist", path.display()),
                        ));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn validate_denoiser(&self) -> Result<()> {
        let exists = |field: &str, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::config(field.to_string(), format!("{} does not exist", p.display())))
            }
        };
        match &self.denoiser {
            DenoiserConfig::Gaussian { mean, var } => match (mean, var) {
                (None, None) => Ok(()),
                (Some(m), Some(v)) => {
                    exists("denoiser.mean", m)?;
                    exists("denoiser.var", v)
                }
                (None, Some(_)) => Err(Error::config("denoiser.mean", "required when denoiser.var is set")),
                (Some(_), None) => Err(Error::config("denoiser.var", "required when denoiser.mean is set")),
            },
            DenoiserConfig::Gmm { components } => {
                if components.is_empty() {
                    return Err(Error::config("denoiser.components", "the gmm backend needs at least one component"));
                }
                for (k, c) in components.iter().enumerate() {
                    if !(c.weight.is_finite() && c.weight > 0.0) {
                        return Err(Error::config(
                            format!("denoiser.components[{k}].weight"),
                            format!("must be finite and > 0, got {}", c.weight),
                        ));
                    }
                    exists(&format!("denoiser.components[{k}].mean"), &c.mean)?;
                    exists(&format!("denoiser.components[{k}].var"), &c.var)?;
                }
                Ok(())
            }
            DenoiserConfig::Remote { timeout_secs, .. } => {
                if let Some(t) = timeout_secs {
                    if !(t.is_finite() && *t >= 0.0) {
                        return Err(Error::config("denoiser.timeout_secs", format!("must be finite and >= 0, got {t}")));
                    }
                }
                self.denoiser.endpoint().map(|_| ())
            }
        }
    }
}

/// Which inputs a command requires.
#[derive(Debug, Clone, Copy)]
pub struct Needs {
    pub degraded: bool,
    /// Mask and parsing map.
    pub regions: bool,
}

/// Dotted key path of the innermost table entry that starts before `offset`.
fn field_at(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        if pos > offset {
            break;
        }
        let l = line.trim();
        if l.starts_with('[') {
            table = l.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = l.split_once('=') {
            if !l.starts_with('#') {
                key = k.trim().trim_matches('"').to_string();
            }
        }
        pos += line.len();
    }
    match (table.is_empty(), key.is_empty()) {
        (true, true) => "config".to_string(),
        (true, false) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = RunConfig::default();
        assert_eq!(c.schedule.steps, 1000);
        let g = c.effective_guidance();
        assert_eq!(g.stage_boundary(c.schedule.steps), 400);
        assert_eq!(g.s_s, 3.5e-3);
        assert_eq!(g.s_w, 1e-3);
        assert_eq!(c.denoiser.backend(), Backend::Gaussian);
    }

    #[test]
    fn parses_full_file() {
        let c = RunConfig::from_toml(
            r#"
output_dir = "out"
seed = 9
precision = "f32"

[schedule]
steps = 50

[guidance]
s_s = 0.01
t1 = 20
fidelity_source = "pseudo-label"
label_weights = { u_lip = 2.0, "13" = 0.5 }

[guidance.color]
space = "lab"

[inputs]
degraded = "lq.png"

[denoiser]
backend = "gmm"
components = [{ weight = 1.0, mean = "m.ssdt", var = "v.ssdt" }]
"#,
        )
        .unwrap();
        assert_eq!(c.precision, Precision::F32);
        assert_eq!(c.effective_guidance().seed, 9);
        assert_eq!(c.guidance.label_weights.get(&12), Some(&2.0));
        assert_eq!(c.guidance.label_weights.get(&13), Some(&0.5));
        assert_eq!(c.guidance.fidelity_source, FidelitySource::PseudoLabel);
        assert_eq!(c.denoiser.backend(), Backend::Gmm);
    }

    #[test]
    fn unknown_key_names_field() {
        let e = RunConfig::from_toml("[guidance]\ns_x = 1.0\n").unwrap_err();
        match e {
            Error::Config { field, .. } => assert_eq!(field, "guidance.s_x"),
            other => panic!("{other}"),
        }
        let e = RunConfig::from_toml("[schedule]\nsteps = \"many\"\n").unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "schedule.steps"), "{e}");
    }

    #[test]
    fn flags_win() {
        let mut c = RunConfig::from_toml("[guidance]\ns_s = 0.5\n[denoiser]\nbackend = \"gaussian\"\n").unwrap();
        let o = Overrides {
            s_s: Some(0.25),
            endpoint: Some("tcp://127.0.0.1:1".into()),
            label_weights: vec![(12, 3.0)],
            ..Default::default()
        };
        c.apply(&o);
        assert_eq!(c.guidance.s_s, 0.25);
        assert_eq!(c.guidance.label_weights.get(&12), Some(&3.0));
        assert_eq!(c.denoiser.backend(), Backend::Remote);
        assert!(c.denoiser.endpoint().is_ok());
    }

    #[test]
    fn label_weight_flag() {
        assert_eq!(parse_label_weight("u_lip=2").unwrap(), (12, 2.0));
        assert_eq!(parse_label_weight("13=0.5").unwrap(), (13, 0.5));
        assert!(parse_label_weight("lips=1").is_err());
        assert!(parse_label_weight("12").is_err());
    }

    #[test]
    fn validation_names_fields() {
        let field = |c: &RunConfig, need| match c.validate(need).unwrap_err() {
            Error::Config { field, .. } => field,
            other => panic!("{other}"),
        };
        let need = Needs { degraded: true, regions: true };
        let mut c = RunConfig::default();
        assert_eq!(field(&c, need), "output_dir");
        c.output_dir = Some("out".into());
        assert_eq!(field(&c, need), "inputs.degraded");
        c.guidance.t1 = Some(2000);
        assert_eq!(field(&c, need), "t1");
        c.guidance.t1 = None;
        c.denoiser = DenoiserConfig::Gmm { components: vec![] };
        assert_eq!(field(&c, need), "denoiser.components");
        c.denoiser = DenoiserConfig::Remote { endpoint: None, timeout_secs: None };
        assert_eq!(field(&c, need), "denoiser.endpoint");
        c.denoiser = DenoiserConfig::default();
        c.schedule.beta_end = 2.0;
        assert_eq!(field(&c, need), "schedule");
    }

    #[test]
    fn readme_schema_parses() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```toml\noutput_dir").expect("schema block") + "```toml\n".len();
        let block = &readme[start..start + readme[start..].find("```").unwrap()];
        let c = RunConfig::from_toml(block).unwrap();
        assert_eq!(c.guidance.label_weights.len(), 2);
        assert_eq!(c.batch.len(), 1);
        assert_eq!(c.sweep.s_s.len(), 3);
    }

    #[test]
    fn field_lookup() {
        let t = "a = 1\n[x]\nb = 2\n[y.z]\nc = 3\n";
        assert_eq!(field_at(t, 0), "a");
        assert_eq!(field_at(t, t.find("b =").unwrap()), "x.b");
        assert_eq!(field_at(t, t.find("c =").unwrap()), "y.z.c");
    }
}
