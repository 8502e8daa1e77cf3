use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::TransferOptions;
use crate::regions::{default_radius, label_code, LabelSets};
use crate::tensor::MAX_LABEL;

pub const DEFAULT_WEAK_SCALE: f64 = 1e-3;
pub const DEFAULT_STRONG_SCALE: f64 = 3.5e-3;
pub const DEFAULT_STAGE_FRACTION: f64 = 0.4;

/// Where the fidelity target `y_c` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FidelitySource {
    /// The externally restored image when one is supplied, else the pseudo-label.
    #[default]
    Auto,
    /// Always the externally restored image (an error if none is supplied).
    Restored,
    /// Always the pseudo-label.
    PseudoLabel,
}

/// Every knob of the two-pass guided sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Weak scale used while generating the pseudo-label.
    pub s_w: f64,
    /// Strong scale used during restoration.
    pub s_s: f64,
    /// Stage boundary; `None` means `round(0.4 T)`.
    pub t1: Option<usize>,
    /// Inner repeats per timestep.
    pub repeats: usize,
    /// Mask-extension radius; `None` means `round(3 H / 512)`.
    pub radius: Option<usize>,
    pub labels: LabelSets,
    /// Recompute the color target every `K` steps; `None` keeps the one from `t = T1`.
    pub color_refresh: Option<usize>,
    pub color: TransferOptions,
    pub fidelity_source: FidelitySource,
    /// Per-label multipliers on the restoration gradient (label code -> factor).
    /// Keys may be written as codes (`"12"`) or label names (`"u_lip"`).
    #[serde(serialize_with = "ser_label_weights", deserialize_with = "de_label_weights")]
    pub label_weights: BTreeMap<u8, f64>,
    pub seed: u64,
    /// Keep an `x0_hat` snapshot every this many steps.
    pub snapshot_every: Option<usize>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s_w: DEFAULT_WEAK_SCALE,
            s_s: DEFAULT_STRONG_SCALE,
            t1: None,
            repeats: 1,
            radius: None,
            labels: LabelSets::default(),
            color_refresh: None,
            color: TransferOptions::default(),
            fidelity_source: FidelitySource::Auto,
            label_weights: BTreeMap::new(),
            seed: 0,
            snapshot_every: None,
        }
    }
}

impl GuidanceConfig {
    pub fn stage_boundary(&self, steps: usize) -> usize {
        self.t1
            .unwrap_or_else(|| (DEFAULT_STAGE_FRACTION * steps as f64).round() as usize)
    }

    pub fn radius_for(&self, height: usize) -> usize {
        self.radius.unwrap_or_else(|| default_radius(height))
    }

    /// Checks every field against a schedule of `steps` steps.
    ///
    /// Scales must be finite and nonnegative; `s_w < s_s` is not enforced so
    /// that zero-guidance and single-scale sweeps stay expressible.
    pub fn validate(&self, steps: usize) -> Result<()> {
        for (name, v) in [("s_w", self.s_w), ("s_s", self.s_s)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if let Some(t1) = self.t1 {
            if t1 > steps {
                return Err(Error::config("t1", format!("{t1} exceeds the step count {steps}")));
            }
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be at least 1"));
        }
        if self.color_refresh == Some(0) {
            return Err(Error::config("color_refresh", "must be at least 1 when set"));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::config("snapshot_every", "must be at least 1 when set"));
        }
        self.labels.validate()?;
        for (&code, &w) in &self.label_weights {
            if code > MAX_LABEL {
                return Err(Error::config(
                    "label_weights",
                    format!("label code {code} outside 0..={MAX_LABEL}"),
                ));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(
                    "label_weights",
                    format!("weight for label {code} must be finite and >= 0, got {w}"),
                ));
            }
        }
        Ok(())
    }
}

/// Parses a label given as a code or a name.
pub fn parse_label(key: &str) -> Option<u8> {
    key.trim().parse::<u8>().ok().or_else(|| label_code(key.trim()))
}

fn ser_label_weights<Ser: serde::Serializer>(m: &BTreeMap<u8, f64>, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        map.serialize_entry(&k.to_string(), v)?;
    }
    map.end()
}

fn de_label_weights<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<u8, f64>, D::Error> {
    let raw = BTreeMap::<String, f64>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| {
            parse_label(&k)
                .map(|c| (c, v))
                .ok_or_else(|| serde::de::Error::custom(format!("unknown label `{k}`")))
        })
        .collect()
}
