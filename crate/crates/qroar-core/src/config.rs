//! Run configuration: the JSON file driving every CLI command.
//!
//! Parsing is fail-closed (unknown keys are rejected) and canonicalization is
//! idempotent: parsing the canonical form and re-serializing it reproduces
//! the same bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{PiScheme, YARN_RAMP_HIGH, YARN_RAMP_LOW};
use crate::quant::{Grouping, QuantSpec};
use crate::rope::FrequencySchedule;
use crate::search::SearchConfig;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

fn default_format_version() -> u32 {
    CONFIG_FORMAT_VERSION
}

fn default_rope_base() -> f64 {
    10000.0
}

fn default_one() -> f64 {
    1.0
}

fn default_output_dir() -> String {
    "out".to_string()
}

fn default_lengths() -> Vec<usize> {
    vec![512, 1024, 2048, 4096]
}

fn default_l0() -> usize {
    512
}

fn default_group_size() -> GroupSize {
    GroupSize::Size(128)
}

fn default_tail_df() -> f64 {
    3.0
}

fn default_ramp_low() -> f64 {
    YARN_RAMP_LOW
}

fn default_ramp_high() -> f64 {
    YARN_RAMP_HIGH
}

/// Weight source: generated on the fly or loaded from tensor files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Synthetic {
        d_model: usize,
        n_heads: usize,
        d_h: usize,
        #[serde(default = "default_rope_base")]
        rope_base: f64,
        /// Geometric amplitude ramp across pair frequencies; the
        /// lowest-frequency pair's rows are this much larger than the
        /// highest-frequency pair's.
        #[serde(default = "default_one")]
        pair_gain: f64,
        #[serde(default)]
        row_outlier_frac: f64,
        #[serde(default = "default_one")]
        row_outlier_gain: f64,
    },
    Files {
        w_q: PathBuf,
        w_k: PathBuf,
        n_heads: usize,
        d_h: usize,
        #[serde(default = "default_rope_base")]
        rope_base: f64,
    },
}

impl ModelConfig {
    pub fn d_h(&self) -> usize {
        match self {
            ModelConfig::Synthetic { d_h, .. } | ModelConfig::Files { d_h, .. } => *d_h,
        }
    }

    pub fn rope_base(&self) -> f64 {
        match self {
            ModelConfig::Synthetic { rope_base, .. } | ModelConfig::Files { rope_base, .. } => {
                *rope_base
            }
        }
    }

    pub fn schedule(&self) -> Result<FrequencySchedule<f64>> {
        FrequencySchedule::new(self.d_h(), self.rope_base())
    }
}

/// Scheme selection; parameters are the constructor arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SchemeSpec {
    None,
    Linear {
        l0: u64,
        l: u64,
    },
    Ntk {
        alpha: f64,
    },
    Yarn {
        l0: u64,
        l: u64,
        #[serde(default = "default_ramp_low")]
        ramp_low: f64,
        #[serde(default = "default_ramp_high")]
        ramp_high: f64,
    },
    LongRope {
        scales: Vec<f64>,
    },
}

impl SchemeSpec {
    pub fn build(&self, sched: &FrequencySchedule<f64>) -> Result<PiScheme<f64>> {
        match self {
            SchemeSpec::None => Ok(PiScheme::identity()),
            SchemeSpec::Linear { l0, l } => PiScheme::linear(*l0, *l),
            SchemeSpec::Ntk { alpha } => PiScheme::ntk(sched, *alpha),
            SchemeSpec::Yarn { l0, l, ramp_low, ramp_high } => {
                PiScheme::yarn(sched, *l0, *l, *ramp_low, *ramp_high)
            }
            SchemeSpec::LongRope { scales } => PiScheme::longrope(scales.clone()),
        }
    }
}

/// Group size: a positive integer or the string `"per-tensor"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupSize {
    Size(usize),
    Tag(String),
}

impl GroupSize {
    pub fn to_grouping(&self) -> Result<Grouping> {
        match self {
            GroupSize::Size(0) => Err(Error::Config("group size must be positive".into())),
            GroupSize::Size(n) => Ok(Grouping::Size(*n)),
            GroupSize::Tag(s) if s == "per-tensor" => Ok(Grouping::PerTensor),
            GroupSize::Tag(s) => {
                Err(Error::Config(format!("group_size must be a count or \"per-tensor\", got {s:?}")))
            }
        }
    }
}

/// Activation quantizer settings, used by the diagnostics only; the main
/// pipeline is weight-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationQuantConfig {
    pub bits: u32,
    /// Uniform clip range applied to every pair dimension.
    pub clip: f64,
}

/// Weight quantizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub bits: u32,
    #[serde(default = "default_group_size")]
    pub group_size: GroupSize,
    #[serde(default)]
    pub activation: Option<ActivationQuantConfig>,
}

impl QuantConfig {
    pub fn weight_spec(&self) -> Result<QuantSpec<f64>> {
        let spec = QuantSpec::minmax(self.bits, self.group_size.to_grouping()?);
        spec.validate()?;
        Ok(spec)
    }

    pub fn activation_spec(&self, half_dim: usize) -> Result<Option<QuantSpec<f64>>> {
        match &self.activation {
            None => Ok(None),
            Some(act) => {
                let spec = QuantSpec::midrise(act.bits, vec![act.clip; half_dim]);
                spec.validate()?;
                Ok(Some(spec))
            }
        }
    }
}

/// Where dev-set hidden states come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DevsetSource {
    Synthetic {
        #[serde(default)]
        outlier_frac: f64,
        #[serde(default = "default_one")]
        outlier_gain: f64,
        #[serde(default = "default_tail_df")]
        tail_df: f64,
    },
    /// Load sequences from a manifest written by `gen-data`.
    Files { manifest: PathBuf },
}

impl Default for DevsetSource {
    fn default() -> Self {
        DevsetSource::Synthetic {
            outlier_frac: 0.05,
            outlier_gain: 5.0,
            tail_df: default_tail_df(),
        }
    }
}

/// Target lengths, their weights and the hidden-state source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DevsetConfig {
    #[serde(default = "default_lengths")]
    pub lengths: Vec<usize>,
    /// Training window; positions beyond it count as long-context.
    #[serde(default = "default_l0")]
    pub l0: usize,
    /// Per-length weights; proportional to length when omitted.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub source: DevsetSource,
}

/// Objective selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    #[default]
    LogitMse,
    AttnKl,
    /// Combine externally computed per-length scores (CSV of `length,score`
    /// rows) with the dev-set weights.
    ExternalScore { scores_csv: PathBuf },
}

/// The full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub model: ModelConfig,
    pub scheme: SchemeSpec,
    /// Weight quantizer; omit for a full-precision pipeline.
    #[serde(default)]
    pub quant: Option<QuantConfig>,
    #[serde(default)]
    pub search: SearchConfig,
    pub devset: DevsetConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        if cfg.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported config format version {}",
                cfg.format_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Self::from_json(&json)
    }

    /// Canonical serialized form. Parsing and re-canonicalizing reproduces
    /// the same bytes.
    pub fn canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Structural checks beyond parsing, including existence of referenced
    /// files.
    pub fn validate(&self) -> Result<()> {
        match &self.model {
            ModelConfig::Synthetic { d_model, n_heads, d_h, pair_gain, row_outlier_frac, row_outlier_gain, .. } => {
                if *d_model == 0 || *n_heads == 0 || *d_h < 2 || d_h % 2 != 0 {
                    return Err(Error::Config(format!(
                        "bad model dims: d_model={d_model}, n_heads={n_heads}, d_h={d_h}"
                    )));
                }
                if !(*pair_gain > 0.0) || !(*row_outlier_gain >= 1.0) || !(0.0..1.0).contains(row_outlier_frac) {
                    return Err(Error::Config("bad synthetic weight parameters".into()));
                }
            }
            ModelConfig::Files { w_q, w_k, n_heads, d_h, .. } => {
                if *n_heads == 0 || *d_h < 2 || d_h % 2 != 0 {
                    return Err(Error::Config(format!(
                        "bad model dims: n_heads={n_heads}, d_h={d_h}"
                    )));
                }
                for p in [w_q, w_k] {
                    if !p.exists() {
                        return Err(Error::Config(format!("weight file {p:?} does not exist")));
                    }
                }
            }
        }
        if self.devset.lengths.is_empty() {
            return Err(Error::Config("devset needs at least one length".into()));
        }
        if self.devset.lengths.iter().any(|l| *l == 0) {
            return Err(Error::Config("devset lengths must be positive".into()));
        }
        if self.devset.l0 == 0 {
            return Err(Error::Config("training window l0 must be positive".into()));
        }
        if let Some(w) = &self.devset.weights {
            if w.len() != self.devset.lengths.len() {
                return Err(Error::Config(format!(
                    "{} weights for {} lengths",
                    w.len(),
                    self.devset.lengths.len()
                )));
            }
        }
        if let DevsetSource::Files { manifest } = &self.devset.source {
            if !manifest.exists() {
                return Err(Error::Config(format!("manifest {manifest:?} does not exist")));
            }
        }
        if let ObjectiveConfig::ExternalScore { scores_csv } = &self.objective {
            if !scores_csv.exists() {
                return Err(Error::Config(format!("score file {scores_csv:?} does not exist")));
            }
        }
        if let Some(q) = &self.quant {
            q.weight_spec()?;
            q.activation_spec(self.model.d_h() / 2)?;
        }
        self.search.validate()?;
        Ok(())
    }
}
