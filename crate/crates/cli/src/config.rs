//! Declarative experiment description. One file drives dataset generation,
//! training grids, noise sweeps, rollouts, and sampling; TOML and JSON are
//! both accepted through the same schema, and unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use stpt_core::factor_gen::{AttrMode, GenConfig};
use stpt_core::io::fnv1a_64;
use stpt_core::latent_ar::ArConfig;
use stpt_core::model::ModelConfig;
use stpt_core::priors::PriorSpec;
use stpt_core::synth::{SynthSpec, SynthTask};
use stpt_core::train::{forecaster_model, TrainConfig, Variant, SEEDS3};

/// Model class or prior ablation selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RunVariant {
    #[default]
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "+period")]
    Period,
    #[serde(rename = "+trend")]
    Trend,
    #[serde(rename = "+lag")]
    Lag,
    #[serde(rename = "+indep")]
    Indep,
    #[serde(rename = "pt-fg")]
    PtFg,
    #[serde(rename = "latent-ar")]
    LatentAr,
}

impl RunVariant {
    pub fn label(self) -> &'static str {
        match self {
            RunVariant::Vanilla => "vanilla",
            RunVariant::Period => "+period",
            RunVariant::Trend => "+trend",
            RunVariant::Lag => "+lag",
            RunVariant::Indep => "+indep",
            RunVariant::PtFg => "pt-fg",
            RunVariant::LatentAr => "latent-ar",
        }
    }

    /// Path-safe spelling for output directory names.
    pub fn slug(self) -> &'static str {
        match self {
            RunVariant::Vanilla => "vanilla",
            RunVariant::Period => "period",
            RunVariant::Trend => "trend",
            RunVariant::Lag => "lag",
            RunVariant::Indep => "indep",
            RunVariant::PtFg => "ptfg",
            RunVariant::LatentAr => "latentar",
        }
    }

    /// The encoder-side prior ablation this maps to, when it is one.
    pub fn as_prior(self) -> Option<Variant> {
        match self {
            RunVariant::Vanilla => Some(Variant::Vanilla),
            RunVariant::Period => Some(Variant::Period),
            RunVariant::Trend => Some(Variant::Trend),
            RunVariant::Lag => Some(Variant::Lag),
            RunVariant::Indep => Some(Variant::Indep),
            RunVariant::PtFg | RunVariant::LatentAr => None,
        }
    }
}

/// Optional width overrides applied over the task-shaped default model.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub patch_len: Option<usize>,
    pub d: Option<usize>,
    pub d_ff: Option<usize>,
    pub n_heads: Option<usize>,
    pub k_iters: Option<usize>,
}

impl ModelSection {
    pub fn apply(&self, mut base: ModelConfig, seq_len: usize) -> ModelConfig {
        if let Some(p) = self.patch_len {
            base.patch_len = p;
            base.n_patches = seq_len / p.max(1);
        }
        if let Some(v) = self.d {
            base.d = v;
        }
        if let Some(v) = self.d_ff {
            base.d_ff = v;
        }
        if let Some(v) = self.n_heads {
            base.n_heads = v;
        }
        if let Some(v) = self.k_iters {
            base.k_iters = v;
        }
        base
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: SynthTask,
    #[serde(default)]
    pub variant: RunVariant,
    #[serde(default = "d_n_samples")]
    pub n_samples: usize,
    #[serde(default = "d_dataset_seed")]
    pub dataset_seed: u64,
    /// Overrides the task-intrinsic noise floor when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_noise: Option<f64>,
    /// Added-noise grid for sweep-noise.
    #[serde(default = "d_sigmas")]
    pub sigmas: Vec<f64>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelSection,
    /// Explicit prior structure; derived from dataset ground truth when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<GenConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ar: Option<ArConfig>,
    #[serde(default = "d_attr_mode")]
    pub attr_mode: AttrMode,
    #[serde(default = "d_attr_dim")]
    pub attr_dim: usize,
    /// Attribute levels for gen-conditional; all zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn d_n_samples() -> usize {
    150
}
fn d_dataset_seed() -> u64 {
    42
}
fn d_sigmas() -> Vec<f64> {
    vec![0.1, 0.4, 0.8]
}
fn d_seeds() -> Vec<u64> {
    SEEDS3.to_vec()
}
fn d_attr_mode() -> AttrMode {
    AttrMode::Independent
}
fn d_attr_dim() -> usize {
    8
}

impl ExperimentConfig {
    /// Parses TOML or JSON by extension; unknown extensions try both.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let parsed: Result<Self> = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}", e)),
            Some("toml") => toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}", e)),
            _ => toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}", e)).or_else(|te| {
                serde_json::from_str(&text)
                    .map_err(|je| anyhow::anyhow!("not valid TOML ({}) or JSON ({})", te, je))
            }),
        };
        let cfg =
            parsed.with_context(|| format!("config schema error in {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            bail!("n_samples must be positive");
        }
        if self.seeds.is_empty() {
            bail!("need at least one seed");
        }
        if let Some(b) = self.base_noise {
            if !(b.is_finite() && b >= 0.0) {
                bail!("base_noise must be finite and non-negative");
            }
        }
        if self.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            bail!("sigmas must be finite and non-negative");
        }
        if self.attr_dim == 0 {
            bail!("attr_dim must be positive");
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let mut spec = SynthSpec::new(self.task, self.n_samples, self.dataset_seed);
        spec.base_noise = self.base_noise;
        spec
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = forecaster_model(self.task.n_channels());
        self.model.apply(base, self.train.seq_len)
    }

    /// Stable content hash of the resolved config, defaults included.
    pub fn hash(&self) -> u64 {
        fnv1a_64(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn task_slug(&self) -> &'static str {
        match self.task {
            SynthTask::Lag => "lag",
            SynthTask::Periodicity => "periodicity",
            SynthTask::Trend => "trend",
        }
    }

    /// Content-addressed run directory under `root`.
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(format!(
            "{}-{}-{:016x}",
            self.task_slug(),
            self.variant.slug(),
            self.hash()
        ))
    }
}
