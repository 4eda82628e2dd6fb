//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use wsfc_core::{CellGrouping, FunctionType, ModelConfig, TrainingConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain superposition: every weight fixed at one.
    Sfc,
    #[default]
    Wsfc,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Full,
    PretrainFreeze,
    RetrainWeights,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    /// Pretrained model for `retrain_weights`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Explicit pretraining corpus for `pretrain_freeze`.
    #[serde(default)]
    pub pretrain_corpus: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_ratios() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: default_ratios(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub batch_sizes: Vec<usize>,
    #[serde(default)]
    pub reg_coeffs: Vec<f64>,
}

fn default_grouping() -> String {
    "attitude".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub strategy: Strategy,
    /// Attitudes whose utterances form the pretraining subset.
    #[serde(default)]
    pub pretrain_attitudes: Vec<FunctionType>,
    #[serde(default)]
    pub model_seed: u64,
    /// Cell grouping of exported weight tables.
    #[serde(default = "default_grouping")]
    pub grouping: String,
    pub paths: Paths,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    /// Parses `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.corpus);
        for p in [
            &mut self.paths.ground_truth,
            &mut self.paths.checkpoint,
            &mut self.paths.pretrain_corpus,
            &mut self.paths.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn grouping(&self) -> anyhow::Result<CellGrouping> {
        self.grouping
            .parse()
            .map_err(|e: wsfc_core::Error| anyhow::anyhow!("{e}"))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.version != CONFIG_VERSION {
            bail!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            );
        }
        self.training.validate()?;
        self.grouping()?;
        if self.mode == Mode::Sfc && self.strategy != Strategy::Full {
            bail!("mode = \"sfc\" only supports strategy = \"full\"");
        }
        match self.strategy {
            Strategy::PretrainFreeze if self.pretrain_attitudes.is_empty() && self.paths.pretrain_corpus.is_none() => {
                bail!("strategy = \"pretrain_freeze\" needs pretrain_attitudes or paths.pretrain_corpus")
            }
            Strategy::RetrainWeights if self.paths.checkpoint.is_none() => {
                bail!("strategy = \"retrain_weights\" needs paths.checkpoint")
            }
            _ => {}
        }
        Ok(())
    }

    pub fn validate_sweep(&self) -> anyhow::Result<()> {
        if self.sweep.batch_sizes.is_empty() || self.sweep.reg_coeffs.is_empty() {
            bail!("sweep.batch_sizes and sweep.reg_coeffs must both be non-empty");
        }
        Ok(())
    }
}
