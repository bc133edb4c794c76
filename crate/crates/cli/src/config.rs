//! Run configuration: one JSON document with a section per concern.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use canalseg::nets::NetConfig;
use canalseg::phantom::{PhantomSpec, Regime};
use canalseg::pipeline::PipelineConfig;
use canalseg::train::TrainingConfig;
use serde::{Deserialize, Serialize};

/// Default locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset root holding `manifest.json`.
    pub dataset: Option<PathBuf>,
    pub coarse_checkpoint: Option<PathBuf>,
    pub fine_checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    /// The last `test_count` cases form the test split.
    pub test_count: usize,
    pub base_seed: u64,
    /// Assigned round-robin by case index.
    pub regimes: Vec<Regime>,
    /// Template for every case; its seed and regime are overridden.
    pub phantom: PhantomSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 32,
            test_count: 8,
            base_seed: 1000,
            regimes: vec![Regime::TypeA, Regime::TypeB],
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Training seeds; one full ablation grid per seed.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub dataset: DatasetConfig,
    pub pipeline: PipelineConfig,
    pub coarse_net: NetConfig,
    pub fine_net: NetConfig,
    pub training: TrainingConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: PathsConfig::default(),
            dataset: DatasetConfig::default(),
            pipeline: PipelineConfig::default(),
            coarse_net: NetConfig::coarse_default(),
            fine_net: NetConfig::fine_default(),
            training: TrainingConfig::default(),
            ablation: AblationConfig { seeds: vec![0, 1, 2, 3, 4] },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate().context("pipeline")?;
        self.coarse_net.validate().context("coarse_net")?;
        self.fine_net.validate().context("fine_net")?;
        self.training.validate().context("training")?;
        self.dataset.phantom.validate().context("dataset.phantom")?;
        if self.coarse_net.input_dims != self.pipeline.coarse_input_dims {
            bail!(
                "coarse_net.input_dims {:?} differs from pipeline.coarse_input_dims {:?}",
                self.coarse_net.input_dims,
                self.pipeline.coarse_input_dims
            );
        }
        if self.fine_net.input_dims != self.pipeline.base_dims() {
            bail!("fine_net.input_dims {:?} differs from pipeline.fine_dims[0] {:?}", self.fine_net.input_dims, self.pipeline.base_dims());
        }
        if self.dataset.count == 0 || self.dataset.test_count > self.dataset.count || self.dataset.regimes.is_empty() {
            bail!("dataset needs count >= 1, test_count <= count and at least one regime");
        }
        if self.ablation.seeds.is_empty() {
            bail!("ablation.seeds is empty");
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("parsing run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; missing keys take their defaults
    /// and unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
