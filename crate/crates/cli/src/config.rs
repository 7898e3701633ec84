use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use speechbridge::backends::CorpusRequest;
use speechbridge::evaluation::EvalConfig;
use speechbridge::training::TrainConfig;
use speechbridge::workflows::{ProjectorConfig, ToySetupConfig};

/// Everything a command may read from `--config`. Relative paths are resolved
/// against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub toy: ToySetupConfig,
    pub projector: ProjectorConfig,
    pub train: TrainConfig,
    /// Schedule for `finetune` and the finetuning half of `bootstrap-matrix`;
    /// falls back to `train`.
    pub finetune: Option<TrainConfig>,
    pub eval: EvalConfig,
    pub max_duration_s: Option<f64>,
    pub data: DataPaths,
    pub sweep: SweepSection,
    pub bootstrap: BootstrapSection,
    pub synth: SynthSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub tests: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub budgets_hours: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    pub manifest: PathBuf,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub label: String,
    pub parts: Vec<PartSpec>,
    pub val: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub sources: Vec<SourceSpec>,
    pub target_pool: Option<PathBuf>,
    pub target_val: Option<PathBuf>,
    pub tests: Vec<PathBuf>,
    pub budgets_hours: Vec<f64>,
    pub seeds: Vec<u64>,
    pub scratch: bool,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        Self {
            sources: Vec::new(),
            target_pool: None,
            target_val: None,
            tests: Vec::new(),
            budgets_hours: Vec::new(),
            seeds: Vec::new(),
            scratch: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub corpora: Vec<CorpusRequest>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| crate::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve(&base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        d.train
            .iter_mut()
            .chain(d.val.iter_mut())
            .chain(d.tests.iter_mut())
            .for_each(fix);
        let b = &mut self.bootstrap;
        b.target_pool
            .iter_mut()
            .chain(b.target_val.iter_mut())
            .chain(b.tests.iter_mut())
            .for_each(fix);
        for s in &mut b.sources {
            fix(&mut s.val);
            s.parts.iter_mut().for_each(|p| fix(&mut p.manifest));
        }
    }

    pub fn finetune_schedule(&self) -> TrainConfig {
        self.finetune.clone().unwrap_or_else(|| self.train.clone())
    }

    pub fn max_duration(&self) -> f64 {
        self.max_duration_s.unwrap_or(30.0)
    }
}
