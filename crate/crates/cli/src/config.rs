//! Experiment configuration (TOML). Unknown keys are rejected and every seed is mandatory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ders_core::compress::CompressionSpec;
use ders_core::moe::{Activation, DenseDims};
use ders_core::train::{TaskSpec, TrainConfig};
use ders_core::upcycle::UpcycleConfig;

use crate::checkpoint::Dtype;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub d_hidden: usize,
    pub depth: usize,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// DeRS-SM sparse rates to upcycle and train with.
    #[serde(default)]
    pub sparse_rates: Vec<f64>,
    /// DeRS-LM ranks to upcycle and train with.
    #[serde(default)]
    pub ranks: Vec<usize>,
    /// Compression drop rates applied to the vanilla-upcycled, trained model.
    #[serde(default)]
    pub drop_rates: Vec<f64>,
    #[serde(default)]
    pub bit_widths: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub dtype: Dtype,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Fine-tuning task.
    pub task: TaskSpec,
    /// Pretraining task; the fine-tuning task when absent.
    #[serde(default)]
    pub pretrain_task: Option<TaskSpec>,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
    #[serde(default)]
    pub upcycle: Option<UpcycleConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub compress: Option<CompressionSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub output: OutputSection,
}

fn missing(section: &str) -> CliError {
    CliError::Config(format!("missing [{section}] section"))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks every present section before any compute happens.
    pub fn validate(&self) -> CliResult<()> {
        if let Some(m) = &self.model {
            if m.d_model == 0 || m.d_hidden == 0 {
                return Err(CliError::Config(
                    "model.d_model and model.d_hidden must be positive".into(),
                ));
            }
        }
        if let Some(p) = &self.pretrain_task {
            if p.d_in() != self.task.d_in() || p.d_out() != self.task.d_out() {
                return Err(CliError::Config(
                    "pretrain_task must have the same input and output widths as task".into(),
                ));
            }
        }
        for t in [&self.pretrain, &self.train].into_iter().flatten() {
            t.validate()?;
        }
        if let Some(u) = &self.upcycle {
            u.validate()?;
        }
        if let Some(c) = &self.compress {
            c.validate()?;
        }
        if let Some(s) = &self.sweep {
            for &p in s.sparse_rates.iter().chain(&s.drop_rates) {
                if !(0.0..1.0).contains(&p) {
                    return Err(CliError::Config(format!("sweep rate {p} outside [0, 1)")));
                }
            }
            if s.ranks.contains(&0) {
                return Err(CliError::Config("sweep rank 0".into()));
            }
            for &k in &s.bit_widths {
                ders_core::deltas::check_bit_width(k)
                    .map_err(|e| CliError::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Replaces every seed in the file with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.task.set_seed(seed);
        if let Some(p) = &mut self.pretrain_task {
            p.set_seed(seed);
        }
        if let Some(m) = &mut self.model {
            m.seed = seed;
        }
        for t in [&mut self.pretrain, &mut self.train].into_iter().flatten() {
            t.seed = seed;
        }
        if let Some(u) = &mut self.upcycle {
            u.seed = seed;
        }
        if let Some(c) = &mut self.compress {
            c.seed = seed;
        }
    }

    pub fn pretrain_task(&self) -> &TaskSpec {
        self.pretrain_task.as_ref().unwrap_or(&self.task)
    }

    pub fn model(&self) -> CliResult<&ModelSection> {
        self.model.as_ref().ok_or_else(|| missing("model"))
    }

    pub fn dims(&self) -> CliResult<DenseDims> {
        let m = self.model()?;
        Ok(DenseDims {
            d_in: self.task.d_in(),
            d_model: m.d_model,
            d_hidden: m.d_hidden,
            depth: m.depth,
            d_out: self.task.d_out(),
        })
    }

    pub fn pretrain(&self) -> CliResult<&TrainConfig> {
        self.pretrain.as_ref().ok_or_else(|| missing("pretrain"))
    }

    pub fn upcycle(&self) -> CliResult<&UpcycleConfig> {
        self.upcycle.as_ref().ok_or_else(|| missing("upcycle"))
    }

    pub fn train(&self) -> CliResult<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| missing("train"))
    }

    pub fn compress(&self) -> CliResult<&CompressionSpec> {
        self.compress.as_ref().ok_or_else(|| missing("compress"))
    }

    pub fn sweep(&self) -> CliResult<&SweepSection> {
        self.sweep.as_ref().ok_or_else(|| missing("sweep"))
    }
}
