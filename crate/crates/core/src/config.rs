//! Run configuration files shared by the command-line subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::evaluation;
use crate::hash;
use crate::model::Architecture;
use crate::perturbation::PerturbationSpec;
use crate::training::TrainConfig;

/// Environment variable naming the directory relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "METAPATCH_OUTPUT_ROOT";

fn default_jobs() -> usize {
    1
}

fn default_steps() -> usize {
    500
}

fn default_attack_batch() -> usize {
    32
}

/// Attack-suite section. Without an explicit grid, the default grid is built
/// with `steps` and `batch_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default)]
    pub grid: Option<Vec<AttackConfig>>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_attack_batch")]
    pub batch_size: usize,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    /// Write a PPM image of every resulting patch.
    #[serde(default)]
    pub export_ppm: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            grid: None,
            steps: default_steps(),
            batch_size: default_attack_batch(),
            jobs: default_jobs(),
            export_ppm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub architecture: Architecture,
    pub perturbation: PerturbationSpec,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub attack: AttackSection,
    /// Name used for this model in comparison tables; defaults to the training method.
    #[serde(default)]
    pub label: Option<String>,
    /// Output directory; relative paths resolve against the output root.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(origin: &Path, text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(path, &text)
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        let image = self.architecture.input_shape();
        self.perturbation.validate(image)?;
        match &self.data {
            DataSource::Synthetic {
                classes, resolution, ..
            } => {
                if *classes != self.architecture.num_classes {
                    return Err(Error::Config(format!(
                        "data has {classes} classes but the architecture has {}",
                        self.architecture.num_classes
                    )));
                }
                if *resolution != self.architecture.input_size {
                    return Err(Error::Config(format!(
                        "data resolution {resolution} differs from architecture input size {}",
                        self.architecture.input_size
                    )));
                }
            }
            DataSource::Folder { resolution, .. } => {
                if *resolution != self.architecture.input_size {
                    return Err(Error::Config(format!(
                        "data resolution {resolution} differs from architecture input size {}",
                        self.architecture.input_size
                    )));
                }
            }
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if self.attack.jobs == 0 {
            return Err(Error::Config("attack.jobs must be at least 1".into()));
        }
        if self.attack.steps == 0 || self.attack.batch_size == 0 {
            return Err(Error::Config("attack.steps and attack.batch_size must be positive".into()));
        }
        match &self.attack.grid {
            Some(g) if g.is_empty() => return Err(Error::Config("attack.grid is empty".into())),
            Some(g) => g.iter().try_for_each(AttackConfig::validate)?,
            None => {}
        }
        Ok(())
    }

    /// The attack grid: explicit, or the default built from `steps` and `batch_size`.
    pub fn grid(&self) -> Vec<AttackConfig> {
        self.attack.grid.clone().unwrap_or_else(|| {
            evaluation::desk_grid(
                &self.perturbation,
                self.architecture.input_shape(),
                self.attack.steps,
                self.attack.batch_size,
            )
        })
    }

    /// Provenance hash. Ignores where outputs go, whether patches are
    /// exported and how many threads run.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = None;
        c.attack.jobs = 1;
        c.attack.export_ppm = false;
        hash::config_hash(&c)
    }

    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match &self.train {
            Some(t) => serde_json::to_value(t.method)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_else(|| "model".into()),
            None => "model".into(),
        }
    }

    /// Output directory after applying `override_dir` and the output root.
    pub fn output_dir(&self, override_dir: Option<&Path>) -> Result<PathBuf> {
        let dir = match (override_dir, &self.output) {
            (Some(d), _) => d.to_path_buf(),
            (None, Some(d)) => d.clone(),
            (None, None) => PathBuf::from(format!("runs/{}", self.hash()?)),
        };
        Ok(resolve_output(&dir))
    }
}

/// Resolves a relative path against the output root, when set.
pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}
