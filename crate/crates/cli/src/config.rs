//! The resolved run configuration: defaults, then a JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use spark_core::model::{ModelConfig, Variant};
use spark_core::training::{LrRule, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataSource {
    Dir { path: PathBuf },
    Synth { count: usize, size: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: Variant,
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::desk(64, 32, vec![16, 32, 64]);
        model.ablation = Variant::Baseline.ablation();
        RunConfig {
            variant: Variant::Baseline,
            data: DataSource::Synth {
                count: 256,
                size: 64,
                seed: 0,
            },
            model,
            train: TrainConfig {
                lr: LrRule::Peak { value: 0.005 },
                ..TrainConfig::default()
            },
            checkpoint_every: 0,
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with the (possibly partial) JSON object in `path`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if !patch.is_object() {
            bail!("{}: the config file must hold a JSON object", path.display());
        }
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge(&mut base, patch);
        serde_json::from_value(base).with_context(|| format!("invalid config in {}", path.display()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
