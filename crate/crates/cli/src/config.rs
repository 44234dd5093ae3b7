use std::path::{Path, PathBuf};

use anyhow::Context;
use parattack::attack::AttackConfig;
use parattack::data::SyntheticConfig;
use parattack::defense::DefenseConfig;
use parattack::metrics::DEFAULT_THRESHOLD;
use parattack::model::ModelConfig;
use parattack::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const SNAPSHOT_FILE: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f32,
    /// Split evaluated when `--data` names a dataset directory.
    pub split: String,
    /// Include label-based and instance-based rows in the report.
    pub extended: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: DEFAULT_THRESHOLD,
            split: "test".into(),
            extended: false,
        }
    }
}

/// Every setting a run can use. Sections not needed by a subcommand are
/// carried along unchanged.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides the seed of every section when set.
    pub seed: Option<u64>,
    /// Dataset directory used when `--data` is absent.
    pub data: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reads a config file; unreadable or malformed files are usage errors.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    /// Propagates the top-level seed into every section.
    pub fn resolve(mut self) -> Self {
        if let Some(s) = self.seed {
            self.synthetic.seed = s;
            self.train.seed = s;
            self.attack.seed = s;
            self.defense.seed = s;
        }
        self
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let checks = [
            self.synthetic.validate(),
            self.model.validate(),
            self.train.validate(),
            self.attack.validate(),
            self.defense.validate(),
        ];
        for r in checks {
            r.map_err(|e| UsageError(e.to_string()))?;
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(UsageError(format!("eval threshold {} outside (0, 1)", self.eval.threshold)).into());
        }
        Ok(())
    }

    pub fn data_dir(&self, flag: Option<&Path>) -> anyhow::Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.data.clone())
            .ok_or_else(|| UsageError("no dataset given; pass --data or set \"data\" in the config".into()).into())
    }
}

/// Resolved configuration written next to every output.
#[derive(Debug, Serialize)]
pub struct Snapshot<'a> {
    pub command: &'a str,
    pub seed: u64,
    pub config: &'a RunConfig,
}

pub fn write_snapshot(path: &Path, command: &str, seed: u64, config: &RunConfig) -> anyhow::Result<()> {
    let snap = Snapshot { command, seed, config };
    let text = serde_json::to_string_pretty(&snap)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Accepts a fraction such as `10/255` or a decimal.
pub fn parse_epsilon(s: &str) -> Result<f32, String> {
    let value = match s.split_once('/') {
        Some((n, d)) => {
            let n: f32 = n.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
            let d: f32 = d.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
            if d == 0.0 {
                return Err(format!("zero denominator in {s:?}"));
            }
            n / d
        }
        None => s.trim().parse().map_err(|_| format!("not a number: {s:?}"))?,
    };
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(format!("epsilon must be positive, got {s:?}"))
    }
}
