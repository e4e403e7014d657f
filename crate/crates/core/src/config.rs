//! Run configuration: every tunable in one tree, loaded from JSON and
//! patched with `key=value` overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::anchors::AnchorStrategy;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::imaging::{CorpusSpec, DeformKind};
use crate::losses::OrthVariant;
use crate::lra::LraConfig;
use crate::oks::OksConfig;
use crate::scoring::ScoreConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub strategy: AnchorStrategy,
    pub seed: u64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { strategy: AnchorStrategy::Variance, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the orthogonality penalty.
    pub lambda: f64,
    pub orth_variant: OrthVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { lambda: t.lambda, orth_variant: t.orth_variant }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Undeformed base images, drawn round-robin over planes.
    pub images: usize,
    /// Severity levels evenly spaced over `[0, 1]`.
    pub levels: usize,
    pub kinds: Vec<DeformKind>,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { images: 20, levels: 6, kinds: DeformKind::ALL.to_vec(), seed: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Corpus generation seed.
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub anchors: AnchorConfig,
    pub encoder: EncoderConfig,
    pub lra: LraConfig,
    pub oks: OksConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusSpec { image_size: 128, ..CorpusSpec::default() },
            anchors: AnchorConfig::default(),
            encoder: EncoderConfig::default(),
            lra: LraConfig::default(),
            oks: OksConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            score: ScoreConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// What `run.json` holds: the resolved config of each command run in a
/// directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub commands: BTreeMap<String, RunConfig>,
}

impl RunRecord {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Adds (or replaces) `command`'s entry in the record at `path`.
    pub fn merge_into(path: impl AsRef<Path>, command: &str, cfg: &RunConfig) -> Result<()> {
        let path = path.as_ref();
        let mut rec = if path.exists() { Self::load(path)? } else { Self::default() };
        rec.commands.insert(command.to_string(), cfg.clone());
        std::fs::write(path, serde_json::to_string_pretty(&rec)? + "\n")?;
        Ok(())
    }
}

fn config_err(e: serde_json::Error) -> Error {
    Error::config(e.to_string())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.oks.validate()?;
        self.train_config().validate()?;
        self.score.validate()?;
        if self.lra.hidden == 0 {
            return Err(Error::config("lra.hidden must be positive"));
        }
        if self.encoder.channels.iter().any(|&c| c < 2) {
            return Err(Error::config("encoder.channels must be at least 2"));
        }
        if self.sweep.levels < 2 || self.sweep.images == 0 || self.sweep.kinds.is_empty() {
            return Err(Error::config("sweep needs at least 2 levels, 1 image and 1 kind"));
        }
        Ok(())
    }

    /// The training config with the loss section folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { lambda: self.loss.lambda, orth_variant: self.loss.orth_variant, ..self.train.clone() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(config_err)
    }

    /// Reads a config file. A `run.json` record is accepted too, in which
    /// case `command`'s entry is used.
    pub fn load(path: impl AsRef<Path>, command: &str) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text).map_err(config_err)?;
        if value.get("commands").is_some() {
            let rec: RunRecord = serde_json::from_value(value).map_err(config_err)?;
            return rec
                .commands
                .get(command)
                .cloned()
                .ok_or_else(|| Error::config(format!("{} has no entry for `{command}`", path.display())));
        }
        serde_json::from_value(value).map_err(config_err)
    }

    /// Applies `dotted.key=value`. The key must already exist; the value is
    /// parsed as JSON, falling back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
        let mut tree = serde_json::to_value(&*self).map_err(config_err)?;
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot =
                slot.as_object_mut().and_then(|o| o.get_mut(part)).ok_or_else(|| Error::config(format!("unknown config key `{key}`")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(tree).map_err(|e| Error::config(format!("bad value for `{key}`: {e}")))?;
        Ok(())
    }
}
