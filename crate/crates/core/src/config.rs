//! The JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classifier::Setup;
use crate::corpus::{Dataset, SynthConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::masking::MaskingConfig;
use crate::training::TrainConfig;
use crate::transport::IpotConfig;

/// File name of the merged configuration echoed into output directories.
pub const ECHO_FILE: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub setups: Vec<Setup>,
    /// Cut-off for patch precision; defaults to each instance's planted signature count.
    pub patch_k: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            setups: vec![Setup::X, Setup::R, Setup::XMinusR],
            patch_k: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: SynthConfig,
    /// `vocab_size` 0 means "take it from the data".
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub ipot: IpotConfig,
    pub masking: MaskingConfig,
    pub eval: EvalConfig,
}

fn json_error(e: serde_json::Error) -> Error {
    // serde reports unknown keys and type errors with the offending name in the message
    Error::invalid("config", e.to_string())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(json_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Invalid { field, message } => Error::invalid(field, format!("{}: {message}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        let mut enc = self.encoder.clone();
        if enc.vocab_size == 0 {
            enc.vocab_size = 1;
        }
        enc.validate()?;
        self.train.validate()?;
        self.ipot.validate()?;
        self.masking.validate()?;
        if self.eval.setups.is_empty() {
            return Err(Error::invalid("eval.setups", "at least one setup is required"));
        }
        if self.eval.patch_k == Some(0) {
            return Err(Error::invalid("eval.patch_k", "must be positive"));
        }
        Ok(())
    }

    /// Applies a `section.field=value` override; `value` is parsed as JSON
    /// and falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::invalid("--set", format!("{assignment:?} is not of the form key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| Error::invalid(path, "no such configuration key"))?;
        }
        *slot = value;
        let updated: RunConfig =
            serde_json::from_value(doc).map_err(|e| Error::invalid(path, e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Encoder configuration sized for `ds`.
    pub fn encoder_for(&self, ds: &Dataset) -> Result<EncoderConfig> {
        let mut enc = self.encoder.clone();
        if enc.vocab_size == 0 {
            enc.vocab_size = ds.vocab.len();
        }
        if let Some(inst) = ds.instances.first() {
            if inst.patches.dim() != enc.patch_input_dim {
                return Err(Error::invalid(
                    "encoder.patch_input_dim",
                    format!("{} but the data has {}-value patches", enc.patch_input_dim, inst.patches.dim()),
                ));
            }
        }
        enc.validate()?;
        Ok(enc)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes the merged configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}
