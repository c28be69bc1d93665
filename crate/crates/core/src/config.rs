//! Run configuration: one JSON file plus dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detector::DetectionConfig;
use crate::encoder::EncoderConfig;
use crate::pretrain::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default = "d_triples")]
    pub triples: PathBuf,
    #[serde(default)]
    pub descriptions: Option<PathBuf>,
    #[serde(default = "d_corpus")]
    pub corpus: PathBuf,
    #[serde(default)]
    pub probes: Option<PathBuf>,
    /// Build artifacts and run outputs.
    #[serde(default = "d_out")]
    pub out_dir: PathBuf,
}

fn d_triples() -> PathBuf {
    "triples.tsv".into()
}
fn d_corpus() -> PathBuf {
    "corpus.txt".into()
}
fn d_out() -> PathBuf {
    "out".into()
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { triples: d_triples(), descriptions: None, corpus: d_corpus(), probes: None, out_dir: d_out() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    #[serde(default = "d_delta")]
    pub delta_d: f64,
    #[serde(default)]
    pub delta_trainable: bool,
}

fn d_delta() -> f64 {
    1.0
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { delta_d: d_delta(), delta_trainable: false }
    }
}

/// Everything a command needs. `encoder.vocab_size` is overwritten with the
/// size of the built vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: PathsConfig,
    /// Seed for model initialisation.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub detection: DetectionConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("all fields defaulted")
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` overrides with dotted keys. Values are parsed as
    /// JSON when possible and taken as strings otherwise.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut tree;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node.as_object_mut().ok_or_else(|| Error::Config(format!("override key {key:?} descends into a non-object")))?;
                if !obj.contains_key(*part) {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                node = obj.get_mut(*part).expect("checked");
            }
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
    }

    /// Validation that does not depend on built artifacts.
    pub fn validate(&self) -> Result<()> {
        self.detection.validate()?;
        self.train.validate()?;
        if !(self.decoder.delta_d > 0.0 && self.decoder.delta_d.is_finite()) {
            return Err(Error::Config("decoder.delta_d must be positive".into()));
        }
        let mut enc = self.encoder.clone();
        enc.vocab_size = enc.vocab_size.max(1);
        enc.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_validate() {
        let base = RunConfig::default();
        let c = base.with_overrides([("train.lambda1", "0.4"), ("detection.policy", "all"), ("paths.corpus", "x.txt")]).unwrap();
        assert_eq!(c.train.lambda1, 0.4);
        assert_eq!(c.detection.policy, crate::Policy::All);
        assert_eq!(c.paths.corpus, PathBuf::from("x.txt"));
        assert!(c.validate().is_ok());

        let bad = base.with_overrides([("train.lambda1", "1.5")]).unwrap();
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(base.with_overrides([("train.nope", "1")]).is_err());
        assert!(base.with_overrides([("detection.policy", "sideways")]).is_err());
        assert!(base.with_overrides([("seed.x", "1")]).is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>("{\"bogus\": 1}").is_err());
    }
}
