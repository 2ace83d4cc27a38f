//! Run configuration file: training, data generation and output options in
//! one JSON document.

use std::fs;
use std::path::Path;

use ncl_core::{Error as CoreError, SyntheticSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Output options for `train`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Fill the `seconds` column of metrics.csv. Off by default so that
    /// reruns produce identical bytes.
    pub timing: bool,
    /// Write per-epoch split diagnostics under `splits/`.
    pub split_diagnostics: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub output: OutputConfig,
}

impl RunConfigFile {
    /// Parses a config document. Unknown keys are rejected and missing keys
    /// take their defaults; errors carry the offending key path.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config {
                field: path,
                message: e.into_inner().to_string(),
            }
        })
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io {
                    context: format!("reading config {}", p.display()),
                    source: e,
                })?;
                Self::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let prefixed = |section: &str, e: CoreError| match e {
            CoreError::InvalidConfig { field, message } => CliError::Config {
                field: format!("{section}.{field}"),
                message,
            },
            other => CliError::Core(other),
        };
        self.train.validate().map_err(|e| prefixed("train", e))?;
        self.data.validate().map_err(|e| prefixed("data", e))?;
        let dims = &self.train.dims;
        if dims.d_img_in != self.data.d_img_in {
            return Err(CliError::Config {
                field: "train.dims.d_img_in".into(),
                message: format!("must equal data.d_img_in = {}", self.data.d_img_in),
            });
        }
        if dims.vocab_size != self.data.vocab_size {
            return Err(CliError::Config {
                field: "train.dims.vocab_size".into(),
                message: format!("must equal data.vocab_size = {}", self.data.vocab_size),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
