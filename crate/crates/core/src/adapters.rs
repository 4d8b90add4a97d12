//! Classifier adapter configuration files.
//!
//! ```toml
//! name = "txrv-all"
//! invocation = "subprocess"   # in_process | subprocess | http
//! input_size = 224
//! findings = ["cardiomegaly", "edema", "pleural_effusion", "pneumonia", "hernia", "mass"]
//! command = ["python3", "adapters/txrv_predict.py", "--weights", "densenet121-res224-all"]
//! ```
//!
//! In-process adapters name either a trained model directory (`model_dir`)
//! or a `constant` probability.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augtrain::TrainedModel;
use crate::findings::FindingKey;
use crate::stress::{Classifier, ConstantClassifier, HttpClassifier, Invocation, StressError, SubprocessClassifier};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub name: String,
    pub invocation: Invocation,
    pub input_size: u32,
    pub findings: Vec<FindingKey>,
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_dir: Option<PathBuf>,
    #[serde(default)]
    pub constant: Option<f64>,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub code_reference: Option<String>,
}

impl AdapterConfig {
    pub fn parse(text: &str) -> Result<Self, StressError> {
        let cfg: AdapterConfig = toml::from_str(text).map_err(|e| StressError::Adapter(format!("adapter config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads a config; a relative `model_dir` resolves against the file's directory.
    pub fn from_path(path: &Path) -> Result<Self, StressError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StressError::Adapter(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(dir), Some(parent)) = (&cfg.model_dir, path.parent()) {
            if dir.is_relative() {
                cfg.model_dir = Some(parent.join(dir));
            }
        }
        Ok(cfg)
    }

    fn check(&self) -> Result<(), StressError> {
        let bad = |m: &str| Err(StressError::Adapter(format!("adapter {}: {m}", self.name)));
        if self.findings.is_empty() {
            return bad("no findings");
        }
        match self.invocation {
            Invocation::Subprocess if self.command.is_empty() => bad("subprocess adapters need a command"),
            Invocation::Http if self.endpoint.is_none() => bad("http adapters need an endpoint"),
            Invocation::InProcess if self.model_dir.is_some() == self.constant.is_some() => {
                bad("in-process adapters need exactly one of model_dir or constant")
            }
            _ => Ok(()),
        }
    }

    /// Instantiates the adapter; subprocess adapters write scratch PNGs to `scratch`.
    pub fn build(&self, scratch: &Path) -> Result<Box<dyn Classifier>, StressError> {
        self.check()?;
        Ok(match self.invocation {
            Invocation::Subprocess => Box::new(SubprocessClassifier {
                name: self.name.clone(),
                findings: self.findings.clone(),
                input_size: self.input_size,
                command: self.command.clone(),
                scratch: scratch.to_path_buf(),
            }),
            Invocation::Http => Box::new(HttpClassifier::new(
                self.name.clone(),
                self.findings.clone(),
                self.input_size,
                self.endpoint.clone().expect("checked"),
            )?),
            Invocation::InProcess => match (&self.model_dir, self.constant) {
                (Some(dir), _) => {
                    let m = TrainedModel::load(dir, &self.name).map_err(|e| StressError::Adapter(e.to_string()))?;
                    if m.findings != self.findings {
                        return Err(StressError::Adapter(format!(
                            "adapter {}: model findings {:?} differ from config",
                            self.name, m.findings
                        )));
                    }
                    Box::new(m)
                }
                (None, Some(value)) => Box::new(ConstantClassifier {
                    name: self.name.clone(),
                    findings: self.findings.clone(),
                    value,
                    input_size: self.input_size,
                }),
                (None, None) => unreachable!("checked"),
            },
        })
    }
}
