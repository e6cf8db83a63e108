use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::series::MoSTSeries;
use super::window::SplitSpec;
use crate::error::{Error, Result};

/// JSON sidecar describing a dataset's axes, sampling frequency and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub name: String,
    pub nodes: usize,
    pub modalities: Vec<String>,
    pub frequency_seconds: i64,
    #[serde(default)]
    pub split: SplitSpec,
    /// CSV location, relative to the descriptor file when not absolute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

impl DatasetDescriptor {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut d: Self = serde_json::from_str(&text)?;
        if let Some(csv) = &d.csv {
            if csv.is_relative() {
                d.csv = Some(path.parent().unwrap_or(Path::new(".")).join(csv));
            }
        }
        Ok(d)
    }

    pub fn describe(name: &str, series: &MoSTSeries, split: SplitSpec) -> Self {
        Self {
            name: name.to_string(),
            nodes: series.nodes(),
            modalities: series.modality_names().to_vec(),
            frequency_seconds: series.step_seconds().unwrap_or(0),
            split,
            csv: None,
        }
    }

    /// Check that a loaded series has the declared axes.
    pub fn validate(&self, series: &MoSTSeries) -> Result<()> {
        if series.nodes() != self.nodes {
            return Err(Error::Data(format!(
                "dataset `{}` declares {} nodes, file has {}",
                self.name,
                self.nodes,
                series.nodes()
            )));
        }
        if series.modality_names() != self.modalities.as_slice() {
            return Err(Error::Data(format!(
                "dataset `{}` declares modalities {:?}, file has {:?}",
                self.name,
                self.modalities,
                series.modality_names()
            )));
        }
        if let Some(step) = series.step_seconds() {
            if step != self.frequency_seconds {
                return Err(Error::Data(format!(
                    "dataset `{}` declares a {}s step, file has {step}s",
                    self.name, self.frequency_seconds
                )));
            }
        }
        self.split.validate()
    }
}
