//! Experiment configuration: one JSON document describing data, model and
//! training. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    self, load_csv, synth_generate, Dataset, DatasetDescriptor, MoSTSeries, SplitSpec, SynthSpec,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated on the fly; `seed` defaults to the run seed.
    Synthetic {
        spec: SynthSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// A `time,node,modality,value` file, optionally with a descriptor.
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        descriptor: Option<PathBuf>,
    },
    /// A directory written by `prepare`.
    Prepared { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Root for run directories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataSource,
    /// Overrides the descriptor's split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parse a config file; relative data paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok((cfg, text))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Synthetic { .. } => {}
            DataSource::Csv { path, descriptor } => {
                fix(path);
                if let Some(d) = descriptor {
                    fix(d);
                }
            }
            DataSource::Prepared { path } => fix(path),
        }
        if let Some(out) = &mut self.out_dir {
            fix(out);
        }
    }

    /// Load or generate the raw series together with its split.
    pub fn series(&self) -> Result<(MoSTSeries, SplitSpec, String)> {
        let (series, split, name) = match &self.data {
            DataSource::Synthetic { spec, seed } => {
                let series = synth_generate(spec, seed.unwrap_or(self.seed))?;
                (series, SplitSpec::default(), "synthetic".to_string())
            }
            DataSource::Csv { path, descriptor } => {
                let series = load_csv(path)?;
                match descriptor {
                    Some(d) => {
                        let d = DatasetDescriptor::load(d)?;
                        d.validate(&series)?;
                        (series, d.split, d.name)
                    }
                    None => {
                        let name = path
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_default();
                        (series, SplitSpec::default(), name)
                    }
                }
            }
            DataSource::Prepared { path } => {
                let (d, series) = data::read_prepared(path)?;
                (series, d.split, d.name)
            }
        };
        Ok((series, self.split.unwrap_or(split), name))
    }

    /// Normalized, windowed data and a model shaped for it.
    pub fn dataset(&self) -> Result<(Dataset, Model)> {
        let (series, split, _) = self.series()?;
        let m = &self.model;
        let ds = Dataset::build(
            series,
            split,
            m.input_steps,
            m.output_steps,
            self.train.stride,
        )?;
        let model = Model::new(m.clone(), ds.nodes(), ds.modalities())?;
        Ok((ds, model))
    }
}
