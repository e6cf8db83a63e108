//! Dataset ingestion, synthetic generation, normalization and windowing.

mod descriptor;
mod norm;
mod series;
mod synth;
mod window;

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use descriptor::DatasetDescriptor;
pub use norm::{zscore_fit, NormStats, STD_FLOOR};
pub use series::{format_time, load_csv, parse_time, MoSTSeries};
pub use synth::{synth_generate, SynthSpec};
pub use window::{make_windows, make_windows_in, window_count, SplitSpec, WindowSample};

use crate::error::{Error, Result};
use crate::numerics::container;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (train, val, test)"
            ))),
        }
    }
}

/// Normalized windows for each split, plus what is needed to undo the
/// normalization.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub series: MoSTSeries,
    pub stats: NormStats,
    pub ranges: [Range<usize>; 3],
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

impl Dataset {
    /// Fit z-score statistics on the training steps, normalize, and window
    /// each split separately so no window straddles a boundary.
    pub fn build(
        series: MoSTSeries,
        split: SplitSpec,
        input: usize,
        output: usize,
        stride: usize,
    ) -> Result<Self> {
        let ranges = split.ranges(series.steps())?;
        let stats = zscore_fit(series.values(), ranges[0].clone())?;
        let normalized = stats.apply(series.values())?;
        let cut = |r: &Range<usize>| -> Result<Vec<WindowSample>> {
            if r.len() < input + output {
                return Ok(Vec::new());
            }
            make_windows_in(&normalized, r.clone(), input, output, stride)
        };
        let (train, val, test) = (cut(&ranges[0])?, cut(&ranges[1])?, cut(&ranges[2])?);
        if train.is_empty() {
            return Err(Error::Data(format!(
                "training split of {} steps is too short for {input} + {output} step windows",
                ranges[0].len()
            )));
        }
        Ok(Self {
            series,
            stats,
            ranges,
            train,
            val,
            test,
        })
    }

    pub fn windows(&self, split: Split) -> &[WindowSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn nodes(&self) -> usize {
        self.series.nodes()
    }

    pub fn modalities(&self) -> usize {
        self.series.modalities()
    }
}

#[derive(Serialize, Deserialize)]
struct Axes {
    time_labels: Vec<i64>,
    node_ids: Vec<String>,
    modality_names: Vec<String>,
}

/// Write a validated dataset into `dir`: descriptor, axis labels, raw values
/// in the binary container and training-split statistics.
pub fn write_prepared(
    dir: &Path,
    descriptor: &DatasetDescriptor,
    series: &MoSTSeries,
) -> Result<NormStats> {
    descriptor.validate(series)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ranges = descriptor.split.ranges(series.steps())?;
    let stats = zscore_fit(series.values(), ranges[0].clone())?;
    let mut descriptor = descriptor.clone();
    descriptor.csv = None;
    series::write_text(
        &dir.join("descriptor.json"),
        &serde_json::to_string_pretty(&descriptor)?,
    )?;
    let axes = Axes {
        time_labels: series.time_labels().to_vec(),
        node_ids: series.node_ids().to_vec(),
        modality_names: series.modality_names().to_vec(),
    };
    series::write_text(
        &dir.join("axes.json"),
        &serde_json::to_string_pretty(&axes)?,
    )?;
    series::write_text(
        &dir.join("norm.json"),
        &serde_json::to_string_pretty(&stats)?,
    )?;
    container::save_tensor(&dir.join("series.most"), series.values())?;
    Ok(stats)
}

pub fn read_prepared(dir: &Path) -> Result<(DatasetDescriptor, MoSTSeries)> {
    let descriptor = DatasetDescriptor::load(&dir.join("descriptor.json"))?;
    let axes_path = dir.join("axes.json");
    let text = std::fs::read_to_string(&axes_path).map_err(|e| Error::io(&axes_path, e))?;
    let axes: Axes = serde_json::from_str(&text)?;
    let values = container::load_tensor(&dir.join("series.most"))?;
    let series = MoSTSeries::new(values, axes.time_labels, axes.node_ids, axes.modality_names)?;
    descriptor.validate(&series)?;
    Ok((descriptor, series))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_windows_never_reach_validation_steps() {
        let series = synth_generate(&SynthSpec::planted(2, 2, 300, 0.1), 3).unwrap();
        let ds = Dataset::build(series, SplitSpec::default(), 16, 3, 1).unwrap();
        let max_train_target = ds.train.iter().map(|w| w.anchor + 2).max().unwrap();
        assert!(max_train_target < ds.ranges[1].start);
        assert!(ds.val.iter().all(|w| w.anchor - 16 >= ds.ranges[1].start));
        assert_eq!(ds.train.len(), window_count(210, 16, 3, 1));
    }

    #[test]
    fn prepared_round_trip() {
        let series = synth_generate(&SynthSpec::planted(3, 2, 60, 0.1), 9).unwrap();
        let d = DatasetDescriptor::describe("toy", &series, SplitSpec::default());
        let dir = tempfile::tempdir().unwrap();
        write_prepared(dir.path(), &d, &series).unwrap();
        let (d2, s2) = read_prepared(dir.path()).unwrap();
        assert_eq!(d2, d);
        assert_eq!(s2, series);
    }
}
