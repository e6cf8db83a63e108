use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One training instance: `x` is `[T, N, M]`, `y` the `[O, N, M]` steps
/// that immediately follow it.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub x: Tensor,
    pub y: Tensor,
    /// Source index of the first target step.
    pub anchor: usize,
}

/// Chronological train/val/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&p| !(0.0..=1.0).contains(&p))
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split fractions must lie in [0, 1] and sum to 1, got {:?}",
                parts
            )));
        }
        Ok(())
    }

    /// Step ranges for train, val and test over `steps` total steps.
    pub fn ranges(&self, steps: usize) -> Result<[Range<usize>; 3]> {
        self.validate()?;
        let train_end = ((self.train * steps as f64).round() as usize).min(steps);
        let val_end = train_end + (self.val * steps as f64).round() as usize;
        Ok([
            0..train_end,
            train_end..val_end.min(steps),
            val_end.min(steps)..steps,
        ])
    }
}

/// Number of stride-`stride` windows of `input + output` steps in `len` steps.
pub fn window_count(len: usize, input: usize, output: usize, stride: usize) -> usize {
    if len < input + output || stride == 0 {
        0
    } else {
        (len - input - output) / stride + 1
    }
}

/// Cut `[T, N, M]` windows from `values`, all inside `range`.
pub fn make_windows_in(
    values: &Tensor,
    range: Range<usize>,
    input: usize,
    output: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    let shape = values.shape();
    if shape.len() != 3 {
        return Err(Error::Data(format!(
            "windows need [T, N, M] values, got {shape:?}"
        )));
    }
    if input == 0 || output == 0 || stride == 0 {
        return Err(Error::Config(
            "input steps, output steps and stride must be positive".into(),
        ));
    }
    if range.end > shape[0] || range.len() < input + output {
        return Err(Error::Data(format!(
            "range {range:?} is too short for {input} input + {output} output steps"
        )));
    }
    let cell = shape[1] * shape[2];
    let data = values.data();
    let slice = |from: usize, steps: usize| -> Result<Tensor> {
        Tensor::new(
            vec![steps, shape[1], shape[2]],
            data[from * cell..(from + steps) * cell].to_vec(),
        )
    };
    let count = window_count(range.len(), input, output, stride);
    (0..count)
        .map(|i| {
            let start = range.start + i * stride;
            Ok(WindowSample {
                x: slice(start, input)?,
                y: slice(start + input, output)?,
                anchor: start + input,
            })
        })
        .collect()
}

pub fn make_windows(
    values: &Tensor,
    input: usize,
    output: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    make_windows_in(values, 0..values.shape()[0], input, output, stride)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(steps: usize) -> Tensor {
        Tensor::from_fn(&[steps, 2, 1], |i| (i[0] * 10 + i[1]) as f64)
    }

    #[test]
    fn boundary_counts() {
        assert_eq!(make_windows(&series(19), 16, 3, 1).unwrap().len(), 1);
        assert_eq!(make_windows(&series(20), 16, 3, 1).unwrap().len(), 2);
        assert!(make_windows(&series(18), 16, 3, 1).is_err());
    }

    #[test]
    fn target_follows_input() {
        let w = make_windows(&series(8), 3, 2, 1).unwrap();
        let s = &w[2];
        assert_eq!(s.anchor, 5);
        assert_eq!(s.x.get(&[2, 1, 0]), 41.0);
        assert_eq!(s.y.get(&[0, 1, 0]), 51.0);
    }

    #[test]
    fn default_split_is_chronological() {
        let [tr, va, te] = SplitSpec::default().ranges(2000).unwrap();
        assert_eq!((tr, va, te), (0..1400, 1400..1600, 1600..2000));
        assert!(SplitSpec {
            train: 0.5,
            val: 0.5,
            test: 0.5
        }
        .validate()
        .is_err());
    }
}
