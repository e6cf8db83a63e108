use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const STD_FLOOR: f64 = 1e-8;

/// Per-modality z-score statistics, fitted on the training steps only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fit mean and population std per modality over steps `train_range` of a
/// `[T, N, M]` tensor.
pub fn zscore_fit(values: &Tensor, train_range: Range<usize>) -> Result<NormStats> {
    let shape = values.shape();
    if shape.len() != 3 {
        return Err(Error::Data(format!(
            "zscore_fit expects [T, N, M], got {shape:?}"
        )));
    }
    if train_range.is_empty() || train_range.end > shape[0] {
        return Err(Error::Data(format!(
            "training range {train_range:?} is empty or exceeds {} steps",
            shape[0]
        )));
    }
    let (n, m) = (shape[1], shape[2]);
    let count = (train_range.len() * n) as f64;
    let rows = &values.data()[train_range.start * n * m..train_range.end * n * m];
    let mut mean = vec![0.0; m];
    for chunk in rows.chunks(m) {
        for (acc, v) in mean.iter_mut().zip(chunk) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= count);
    let mut var = vec![0.0; m];
    for chunk in rows.chunks(m) {
        for ((acc, v), mu) in var.iter_mut().zip(chunk).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let std = var
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = (v / count).sqrt();
            if s < STD_FLOOR {
                log::warn!("modality {i} has zero variance on the training split; std floored at {STD_FLOOR}");
                STD_FLOOR
            } else {
                s
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

impl NormStats {
    fn check(&self, t: &Tensor) -> Result<()> {
        let m = *t.shape().last().unwrap_or(&0);
        if m != self.mean.len() {
            return Err(Error::Data(format!(
                "tensor has {m} modalities on its last axis, statistics have {}",
                self.mean.len()
            )));
        }
        Ok(())
    }

    /// `(x - mean) / std` along the trailing modality axis.
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let m = self.mean.len();
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % m]) / self.std[i % m];
        }
        Ok(out)
    }

    pub fn invert(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let m = self.mean.len();
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % m] + self.mean[i % m];
        }
        Ok(out)
    }

    pub fn invert_value(&self, modality: usize, v: f64) -> f64 {
        v * self.std[modality] + self.mean[modality]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_normalizes_to_zero() {
        let t = Tensor::full(&[4, 2, 1], 3.5);
        let stats = zscore_fit(&t, 0..4).unwrap();
        assert_eq!(stats.std, vec![STD_FLOOR]);
        let z = stats.apply(&t).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.invert(&z).unwrap(), t);
    }

    #[test]
    fn two_point_example() {
        let t = Tensor::new(vec![2, 1, 1], vec![0.0, 2.0]).unwrap();
        let stats = zscore_fit(&t, 0..2).unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.std, vec![1.0]);
        assert_eq!(stats.apply(&t).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn only_training_steps_matter() {
        let a = Tensor::from_fn(&[10, 2, 2], |i| (i[0] * 3 + i[1] + i[2]) as f64);
        let mut b = a.clone();
        for v in &mut b.data_mut()[6 * 4..] {
            *v = -1e6;
        }
        assert_eq!(zscore_fit(&a, 0..6).unwrap(), zscore_fit(&b, 0..6).unwrap());
    }

    #[test]
    fn empty_range_is_rejected() {
        let t = Tensor::zeros(&[3, 1, 1]);
        assert!(zscore_fit(&t, 1..1).is_err());
    }
}
