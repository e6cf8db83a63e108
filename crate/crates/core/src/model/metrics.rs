use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, WindowSample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySummary {
    pub modality: String,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub modality: String,
    /// 1-based forecast step.
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
}

/// MAE and RMSE in original units, per modality and horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rows: Vec<MetricRow>,
    /// Pooled over all horizons.
    pub per_modality: Vec<ModalitySummary>,
    pub overall_mae: f64,
    pub overall_rmse: f64,
    pub windows: usize,
}

impl Metrics {
    pub fn row(&self, modality: &str, horizon: usize) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.modality == modality && r.horizon == horizon)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("modality,horizon,mae,rmse\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.modality, r.horizon, r.mae, r.rmse
            ));
        }
        out
    }

    /// Write `metrics.csv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("metrics.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}

/// Running absolute and squared error sums per (modality, horizon).
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    names: Vec<String>,
    horizons: usize,
    abs: Vec<f64>,
    sq: Vec<f64>,
    count: Vec<usize>,
    std: Vec<f64>,
    windows: usize,
}

impl MetricsAccumulator {
    pub fn new(modality_names: &[String], horizons: usize, stats: &NormStats) -> Self {
        let cells = modality_names.len() * horizons;
        Self {
            names: modality_names.to_vec(),
            horizons,
            abs: vec![0.0; cells],
            sq: vec![0.0; cells],
            count: vec![0; cells],
            std: stats.std.clone(),
            windows: 0,
        }
    }

    /// Add one window's normalized prediction and truth, both `[O, N, M]`.
    pub fn add(&mut self, prediction: &Tensor, truth: &Tensor) -> Result<()> {
        let s = truth.shape();
        if prediction.shape() != s
            || s.len() != 3
            || s[0] != self.horizons
            || s[2] != self.names.len()
        {
            return Err(Error::dim("metrics", prediction.shape(), s));
        }
        let (nodes, mods) = (s[1], s[2]);
        for o in 0..s[0] {
            for n in 0..nodes {
                for m in 0..mods {
                    let i = (o * nodes + n) * mods + m;
                    let err = (prediction.data()[i] - truth.data()[i]) * self.std[m];
                    let cell = m * self.horizons + o;
                    self.abs[cell] += err.abs();
                    self.sq[cell] += err * err;
                    self.count[cell] += 1;
                }
            }
        }
        self.windows += 1;
        Ok(())
    }

    pub fn finish(&self) -> Metrics {
        let mut rows = Vec::with_capacity(self.abs.len());
        for (m, name) in self.names.iter().enumerate() {
            for o in 0..self.horizons {
                let c = m * self.horizons + o;
                let k = self.count[c].max(1) as f64;
                rows.push(MetricRow {
                    modality: name.clone(),
                    horizon: o + 1,
                    mae: self.abs[c] / k,
                    rmse: (self.sq[c] / k).sqrt(),
                });
            }
        }
        let per_modality = self
            .names
            .iter()
            .enumerate()
            .map(|(m, name)| {
                let cells = m * self.horizons..(m + 1) * self.horizons;
                let k = self.count[cells.clone()].iter().sum::<usize>().max(1) as f64;
                ModalitySummary {
                    modality: name.clone(),
                    mae: self.abs[cells.clone()].iter().sum::<f64>() / k,
                    rmse: (self.sq[cells].iter().sum::<f64>() / k).sqrt(),
                }
            })
            .collect();
        let total = self.count.iter().sum::<usize>().max(1) as f64;
        Metrics {
            rows,
            per_modality,
            overall_mae: self.abs.iter().sum::<f64>() / total,
            overall_rmse: (self.sq.iter().sum::<f64>() / total).sqrt(),
            windows: self.windows,
        }
    }
}

/// Repeat the last observed step for every horizon.
pub fn persistence_metrics(
    windows: &[WindowSample],
    modality_names: &[String],
    stats: &NormStats,
) -> Result<Metrics> {
    let horizons = windows.first().map(|w| w.y.shape()[0]).unwrap_or(1);
    let mut acc = MetricsAccumulator::new(modality_names, horizons, stats);
    for w in windows {
        let (t, n, m) = (w.x.shape()[0], w.x.shape()[1], w.x.shape()[2]);
        let last = &w.x.data()[(t - 1) * n * m..];
        let pred = Tensor::from_fn(w.y.shape(), |i| last[i[1] * m + i[2]]);
        acc.add(&pred, &w.y)?;
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_stats(m: usize) -> NormStats {
        NormStats {
            mean: vec![0.0; m],
            std: vec![1.0; m],
        }
    }

    #[test]
    fn direct_formula() {
        let mut acc = MetricsAccumulator::new(&["a".to_string()], 1, &unit_stats(1));
        let pred = Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap();
        acc.add(&pred, &Tensor::zeros(&[1, 2, 1])).unwrap();
        let m = acc.finish();
        assert!((m.rows[0].mae - 1.5).abs() < 1e-15);
        assert!((m.rows[0].rmse - 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn errors_are_in_original_units() {
        let stats = NormStats {
            mean: vec![5.0],
            std: vec![3.0],
        };
        let mut acc = MetricsAccumulator::new(&["a".to_string()], 1, &stats);
        acc.add(&Tensor::full(&[1, 1, 1], 1.0), &Tensor::zeros(&[1, 1, 1]))
            .unwrap();
        assert_eq!(acc.finish().overall_mae, 3.0);
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let mut acc =
            MetricsAccumulator::new(&["a".to_string(), "b".to_string()], 2, &unit_stats(2));
        let y = Tensor::from_fn(&[2, 3, 2], |i| (i[0] + i[1] * i[2]) as f64);
        acc.add(&y, &y).unwrap();
        let m = acc.finish();
        assert!(m.rows.iter().all(|r| r.mae == 0.0 && r.rmse == 0.0));
        assert_eq!(m.to_csv().lines().count(), 5);
    }
}
