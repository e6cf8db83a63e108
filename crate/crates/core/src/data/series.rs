use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Observations over (time, node, modality) with axis labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MoSTSeries {
    values: Tensor,
    time_labels: Vec<i64>,
    node_ids: Vec<String>,
    modality_names: Vec<String>,
}

impl MoSTSeries {
    pub fn new(
        values: Tensor,
        time_labels: Vec<i64>,
        node_ids: Vec<String>,
        modality_names: Vec<String>,
    ) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 3 {
            return Err(Error::Data(format!(
                "series values must be [T, N, M], got {shape:?}"
            )));
        }
        if shape[0] != time_labels.len()
            || shape[1] != node_ids.len()
            || shape[2] != modality_names.len()
        {
            return Err(Error::Data(format!(
                "axis lengths {shape:?} disagree with metadata ({} times, {} nodes, {} modalities)",
                time_labels.len(),
                node_ids.len(),
                modality_names.len()
            )));
        }
        if time_labels.len() >= 2 {
            let step = time_labels[1] - time_labels[0];
            if step <= 0 {
                return Err(Error::Data("timestamps must be strictly increasing".into()));
            }
            if let Some(w) = time_labels.windows(2).find(|w| w[1] - w[0] != step) {
                return Err(Error::Data(format!(
                    "irregular time step: {} -> {} (expected step {step}s)",
                    format_time(w[0]),
                    format_time(w[1])
                )));
            }
        }
        Ok(Self {
            values,
            time_labels,
            node_ids,
            modality_names,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn time_labels(&self) -> &[i64] {
        &self.time_labels
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn modality_names(&self) -> &[String] {
        &self.modality_names
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn modalities(&self) -> usize {
        self.values.shape()[2]
    }

    /// Seconds between consecutive steps, if there are at least two.
    pub fn step_seconds(&self) -> Option<i64> {
        (self.time_labels.len() >= 2).then(|| self.time_labels[1] - self.time_labels[0])
    }

    /// Same labels, new values of identical shape.
    pub fn with_values(&self, values: Tensor) -> Result<Self> {
        if values.shape() != self.values.shape() {
            return Err(Error::dim(
                "with_values",
                self.values.shape(),
                values.shape(),
            ));
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    /// Write `time,node,modality,value` rows, time-major.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["time", "node", "modality", "value"])?;
        for (t, &ts) in self.time_labels.iter().enumerate() {
            let time = format_time(ts);
            for (n, node) in self.node_ids.iter().enumerate() {
                for (m, modality) in self.modality_names.iter().enumerate() {
                    let v = self.values.get(&[t, n, m]);
                    w.write_record([time.as_str(), node, modality, &format!("{v:?}")])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub fn format_time(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .map(|d| d.naive_utc().format("%Y-%m-%d %H:%M:%S").to_string())
        .unwrap_or_else(|| ts.to_string())
}

/// Integer epoch seconds or a `YYYY-MM-DD HH:MM[:SS]` / RFC 3339 timestamp.
pub fn parse_time(raw: &str) -> Option<i64> {
    let s = raw.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(d) = DateTime::parse_from_rfc3339(s) {
        return Some(d.timestamp());
    }
    [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y/%m/%d %H:%M",
    ]
    .iter()
    .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
    .map(|d| d.and_utc().timestamp())
}

const SHOWN_GAPS: usize = 10;

/// Load a dense grid from a `time,node,modality,value` CSV.
///
/// Nodes and modalities keep their first-appearance order; rows may come in
/// any order. Missing cells are an error, never imputed.
pub fn load_csv(path: &Path) -> Result<MoSTSeries> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_lowercase())
        .collect();
    if header != ["time", "node", "modality", "value"] {
        return Err(Error::Data(format!(
            "{}: header must be time,node,modality,value, got {}",
            path.display(),
            header.join(",")
        )));
    }

    let mut times: Vec<i64> = Vec::new();
    let mut time_index: HashMap<i64, usize> = HashMap::new();
    let mut nodes: Vec<String> = Vec::new();
    let mut node_index: HashMap<String, usize> = HashMap::new();
    let mut modalities: Vec<String> = Vec::new();
    let mut modality_index: HashMap<String, usize> = HashMap::new();
    let mut cells: HashMap<(usize, usize, usize), f64> = HashMap::new();

    fn intern<K: std::hash::Hash + Eq + Clone>(
        key: K,
        order: &mut Vec<K>,
        index: &mut HashMap<K, usize>,
    ) -> usize {
        *index.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            order.len() - 1
        })
    }

    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        if record.len() != 4 {
            return Err(Error::Data(format!(
                "{}:{line}: expected 4 fields",
                path.display()
            )));
        }
        let ts = parse_time(&record[0]).ok_or_else(|| {
            Error::Data(format!(
                "{}:{line}: unparseable timestamp `{}`",
                path.display(),
                &record[0]
            ))
        })?;
        let value: f64 = record[3].trim().parse().map_err(|_| {
            Error::Data(format!(
                "{}:{line}: unparseable value `{}`",
                path.display(),
                &record[3]
            ))
        })?;
        if !value.is_finite() {
            return Err(Error::Data(format!(
                "{}:{line}: non-finite value",
                path.display()
            )));
        }
        let t = intern(ts, &mut times, &mut time_index);
        let n = intern(record[1].trim().to_string(), &mut nodes, &mut node_index);
        let m = intern(
            record[2].trim().to_string(),
            &mut modalities,
            &mut modality_index,
        );
        if cells.insert((t, n, m), value).is_some() {
            return Err(Error::Data(format!(
                "{}:{line}: duplicate cell ({}, {}, {})",
                path.display(),
                &record[0],
                &record[1],
                &record[2]
            )));
        }
    }
    if times.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }

    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by_key(|&i| times[i]);
    let (t_len, n_len, m_len) = (times.len(), nodes.len(), modalities.len());
    let mut data = vec![0.0; t_len * n_len * m_len];
    let mut gaps = Vec::new();
    let mut missing = 0usize;
    for (t_sorted, &t_orig) in order.iter().enumerate() {
        for n in 0..n_len {
            for m in 0..m_len {
                match cells.get(&(t_orig, n, m)) {
                    Some(&v) => data[(t_sorted * n_len + n) * m_len + m] = v,
                    None => {
                        missing += 1;
                        if gaps.len() < SHOWN_GAPS {
                            gaps.push(format!(
                                "({}, {}, {})",
                                format_time(times[t_orig]),
                                nodes[n],
                                modalities[m]
                            ));
                        }
                    }
                }
            }
        }
    }
    if missing > 0 {
        return Err(Error::Data(format!(
            "{}: {missing} missing cells, first: {}",
            path.display(),
            gaps.join(", ")
        )));
    }
    let sorted_times = order.iter().map(|&i| times[i]).collect();
    let values = Tensor::new(vec![t_len, n_len, m_len], data)?;
    MoSTSeries::new(values, sorted_times, nodes, modalities)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
