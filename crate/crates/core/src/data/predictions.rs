use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use super::windows::Window;
use crate::error::{Error, Result};
use crate::metrics::ForecastBatch;

/// Sidecar metadata: `{"window": W, "horizon": H, "channels": d, "model": "..."}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub window: usize,
    pub horizon: usize,
    pub channels: usize,
    pub model: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub channel: usize,
    pub values: Vec<f64>,
}

/// Forecasts of an external model, one record per `(sample_id, channel)`.
///
/// On disk: a CSV with columns `sample_id,channel,h1..hH` plus a JSON
/// sidecar next to it (`preds.csv` → `preds.meta.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub meta: PredictionMeta,
    pub records: Vec<PredictionRecord>,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

impl PredictionFile {
    /// Builds a file from a `[samples, horizon, channels]` tensor.
    pub fn from_tensor(meta: PredictionMeta, sample_ids: &[String], values: ArrayView3<'_, f64>) -> Result<Self> {
        let (n, h, d) = values.dim();
        if n != sample_ids.len() || h != meta.horizon || d != meta.channels {
            return Err(Error::Dimension(format!(
                "tensor [{n}, {h}, {d}] does not match {} ids / horizon {} / {} channels",
                sample_ids.len(),
                meta.horizon,
                meta.channels
            )));
        }
        let mut records = Vec::with_capacity(n * d);
        for (i, id) in sample_ids.iter().enumerate() {
            for c in 0..d {
                records.push(PredictionRecord {
                    sample_id: id.clone(),
                    channel: c,
                    values: (0..h).map(|t| values[[i, t, c]]).collect(),
                });
            }
        }
        Ok(Self { meta, records })
    }

    /// Sample ids in first-seen order.
    pub fn sample_ids(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.sample_id.as_str()))
            .map(|r| r.sample_id.clone())
            .collect()
    }

    /// Dense tensor over the given ids.
    pub fn to_tensor(&self, sample_ids: &[String]) -> Result<Array3<f64>> {
        let index = self.index()?;
        let (h, d) = (self.meta.horizon, self.meta.channels);
        let mut out = Array3::zeros((sample_ids.len(), h, d));
        let mut missing = Vec::new();
        for (i, id) in sample_ids.iter().enumerate() {
            for c in 0..d {
                match index.get(&(id.as_str(), c)) {
                    Some(values) => {
                        for (t, v) in values.iter().enumerate() {
                            out[[i, t, c]] = *v;
                        }
                    }
                    None => missing.push(format!("{id}/{c}")),
                }
            }
        }
        if !missing.is_empty() {
            return Err(missing_error(&missing));
        }
        Ok(out)
    }

    fn index(&self) -> Result<HashMap<(&str, usize), &[f64]>> {
        let mut index = HashMap::with_capacity(self.records.len());
        for r in &self.records {
            if r.channel >= self.meta.channels {
                return Err(Error::Alignment(format!(
                    "record {}/{} has channel beyond the declared {}",
                    r.sample_id, r.channel, self.meta.channels
                )));
            }
            if r.values.len() != self.meta.horizon {
                return Err(Error::Alignment(format!(
                    "record {}/{} has {} values, header declares horizon {}",
                    r.sample_id,
                    r.channel,
                    r.values.len(),
                    self.meta.horizon
                )));
            }
            if r.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "record {}/{} contains a non-finite value",
                    r.sample_id, r.channel
                )));
            }
            if index.insert((r.sample_id.as_str(), r.channel), r.values.as_slice()).is_some() {
                return Err(Error::Alignment(format!(
                    "duplicate record for sample {} channel {}",
                    r.sample_id, r.channel
                )));
            }
        }
        Ok(index)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["sample_id".to_string(), "channel".to_string()];
        header.extend((1..=self.meta.horizon).map(|h| format!("h{h}")));
        w.write_record(&header).map_err(|e| Error::Internal(e.to_string()))?;
        for r in &self.records {
            let mut row = vec![r.sample_id.clone(), r.channel.to_string()];
            row.extend(r.values.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| Error::Internal(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn from_csv(csv_bytes: &[u8], meta: PredictionMeta) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(csv_bytes);
        let headers = reader
            .headers()
            .map_err(|e| Error::Structure(format!("prediction file header: {e}")))?
            .clone();
        let expected = 2 + meta.horizon;
        if headers.len() != expected || &headers[0] != "sample_id" || &headers[1] != "channel" {
            return Err(Error::Structure(format!(
                "prediction file header must be sample_id,channel,h1..h{} ({} columns), got {} columns",
                meta.horizon,
                expected,
                headers.len()
            )));
        }
        let mut records = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| Error::Structure(format!("row {row}: {e}")))?;
            if rec.len() != expected {
                return Err(Error::Structure(format!(
                    "row {row} has {} fields, expected {expected}",
                    rec.len()
                )));
            }
            let channel = rec[1].parse::<usize>().map_err(|_| Error::Parse {
                row,
                column: "channel".into(),
                message: format!("not a channel index: {:?}", &rec[1]),
            })?;
            let values = (2..expected)
                .map(|j| {
                    rec[j].parse::<f64>().map_err(|_| Error::Parse {
                        row,
                        column: headers[j].to_string(),
                        message: format!("not a number: {:?}", &rec[j]),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            records.push(PredictionRecord {
                sample_id: rec[0].to_string(),
                channel,
                values,
            });
        }
        let file = Self { meta, records };
        file.index()?;
        Ok(file)
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let meta_path = sidecar_path(csv_path);
        let meta_bytes = std::fs::read(&meta_path).map_err(|e| {
            Error::Structure(format!("cannot read sidecar {}: {e}", meta_path.display()))
        })?;
        let meta: PredictionMeta = serde_json::from_slice(&meta_bytes)?;
        let csv_bytes = std::fs::read(csv_path)
            .map_err(|e| Error::Structure(format!("cannot read {}: {e}", csv_path.display())))?;
        Self::from_csv(&csv_bytes, meta)
    }

    pub fn write(&self, csv_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()?)?;
        std::fs::write(sidecar_path(csv_path), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }
}

fn missing_error(missing: &[String]) -> Error {
    let shown: Vec<&str> = missing.iter().take(10).map(String::as_str).collect();
    let more = missing.len().saturating_sub(shown.len());
    Error::Alignment(format!(
        "no predictions for {} (sample/channel) pair(s): {}{}",
        missing.len(),
        shown.join(", "),
        if more > 0 { format!(" and {more} more") } else { String::new() }
    ))
}

/// Joins predictions to window targets by `(sample_id, channel)`.
///
/// Record order is irrelevant; records for samples outside `targets` are
/// ignored.
pub fn load_predictions(file: &PredictionFile, targets: &[Window]) -> Result<ForecastBatch> {
    let first = targets
        .first()
        .ok_or_else(|| Error::Config("no windows to align predictions with".into()))?;
    let (h, d) = first.target.dim();
    if file.meta.horizon != h {
        return Err(Error::Alignment(format!(
            "prediction horizon {} does not match window horizon {h}",
            file.meta.horizon
        )));
    }
    if file.meta.channels != d {
        return Err(Error::Alignment(format!(
            "prediction file has {} channels, data has {d}",
            file.meta.channels
        )));
    }
    let ids: Vec<String> = targets.iter().map(|w| w.sample_id.clone()).collect();
    let predictions = file.to_tensor(&ids)?;
    let mut truth = Array3::zeros((targets.len(), h, d));
    for (i, w) in targets.iter().enumerate() {
        truth.slice_mut(ndarray::s![i, .., ..]).assign(&w.target);
    }
    ForecastBatch::new(predictions, truth, ids)
}
