//! Dataset ingestion, chronological splits, windowing and the prediction
//! file interchange that decouples the engine from any base forecaster.

mod baseline;
mod csv_io;
mod predictions;
mod windows;

pub use baseline::{persistence, BaselineKind, RidgeForecaster, RidgeModel, DEFAULT_RIDGE_LAMBDA};
pub use csv_io::{parse_csv, write_csv, RawSeries};
pub use predictions::{load_predictions, sidecar_path, PredictionFile, PredictionMeta, PredictionRecord};
pub use windows::{chronological_split, make_windows, sample_id, Window, WindowSpec, ZScore};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{ForecastBatch, SplitSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub windows: WindowSpec,
    #[serde(default)]
    pub split: SplitSpec,
    /// Z-score every channel with train-segment statistics before windowing.
    /// External prediction files must then be in normalized units too.
    #[serde(default)]
    pub normalize: bool,
}

/// Where the base forecasts come from.
#[derive(Clone, Debug, PartialEq)]
pub enum PredictionSource {
    File(PredictionFile),
    Baseline(BaselineKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSummary {
    pub rows: usize,
    pub channels: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
}

/// Test split that is only materialized on request.
#[derive(Clone, Debug)]
pub struct SealedSplit {
    batch: ForecastBatch,
}

impl SealedSplit {
    pub fn len(&self) -> usize {
        self.batch.n_samples()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn unseal(self) -> ForecastBatch {
        self.batch
    }
}

/// Everything the optimizer needs, built eagerly and fully validated.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub columns: Vec<String>,
    pub train: ForecastBatch,
    pub val: ForecastBatch,
    pub test: SealedSplit,
    /// Base predictions for every window of every split.
    pub predictions: PredictionFile,
    pub summary: DataSummary,
}

/// Windows of each split, in train/val/test order.
pub fn split_windows(series: &RawSeries, cfg: &DatasetConfig) -> Result<[Vec<Window>; 3]> {
    let (train, val, test) = chronological_split(series, &cfg.split, &cfg.windows)?;
    let (train, val, test) = if cfg.normalize {
        let z = ZScore::fit(&train);
        (z.apply(&train), z.apply(&val), z.apply(&test))
    } else {
        (train, val, test)
    };
    Ok([
        make_windows(&train, &cfg.windows)?,
        make_windows(&val, &cfg.windows)?,
        make_windows(&test, &cfg.windows)?,
    ])
}

pub fn prepare(series: &RawSeries, cfg: &DatasetConfig, source: &PredictionSource) -> Result<PreparedData> {
    let [train_w, val_w, test_w] = split_windows(series, cfg)?;
    let all: Vec<Window> = train_w.iter().chain(&val_w).chain(&test_w).cloned().collect();
    let predictions = match source {
        PredictionSource::File(file) => file.clone(),
        PredictionSource::Baseline(BaselineKind::Persistence) => persistence(&all)?,
        PredictionSource::Baseline(BaselineKind::Ridge) => {
            RidgeForecaster::fit(&train_w, DEFAULT_RIDGE_LAMBDA)?.predict(&all)?
        }
    };
    let train = load_predictions(&predictions, &train_w)?;
    let val = load_predictions(&predictions, &val_w)?;
    let test = load_predictions(&predictions, &test_w)?;
    Ok(PreparedData {
        columns: series.columns.clone(),
        summary: DataSummary {
            rows: series.len(),
            channels: series.channels(),
            train_windows: train.n_samples(),
            val_windows: val.n_samples(),
            test_windows: test.n_samples(),
        },
        train,
        val,
        test: SealedSplit { batch: test },
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    #[test]
    fn prepare_with_baselines() {
        let series = synthetic::demo_series(300, 2, 1);
        let cfg = DatasetConfig {
            windows: WindowSpec::new(24, 12, 1).unwrap(),
            split: SplitSpec::default(),
            normalize: false,
        };
        for kind in [BaselineKind::Persistence, BaselineKind::Ridge] {
            let p = prepare(&series, &cfg, &PredictionSource::Baseline(kind)).unwrap();
            assert_eq!(p.summary.train_windows, 180 - 36 + 1);
            assert_eq!(p.summary.val_windows, 60 - 36 + 1);
            assert_eq!(p.test.len(), 25);
            assert!(p.val.mse() > 0.0);
        }
    }

    #[test]
    fn normalized_splits_use_train_statistics() {
        let series = synthetic::demo_series(200, 1, 2);
        let cfg = DatasetConfig {
            windows: WindowSpec::new(4, 2, 1).unwrap(),
            split: SplitSpec::default(),
            normalize: true,
        };
        let [train, _, _] = split_windows(&series, &cfg).unwrap();
        let first = train[0].context[[0, 0]];
        let raw = series.values[[0, 0]];
        let z = ZScore::fit(&series.slice_rows(0, 120));
        assert!((first - (raw - z.mean[0]) / z.std[0]).abs() < 1e-12);
    }
}
