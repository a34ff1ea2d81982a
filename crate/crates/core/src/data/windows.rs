use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::csv_io::RawSeries;
use crate::error::{Error, Result};
use crate::metrics::SplitSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window: usize,
    pub horizon: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl WindowSpec {
    pub fn new(window: usize, horizon: usize, stride: usize) -> Result<Self> {
        let spec = Self { window, horizon, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "window ({}), horizon ({}) and stride ({}) must all be at least 1",
                self.window, self.horizon, self.stride
            )));
        }
        Ok(())
    }

    /// Rows needed to host a single window.
    pub fn span(&self) -> usize {
        self.window + self.horizon
    }

    pub fn count(&self, rows: usize) -> usize {
        if rows < self.span() {
            0
        } else {
            (rows - self.span()) / self.stride + 1
        }
    }
}

/// One forecasting example: `W` context rows followed by `H` target rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub context: Array2<f64>,
    pub target: Array2<f64>,
    /// Encodes the global row offset of the window's first context row.
    pub sample_id: String,
    pub offset: usize,
}

pub fn sample_id(offset: usize) -> String {
    format!("t{offset}")
}

fn segment_lengths(rows: usize, split: &SplitSpec) -> (usize, usize, usize) {
    let val = (rows as f64 * split.val).floor() as usize;
    let test = (rows as f64 * split.test).floor() as usize;
    (rows - val - test, val, test)
}

/// Contiguous train/validation/test segments in time order.
///
/// Validation and test sizes are floored; the remainder goes to train.
pub fn chronological_split(
    series: &RawSeries,
    split: &SplitSpec,
    windows: &WindowSpec,
) -> Result<(RawSeries, RawSeries, RawSeries)> {
    split.validate()?;
    windows.validate()?;
    let rows = series.len();
    let (train, val, test) = segment_lengths(rows, split);
    let need = windows.span();
    if train < need || val < need || test < need {
        let min_rows = (rows.max(1)..rows.max(1) * 2 + need * 1000)
            .find(|&t| {
                let (a, b, c) = segment_lengths(t, split);
                a >= need && b >= need && c >= need
            })
            .map(|t| format!("; at least {t} rows are required"))
            .unwrap_or_default();
        return Err(Error::Config(format!(
            "series of {rows} rows splits into {train}/{val}/{test}, but every segment must hold \
             window + horizon = {need} rows{min_rows}"
        )));
    }
    Ok((
        series.slice_rows(0, train),
        series.slice_rows(train, train + val),
        series.slice_rows(train + val, rows),
    ))
}

/// Sliding windows at offsets `0, stride, 2·stride, …` within the series.
pub fn make_windows(series: &RawSeries, spec: &WindowSpec) -> Result<Vec<Window>> {
    spec.validate()?;
    let rows = series.len();
    if spec.span() > rows {
        return Err(Error::Config(format!(
            "window {} + horizon {} exceeds series length {rows}",
            spec.window, spec.horizon
        )));
    }
    Ok((0..spec.count(rows))
        .map(|k| {
            let start = k * spec.stride;
            let mid = start + spec.window;
            let offset = series.start_row + start;
            Window {
                context: series.values.slice(s![start..mid, ..]).to_owned(),
                target: series.values.slice(s![mid..mid + spec.horizon, ..]).to_owned(),
                sample_id: sample_id(offset),
                offset,
            }
        })
        .collect())
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    /// Constant channels get unit scale.
    pub fn fit(series: &RawSeries) -> Self {
        let n = series.len() as f64;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for col in series.values.columns() {
            let m = col.sum() / n;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push(if v > 0.0 { v.sqrt() } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn apply(&self, series: &RawSeries) -> RawSeries {
        let mut out = series.clone();
        for (j, mut col) in out.values.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.mapv_inplace(|x| (x - m) / s);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(rows: usize, cols: usize) -> RawSeries {
        let values = Array2::from_shape_fn((rows, cols), |(i, j)| (i * 10 + j) as f64);
        RawSeries::new(values, (0..cols).map(|j| format!("c{j}")).collect()).unwrap()
    }

    #[test]
    fn split_sizes() {
        let w = WindowSpec::new(2, 1, 1).unwrap();
        let (a, b, c) = chronological_split(&series(100, 1), &SplitSpec::default(), &w).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        let (a, b, c) = chronological_split(&series(101, 1), &SplitSpec::default(), &w).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (61, 20, 20));
        assert_eq!((b.start_row, c.start_row), (61, 81));
        // Order and disjointness.
        assert_eq!(a.values[[60, 0]] + 10.0, b.values[[0, 0]]);
    }

    #[test]
    fn split_too_short() {
        let w = WindowSpec::new(8, 4, 1).unwrap();
        let err = chronological_split(&series(10, 1), &SplitSpec::default(), &w).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("at least 60 rows"), "{msg}");
    }

    #[test]
    fn window_counts() {
        let s = series(5, 1);
        let w = make_windows(&s, &WindowSpec::new(2, 1, 1).unwrap()).unwrap();
        assert_eq!(w.iter().map(|w| w.offset).collect::<Vec<_>>(), vec![0, 1, 2]);
        let w = make_windows(&s, &WindowSpec::new(2, 1, 2).unwrap()).unwrap();
        assert_eq!(w.len(), 2);
        assert!(make_windows(&s, &WindowSpec::new(4, 2, 1).unwrap()).is_err());
        assert!(WindowSpec::new(0, 1, 1).is_err());
    }

    #[test]
    fn window_targets_match_brute_force() {
        let s = series(23, 3).slice_rows(4, 23);
        let spec = WindowSpec::new(5, 3, 2).unwrap();
        let windows = make_windows(&s, &spec).unwrap();
        // Enumerate every admissible start directly.
        let mut expected = Vec::new();
        let mut k = 0;
        while k + 5 + 3 <= s.len() {
            expected.push(k);
            k += 2;
        }
        assert_eq!(windows.len(), expected.len());
        for (w, k) in windows.iter().zip(expected) {
            assert_eq!(w.sample_id, sample_id(k + 4));
            for h in 0..3 {
                for c in 0..3 {
                    assert_eq!(w.target[[h, c]], s.values[[k + 5 + h, c]]);
                }
            }
            assert_eq!(w.context[[0, 0]], s.values[[k, 0]]);
        }
    }

    #[test]
    fn zscore_roundtrip_stats() {
        let s = series(10, 2);
        let z = ZScore::fit(&s);
        let n = z.apply(&s);
        for col in n.values.columns() {
            assert!(col.sum().abs() < 1e-9);
        }
    }
}
