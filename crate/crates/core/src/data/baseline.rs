//! Built-in base forecasters for self-contained runs.

use nalgebra::{DMatrix, DVector};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::predictions::{PredictionFile, PredictionMeta};
use super::windows::Window;
use crate::error::{Error, Result};

pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Persistence,
    Ridge,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "persistence" => Ok(BaselineKind::Persistence),
            "ridge" => Ok(BaselineKind::Ridge),
            other => Err(Error::Validation(format!("unknown baseline {other:?}"))),
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineKind::Persistence => "persistence",
            BaselineKind::Ridge => "ridge",
        })
    }
}

/// Multi-output ridge regression with an unpenalized intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    /// `[features × outputs]`
    pub coef: DMatrix<f64>,
    pub intercept: DVector<f64>,
}

impl RidgeModel {
    /// Solves `(XcᵀXc + λI) B = XcᵀYc` on centered data.
    pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        if x.nrows() != y.nrows() || x.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "ridge: {} feature rows vs {} target rows",
                x.nrows(),
                y.nrows()
            )));
        }
        if !(lambda >= 0.0) {
            return Err(Error::Validation(format!("ridge lambda must be >= 0, got {lambda}")));
        }
        let x_mean = x.row_mean();
        let y_mean = y.row_mean();
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= &x_mean;
        }
        let mut yc = y.clone();
        for mut row in yc.row_iter_mut() {
            row -= &y_mean;
        }
        let mut gram = xc.transpose() * &xc;
        for i in 0..gram.nrows() {
            gram[(i, i)] += lambda;
        }
        let rhs = xc.transpose() * &yc;
        let coef = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => gram
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .map_err(|e| Error::Internal(format!("ridge solve failed: {e}")))?,
        };
        let intercept = (y_mean - x_mean * &coef).transpose();
        Ok(Self { coef, intercept })
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * &self.coef;
        for mut row in out.row_iter_mut() {
            row += self.intercept.transpose();
        }
        out
    }
}

fn meta_for(windows: &[Window], model: &str) -> Result<PredictionMeta> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Config("no windows to forecast".into()))?;
    Ok(PredictionMeta {
        window: first.context.nrows(),
        horizon: first.target.nrows(),
        channels: first.target.ncols(),
        model: model.to_string(),
    })
}

fn to_file(windows: &[Window], meta: PredictionMeta, values: Array3<f64>) -> Result<PredictionFile> {
    let ids: Vec<String> = windows.iter().map(|w| w.sample_id.clone()).collect();
    PredictionFile::from_tensor(meta, &ids, values.view())
}

/// Repeats the last context value over the horizon.
pub fn persistence(windows: &[Window]) -> Result<PredictionFile> {
    let meta = meta_for(windows, "persistence")?;
    let (h, d) = (meta.horizon, meta.channels);
    let mut out = Array3::zeros((windows.len(), h, d));
    for (i, w) in windows.iter().enumerate() {
        let last = w.context.row(w.context.nrows() - 1);
        for t in 0..h {
            for c in 0..d {
                out[[i, t, c]] = last[c];
            }
        }
    }
    to_file(windows, meta, out)
}

/// One ridge model per channel mapping `W` lags to `H` outputs.
#[derive(Clone, Debug)]
pub struct RidgeForecaster {
    pub lambda: f64,
    models: Vec<RidgeModel>,
}

impl RidgeForecaster {
    pub fn fit(train: &[Window], lambda: f64) -> Result<Self> {
        let meta = meta_for(train, "ridge")?;
        let models = (0..meta.channels)
            .map(|c| {
                let x = DMatrix::from_fn(train.len(), meta.window, |i, j| train[i].context[[j, c]]);
                let y = DMatrix::from_fn(train.len(), meta.horizon, |i, j| train[i].target[[j, c]]);
                RidgeModel::fit(&x, &y, lambda)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { lambda, models })
    }

    pub fn predict(&self, windows: &[Window]) -> Result<PredictionFile> {
        let meta = meta_for(windows, "ridge")?;
        if meta.channels != self.models.len() {
            return Err(Error::Dimension(format!(
                "ridge fitted on {} channels, asked for {}",
                self.models.len(),
                meta.channels
            )));
        }
        let mut out = Array3::zeros((windows.len(), meta.horizon, meta.channels));
        for (c, model) in self.models.iter().enumerate() {
            let x = DMatrix::from_fn(windows.len(), meta.window, |i, j| windows[i].context[[j, c]]);
            let y = model.predict(&x);
            for i in 0..windows.len() {
                for t in 0..meta.horizon {
                    out[[i, t, c]] = y[(i, t)];
                }
            }
        }
        to_file(windows, meta, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, RawSeries, WindowSpec};
    use ndarray::Array2;

    #[test]
    fn persistence_repeats_last_value() {
        let values = Array2::from_shape_vec((4, 1), vec![1.0, 3.0, 5.0, 9.0]).unwrap();
        let s = RawSeries::new(values, vec!["x".into()]).unwrap();
        let ws = make_windows(&s, &WindowSpec::new(2, 2, 1).unwrap()).unwrap();
        let f = persistence(&ws).unwrap();
        assert_eq!(f.records[0].values, vec![3.0, 3.0]);
    }

    #[test]
    fn ridge_matches_least_squares_on_linear_data() {
        // Oracle: y = 2 x0 - x1 + 0.5 x2 + 4 exactly; λ → 0 recovers it.
        let n = 40;
        let x = DMatrix::from_fn(n, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 + 0.1 * j as f64 * i as f64);
        let y = DMatrix::from_fn(n, 1, |i, _| 2.0 * x[(i, 0)] - x[(i, 1)] + 0.5 * x[(i, 2)] + 4.0);
        let m = RidgeModel::fit(&x, &y, 1e-10).unwrap();
        assert!((m.coef[(0, 0)] - 2.0).abs() < 1e-6);
        assert!((m.coef[(1, 0)] + 1.0).abs() < 1e-6);
        assert!((m.intercept[0] - 4.0).abs() < 1e-5);
        let err = (m.predict(&x) - &y).norm() / (n as f64).sqrt();
        assert!(err < 1e-6);
    }

    #[test]
    fn heavy_regularization_shrinks_to_intercept() {
        let n = 30;
        let x = DMatrix::from_fn(n, 2, |i, j| (i + j) as f64);
        let y = DMatrix::from_fn(n, 1, |i, _| 3.0 * i as f64 + 1.0);
        let m = RidgeModel::fit(&x, &y, 1e12).unwrap();
        let mean_y = y.mean();
        for v in m.predict(&x).iter() {
            assert!((v - mean_y).abs() < 1e-3);
        }
    }

    #[test]
    fn ridge_forecaster_on_linear_series() {
        // A straight line is predicted exactly by lags.
        let values = Array2::from_shape_fn((60, 2), |(i, j)| i as f64 * (1.0 + j as f64));
        let s = RawSeries::new(values, vec!["a".into(), "b".into()]).unwrap();
        let ws = make_windows(&s, &WindowSpec::new(4, 3, 1).unwrap()).unwrap();
        let model = RidgeForecaster::fit(&ws, 1e-8).unwrap();
        let f = model.predict(&ws).unwrap();
        let batch = crate::data::load_predictions(&f, &ws).unwrap();
        assert!(batch.mse() < 1e-8, "{}", batch.mse());
    }
}
