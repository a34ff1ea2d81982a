//! Forecast batches and the evaluation metrics every other module consumes.
//!
//! All metrics are accumulated in `f64` and averaged uniformly over
//! samples × horizon × channels, so the relative improvement is invariant to
//! how the tensor is reshaped.

use ndarray::{Array3, ArrayView, ArrayView3, Axis, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aligned predictions and ground truth, shaped `[samples, horizon, channels]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastBatch {
    predictions: Array3<f64>,
    truth: Array3<f64>,
    sample_ids: Vec<String>,
}

impl ForecastBatch {
    pub fn new(predictions: Array3<f64>, truth: Array3<f64>, sample_ids: Vec<String>) -> Result<Self> {
        if predictions.shape() != truth.shape() {
            return Err(Error::Dimension(format!(
                "predictions {:?} vs truth {:?}",
                predictions.shape(),
                truth.shape()
            )));
        }
        let (n, h, d) = predictions.dim();
        if n == 0 || h == 0 || d == 0 {
            return Err(Error::Dimension(format!(
                "batch must be non-empty in every axis, got [{n}, {h}, {d}]"
            )));
        }
        if sample_ids.len() != n {
            return Err(Error::Dimension(format!(
                "{} sample ids for {n} samples",
                sample_ids.len()
            )));
        }
        ensure_finite(predictions.view(), "predictions")?;
        ensure_finite(truth.view(), "truth")?;
        Ok(Self {
            predictions,
            truth,
            sample_ids,
        })
    }

    pub fn predictions(&self) -> ArrayView3<'_, f64> {
        self.predictions.view()
    }

    pub fn truth(&self) -> ArrayView3<'_, f64> {
        self.truth.view()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn n_samples(&self) -> usize {
        self.predictions.dim().0
    }

    pub fn horizon(&self) -> usize {
        self.predictions.dim().1
    }

    pub fn channels(&self) -> usize {
        self.predictions.dim().2
    }

    /// Same truth and ids, different predictions.
    pub fn with_predictions(&self, predictions: Array3<f64>) -> Result<Self> {
        Self::new(predictions, self.truth.clone(), self.sample_ids.clone())
    }

    pub fn mse(&self) -> f64 {
        squared_error_mean(self.predictions.view(), self.truth.view())
    }
}

fn ensure_finite<D: Dimension>(values: ArrayView<'_, f64, D>, what: &str) -> Result<()> {
    if let Some((idx, v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite value {v} in {what} at {:?}",
            idx
        )));
    }
    Ok(())
}

fn squared_error_mean<D: Dimension>(pred: ArrayView<'_, f64, D>, truth: ArrayView<'_, f64, D>) -> f64 {
    let n = pred.len();
    let sum: f64 = pred
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    sum / n as f64
}

/// Mean over all elements of the squared difference.
pub fn mse<D: Dimension>(pred: ArrayView<'_, f64, D>, truth: ArrayView<'_, f64, D>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "pred {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Dimension("mse of an empty tensor".into()));
    }
    ensure_finite(pred.view(), "pred")?;
    ensure_finite(truth.view(), "truth")?;
    Ok(squared_error_mean(pred, truth))
}

/// Relative improvement `(before - after) / before`, as a fraction.
///
/// Undefined when `before` is not strictly positive.
pub fn relative_improvement(mse_before: f64, mse_after: f64) -> Result<f64> {
    if !(mse_before > 0.0) || !mse_before.is_finite() {
        return Err(Error::Domain(format!(
            "relative improvement needs mse_before > 0, got {mse_before}"
        )));
    }
    Ok((mse_before - mse_after) / mse_before)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub channel: usize,
    pub mse_before: f64,
    pub mse_after: f64,
    /// `None` when the channel's baseline error is zero.
    pub improvement_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse_before: f64,
    pub mse_after: f64,
    pub improvement_m: Option<f64>,
    pub per_channel: Vec<ChannelReport>,
    pub train_consistent: Option<bool>,
}

impl EvalReport {
    pub fn rmse_before(&self) -> f64 {
        self.mse_before.sqrt()
    }

    pub fn rmse_after(&self) -> f64 {
        self.mse_after.sqrt()
    }
}

/// Global and per-channel MSE before/after a correction.
///
/// `train_consistent` is left unset; callers that ran the guard fill it in.
pub fn per_channel_report(before: &ForecastBatch, after: &ForecastBatch) -> Result<EvalReport> {
    if before.predictions.shape() != after.predictions.shape() {
        return Err(Error::Dimension(format!(
            "before {:?} vs after {:?}",
            before.predictions.shape(),
            after.predictions.shape()
        )));
    }
    if before.truth != after.truth {
        return Err(Error::Dimension("batches do not share ground truth".into()));
    }
    let truth = before.truth();
    let mut per_channel = Vec::with_capacity(before.channels());
    for c in 0..before.channels() {
        let t = truth.index_axis(Axis(2), c);
        let b = squared_error_mean(before.predictions.index_axis(Axis(2), c), t);
        let a = squared_error_mean(after.predictions.index_axis(Axis(2), c), t);
        per_channel.push(ChannelReport {
            channel: c,
            mse_before: b,
            mse_after: a,
            improvement_m: relative_improvement(b, a).ok(),
        });
    }
    let mse_before = before.mse();
    let mse_after = after.mse();
    Ok(EvalReport {
        mse_before,
        mse_after,
        improvement_m: relative_improvement(mse_before, mse_after).ok(),
        per_channel,
        train_consistent: None,
    })
}

/// Uniform average of several reports, e.g. one per forecast horizon.
///
/// Channel rows are averaged index-wise; reports must agree on channel count.
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Validation("no reports to average".into()))?;
    let d = first.per_channel.len();
    if reports.iter().any(|r| r.per_channel.len() != d) {
        return Err(Error::Dimension("reports disagree on channel count".into()));
    }
    let k = reports.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    let mse_before = mean(&|r| r.mse_before);
    let mse_after = mean(&|r| r.mse_after);
    let per_channel = (0..d)
        .map(|c| {
            let b = mean(&|r| r.per_channel[c].mse_before);
            let a = mean(&|r| r.per_channel[c].mse_after);
            ChannelReport {
                channel: c,
                mse_before: b,
                mse_after: a,
                improvement_m: relative_improvement(b, a).ok(),
            }
        })
        .collect();
    let train_consistent = reports
        .iter()
        .map(|r| r.train_consistent)
        .try_fold(true, |acc, v| v.map(|v| acc && v));
    Ok(EvalReport {
        mse_before,
        mse_after,
        improvement_m: relative_improvement(mse_before, mse_after).ok(),
        per_channel,
        train_consistent,
    })
}

/// Train/validation/test fractions of a chronological split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let spec = Self { train, val, test };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} fraction must lie in (0, 1), got {v}")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(pred: Vec<f64>, truth: Vec<f64>, shape: (usize, usize, usize)) -> ForecastBatch {
        let ids = (0..shape.0).map(|i| format!("s{i}")).collect();
        ForecastBatch::new(
            Array3::from_shape_vec(shape, pred).unwrap(),
            Array3::from_shape_vec(shape, truth).unwrap(),
            ids,
        )
        .unwrap()
    }

    #[test]
    fn mse_examples() {
        let a = arr1(&[1.0, 2.0, 3.0]);
        assert_eq!(mse(a.view(), a.view()).unwrap(), 0.0);
        assert_eq!(mse(arr1(&[0.0, 0.0]).view(), arr1(&[1.0, 1.0]).view()).unwrap(), 1.0);
        let m = mse(a.view(), arr1(&[2.0, 2.0, 2.0]).view()).unwrap();
        assert!((m - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mse_errors() {
        let a = arr1(&[1.0, 2.0]);
        let b = arr1(&[1.0, 2.0, 3.0]);
        assert!(matches!(mse(a.view(), b.view()), Err(Error::Dimension(_))));
        let nan = arr1(&[1.0, f64::NAN]);
        assert!(matches!(mse(nan.view(), a.view()), Err(Error::Validation(_))));
    }

    #[test]
    fn relative_improvement_examples() {
        assert_eq!(relative_improvement(1.0, 0.5).unwrap(), 0.5);
        assert_eq!(relative_improvement(0.7, 0.7).unwrap(), 0.0);
        let m = relative_improvement(0.61, 0.51).unwrap();
        assert!((m - 0.163_934).abs() < 1e-6);
        // The published 16.76% comes from unrounded MSEs; any inputs that
        // round to 0.61 and 0.51 bracket it.
        let lo = relative_improvement(0.605, 0.515).unwrap();
        let hi = relative_improvement(0.615, 0.505).unwrap();
        assert!(lo < 0.1676 && 0.1676 < hi);
        assert!(matches!(relative_improvement(0.0, 0.1), Err(Error::Domain(_))));
        assert!(relative_improvement(-1.0, 0.1).is_err());
    }

    #[test]
    fn report_no_op_is_zero() {
        let b = batch(vec![1.0, 2.0, 3.0, 4.0], vec![1.5, 2.0, 2.0, 4.5], (2, 1, 2));
        let r = per_channel_report(&b, &b).unwrap();
        assert_eq!(r.improvement_m, Some(0.0));
        assert!(r.per_channel.iter().all(|c| c.improvement_m == Some(0.0)));
        assert_eq!(r.train_consistent, None);
    }

    #[test]
    fn report_single_channel_matches_global() {
        // mse before 1.0, after 0.25
        let before = batch(vec![1.0, -1.0], vec![0.0, 0.0], (2, 1, 1));
        let after = before
            .with_predictions(Array3::from_shape_vec((2, 1, 1), vec![0.5, -0.5]).unwrap())
            .unwrap();
        let r = per_channel_report(&before, &after).unwrap();
        assert_eq!(r.mse_before, 1.0);
        assert_eq!(r.mse_after, 0.25);
        assert_eq!(r.improvement_m, Some(0.75));
        assert_eq!(r.per_channel.len(), 1);
        assert_eq!(r.per_channel[0].improvement_m, Some(0.75));
    }

    #[test]
    fn report_two_channels_global_between_channel_values() {
        // Equal-energy channels: unit-variance errors, then shrink channel 0
        // errors so its M = 0.2 and grow channel 1 errors so its M = -0.1.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n, h) = (40, 5);
        let truth: Vec<f64> = (0..n * h * 2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let err: Vec<f64> = (0..n * h * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pred: Vec<f64> = truth.iter().zip(&err).map(|(t, e)| t + e).collect();
        let before = batch(pred, truth.clone(), (n, h, 2));
        let scale = [0.8_f64.sqrt(), 1.1_f64.sqrt()];
        let mut corrected = before.predictions().to_owned();
        for ((i, j, c), v) in corrected.indexed_iter_mut() {
            let t = before.truth()[[i, j, c]];
            *v = t + (*v - t) * scale[c];
        }
        let after = before.with_predictions(corrected).unwrap();
        let r = per_channel_report(&before, &after).unwrap();
        let m0 = r.per_channel[0].improvement_m.unwrap();
        let m1 = r.per_channel[1].improvement_m.unwrap();
        assert!((m0 - 0.2).abs() < 1e-12);
        assert!((m1 + 0.1).abs() < 1e-12);
        let g = r.improvement_m.unwrap();
        assert!(g > -0.1 && g < 0.2, "global {g}");
        // Global MSE is the equal-weight mean of channel MSEs.
        let mean_ch = (r.per_channel[0].mse_before + r.per_channel[1].mse_before) / 2.0;
        assert!((mean_ch - r.mse_before).abs() < 1e-12);
    }

    #[test]
    fn batch_rejects_bad_shapes_and_values() {
        let p = Array3::<f64>::zeros((2, 3, 1));
        let t = Array3::<f64>::zeros((2, 3, 2));
        assert!(ForecastBatch::new(p.clone(), t, vec!["a".into(), "b".into()]).is_err());
        let mut bad = p.clone();
        bad[[0, 0, 0]] = f64::INFINITY;
        assert!(ForecastBatch::new(bad, p.clone(), vec!["a".into(), "b".into()]).is_err());
        assert!(ForecastBatch::new(p.clone(), p, vec!["a".into()]).is_err());
    }

    #[test]
    fn average_reports_uniform() {
        let b = batch(vec![1.0, 0.0], vec![0.0, 0.0], (2, 1, 1));
        let a = b
            .with_predictions(Array3::from_shape_vec((2, 1, 1), vec![0.0, 0.0]).unwrap())
            .unwrap();
        let r1 = per_channel_report(&b, &a).unwrap();
        let r2 = per_channel_report(&b, &b).unwrap();
        let avg = average_reports(&[r1, r2]).unwrap();
        assert_eq!(avg.mse_before, 0.5);
        assert_eq!(avg.mse_after, 0.25);
        assert_eq!(avg.improvement_m, Some(0.5));
        assert!(average_reports(&[]).is_err());
    }

    #[test]
    fn split_spec_validation() {
        assert!(SplitSpec::new(0.6, 0.2, 0.2).is_ok());
        assert!(SplitSpec::new(0.6, 0.3, 0.2).is_err());
        assert!(SplitSpec::new(1.0, 0.0, 0.0).is_err());
    }
}
