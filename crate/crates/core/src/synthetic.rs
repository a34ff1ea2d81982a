//! Seeded synthetic series and forecast fixtures with planted biases.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::affine::{apply_affine, fit_affine};
use crate::data::{sample_id, RawSeries, RidgeModel};
use crate::error::Result;
use crate::metrics::{mse, ForecastBatch};

pub const FIXTURE_HORIZON: usize = 24;
pub const FIXTURE_CHANNELS: usize = 2;
pub const FIXTURE_SPLITS: [usize; 3] = [64, 32, 32];

/// Train, validation and test batches with disjoint sample ids.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub train: ForecastBatch,
    pub val: ForecastBatch,
    pub test: ForecastBatch,
}

/// Smooth multichannel series with daily-like seasonality and a drift.
pub fn demo_series(rows: usize, channels: usize, seed: u64) -> RawSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array2::zeros((rows, channels));
    for c in 0..channels {
        let level = 10.0 + 2.0 * c as f64;
        let amp = 3.0 + c as f64;
        for t in 0..rows {
            let season = (2.0 * std::f64::consts::PI * t as f64 / 24.0 + c as f64).sin();
            let noise: f64 = rng.sample(StandardNormal);
            values[[t, c]] = level + amp * season + 0.01 * t as f64 + 0.3 * noise;
        }
    }
    let columns = (0..channels).map(|c| format!("ch{c}")).collect();
    RawSeries::new(values, columns).expect("shape matches column count")
}

/// Oscillating forecasts: random amplitude, period and phase per series.
fn oscillations<R: Rng>(n: usize, rng: &mut R) -> Array3<f64> {
    let mut out = Array3::zeros((n, FIXTURE_HORIZON, FIXTURE_CHANNELS));
    for i in 0..n {
        for c in 0..FIXTURE_CHANNELS {
            let amp = 1.0 + 2.0 * rng.random::<f64>();
            let period = 8.0 + 16.0 * rng.random::<f64>();
            let phase = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            let level = 0.2 * rng.sample::<f64, _>(StandardNormal);
            for t in 0..FIXTURE_HORIZON {
                let x = 2.0 * std::f64::consts::PI * t as f64 / period + phase;
                out[[i, t, c]] = level + amp * x.sin();
            }
        }
    }
    out
}

fn ids(offset: usize, n: usize) -> Vec<String> {
    (offset..offset + n).map(sample_id).collect()
}

fn build<F>(seed: u64, mut truth_of: F) -> Fixture
where
    F: FnMut(usize, &Array3<f64>, &mut ChaCha8Rng) -> Array3<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offset = 0;
    let mut batches = Vec::with_capacity(3);
    for (split, &n) in FIXTURE_SPLITS.iter().enumerate() {
        let pred = oscillations(n, &mut rng);
        let truth = truth_of(split, &pred, &mut rng);
        batches.push(ForecastBatch::new(pred, truth, ids(offset, n)).expect("fixture shapes agree"));
        offset += n;
    }
    let test = batches.pop().expect("three splits");
    let val = batches.pop().expect("three splits");
    let train = batches.pop().expect("three splits");
    Fixture { train, val, test }
}

/// `truth = factor × prediction` on every split.
pub fn planted_scale(factor: f64, seed: u64) -> Fixture {
    build(seed, |_, pred, _| pred * factor)
}

/// Validation truth is `1.2 × prediction`; train and test truth are the
/// predictions plus small noise, so correcting the validation bias hurts
/// the training split.
pub fn val_only_bias(seed: u64) -> Fixture {
    build(seed, |split, pred, rng| {
        let scale = if split == 1 { 1.2 } else { 1.0 };
        pred.mapv(|v| scale * v + 0.1 * rng.sample::<f64, _>(StandardNormal))
    })
}

/// Values strictly above each series' 80th percentile are 5% higher in
/// the truth than in the forecast.
pub fn high_quantile_bias(seed: u64) -> Fixture {
    build(seed, |_, pred, _| {
        let mut truth = pred.clone();
        for mut series in truth.lanes_mut(ndarray::Axis(1)) {
            let x: Vec<f64> = series.to_vec();
            let q = crate::actions::kernels::quantile(&x, 0.8);
            for v in series.iter_mut() {
                if *v > q {
                    *v *= 1.05;
                }
            }
        }
        truth
    })
}

/// One ridge-regression trial on a synthetic linear target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTrial {
    pub a: f64,
    pub b: f64,
    pub test_mse_before: f64,
    pub test_mse_after: f64,
}

impl AffineTrial {
    pub fn improvement(&self) -> f64 {
        (self.test_mse_before - self.test_mse_after) / self.test_mse_before
    }
}

pub const TRIAL_FEATURES: usize = 10;
pub const TRIAL_LAMBDA: f64 = 30.0;

/// Fits ridge on `n_train` points of `y = x·w + 0.5 + ε`, fits the affine
/// correction on `n_val` validation forecasts and scores both on `n_test`
/// fresh points.
pub fn affine_trial(seed: u64, n_train: usize, n_val: usize, n_test: usize, lambda: f64) -> Result<AffineTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = TRIAL_FEATURES;
    let w: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let draw = |n: usize, rng: &mut ChaCha8Rng| {
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(n, 1, |i, _| {
            let signal: f64 = (0..p).map(|j| x[(i, j)] * w[j]).sum();
            signal + 0.5 + rng.sample::<f64, _>(StandardNormal)
        });
        (x, y)
    };
    let (x_tr, y_tr) = draw(n_train, &mut rng);
    let (x_va, y_va) = draw(n_val, &mut rng);
    let (x_te, y_te) = draw(n_test, &mut rng);
    let model = RidgeModel::fit(&x_tr, &y_tr, lambda)?;
    let val_pred = model.predict(&x_va);
    let fit = fit_affine(val_pred.as_slice(), y_va.as_slice())?;
    let test_pred = model.predict(&x_te);
    let corrected = apply_affine(&fit, test_pred.as_slice());
    let truth = ndarray::ArrayView1::from(y_te.as_slice());
    Ok(AffineTrial {
        a: fit.a,
        b: fit.b,
        test_mse_before: mse(ndarray::ArrayView1::from(test_pred.as_slice()), truth)?,
        test_mse_after: mse(ndarray::ArrayView1::from(corrected.as_slice()), truth)?,
    })
}
