//! The catalog of post-training transformations.
//!
//! Every action acts on one `(sample, channel)` series of length `H` at a
//! time; the per-series statistics (`x_max`, `x_min`, mean, quantiles) are
//! never pooled across samples or channels.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affine::AffineTail;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    LinearTrendSlope,
    LinearTrendIntercept,
    PiecewiseScaleHigh,
    PiecewiseScaleLow,
    SwapSeries,
    ShiftSeries,
    ScaleAmplitude,
    AddNoise,
    IncreaseMinimumFactor,
}

/// Inclusive bounds of one continuous (or integer) action parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamRange {
    pub name: &'static str,
    pub low: f64,
    pub high: f64,
    pub integer_valued: bool,
}

impl ParamRange {
    const fn real(name: &'static str, low: f64, high: f64) -> Self {
        Self {
            name,
            low,
            high,
            integer_valued: false,
        }
    }

    /// Real parameters accept the closed interval. Integer parameters accept
    /// integers strictly inside the bounds.
    pub fn contains(&self, v: f64) -> bool {
        if self.integer_valued {
            v.fract() == 0.0 && v > self.low && v < self.high
        } else {
            v >= self.low && v <= self.high
        }
    }

    /// Nearest admissible value.
    pub fn clamp(&self, v: f64) -> f64 {
        if self.integer_valued {
            v.round().clamp(self.low + 1.0, self.high - 1.0)
        } else {
            v.clamp(self.low, self.high)
        }
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }
}

const SLOPE: [ParamRange; 1] = [ParamRange::real("s", -5.0, 5.0)];
const INTERCEPT: [ParamRange; 1] = [ParamRange::real("b", -5.0, 5.0)];
const PIECEWISE_HIGH: [ParamRange; 2] = [
    ParamRange::real("delta", 70.0, 100.0),
    ParamRange::real("f", -1.0, 10.0),
];
const PIECEWISE_LOW: [ParamRange; 2] = [
    ParamRange::real("delta", 0.0, 30.0),
    ParamRange::real("f", -1.0, 10.0),
];
const SHIFT: [ParamRange; 1] = [ParamRange {
    name: "shift",
    low: -200.0,
    high: 200.0,
    integer_valued: true,
}];
const AMPLITUDE: [ParamRange; 1] = [ParamRange::real("f", -5.0, 5.0)];
const NOISE: [ParamRange; 1] = [ParamRange::real("sigma", 10.0, 30.0)];
const MIN_FACTOR: [ParamRange; 1] = [ParamRange::real("f", -1.0, 10.0)];

impl ActionKind {
    pub const ALL: [ActionKind; 9] = [
        ActionKind::LinearTrendSlope,
        ActionKind::LinearTrendIntercept,
        ActionKind::PiecewiseScaleHigh,
        ActionKind::PiecewiseScaleLow,
        ActionKind::SwapSeries,
        ActionKind::ShiftSeries,
        ActionKind::ScaleAmplitude,
        ActionKind::AddNoise,
        ActionKind::IncreaseMinimumFactor,
    ];

    pub fn params(self) -> &'static [ParamRange] {
        match self {
            ActionKind::LinearTrendSlope => &SLOPE,
            ActionKind::LinearTrendIntercept => &INTERCEPT,
            ActionKind::PiecewiseScaleHigh => &PIECEWISE_HIGH,
            ActionKind::PiecewiseScaleLow => &PIECEWISE_LOW,
            ActionKind::SwapSeries => &[],
            ActionKind::ShiftSeries => &SHIFT,
            ActionKind::ScaleAmplitude => &AMPLITUDE,
            ActionKind::AddNoise => &NOISE,
            ActionKind::IncreaseMinimumFactor => &MIN_FACTOR,
        }
    }

    pub fn arity(self) -> usize {
        self.params().len()
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::LinearTrendSlope => "LinearTrendSlope",
            ActionKind::LinearTrendIntercept => "LinearTrendIntercept",
            ActionKind::PiecewiseScaleHigh => "PiecewiseScaleHigh",
            ActionKind::PiecewiseScaleLow => "PiecewiseScaleLow",
            ActionKind::SwapSeries => "SwapSeries",
            ActionKind::ShiftSeries => "ShiftSeries",
            ActionKind::ScaleAmplitude => "ScaleAmplitude",
            ActionKind::AddNoise => "AddNoise",
            ActionKind::IncreaseMinimumFactor => "IncreaseMinimumFactor",
        }
    }

    pub fn param_index(self, name: &str) -> Option<usize> {
        self.params().iter().position(|p| p.name == name)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ActionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown action kind {s:?}")))
    }
}

/// Pure per-series formulas, without parameter validation.
pub mod kernels {
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn factor(f: f64) -> f64 {
        1.0 + f / 100.0
    }

    pub fn mean(x: &[f64]) -> f64 {
        x.iter().sum::<f64>() / x.len() as f64
    }

    /// Linear-interpolation quantile of the sorted values, `p` in `[0, 1]`.
    pub fn quantile(x: &[f64], p: f64) -> f64 {
        let mut sorted = x.to_vec();
        sorted.sort_by(f64::total_cmp);
        let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }

    /// `y_t = x_t + (s/100)(x_max - x_min) t` for `t = 1..=H`.
    pub fn linear_trend_slope(x: &[f64], s: f64) -> Vec<f64> {
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = x.iter().copied().fold(f64::INFINITY, f64::min);
        let step = s / 100.0 * (max - min);
        x.iter()
            .enumerate()
            .map(|(i, v)| v + step * (i + 1) as f64)
            .collect()
    }

    pub fn linear_trend_intercept(x: &[f64], b: f64) -> Vec<f64> {
        let offset = b / 100.0 * mean(x);
        x.iter().map(|v| v + offset).collect()
    }

    /// Scales values strictly above the `delta` percentile.
    pub fn piecewise_scale_high(x: &[f64], delta: f64, f: f64) -> Vec<f64> {
        let q = quantile(x, delta / 100.0);
        let k = factor(f);
        x.iter().map(|&v| if v > q { v * k } else { v }).collect()
    }

    /// Scales values at or below the `delta` percentile.
    pub fn piecewise_scale_low(x: &[f64], delta: f64, f: f64) -> Vec<f64> {
        let q = quantile(x, delta / 100.0);
        let k = factor(f);
        x.iter().map(|&v| if v <= q { v * k } else { v }).collect()
    }

    /// Reflection about the series mean.
    pub fn swap_series(x: &[f64]) -> Vec<f64> {
        let m = mean(x);
        x.iter().map(|v| -(v - m) + m).collect()
    }

    /// `y_t = x_{t+shift}` with edge replication outside the series.
    pub fn shift_series(x: &[f64], shift: i64) -> Vec<f64> {
        let last = x.len() as i64 - 1;
        (0..x.len() as i64)
            .map(|t| x[(t + shift).clamp(0, last) as usize])
            .collect()
    }

    pub fn scale_amplitude(x: &[f64], f: f64) -> Vec<f64> {
        let k = factor(f);
        x.iter().map(|v| v * k).collect()
    }

    /// Adds zero-mean Gaussian noise with standard deviation `(sigma/100)|x_t|`.
    pub fn add_noise<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let z: f64 = rng.sample(StandardNormal);
                v + z * sigma / 100.0 * v.abs()
            })
            .collect()
    }

    /// Scales values at or below the 10th percentile.
    pub fn increase_minimum_factor(x: &[f64], f: f64) -> Vec<f64> {
        piecewise_scale_low(x, 10.0, f)
    }
}

/// One action kind with its bound parameters, in catalog order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WireAction", into = "WireAction")]
pub struct ActionInstance {
    kind: ActionKind,
    params: Vec<f64>,
}

impl ActionInstance {
    pub fn new(kind: ActionKind, params: Vec<f64>) -> Result<Self> {
        let ranges = kind.params();
        if params.len() != ranges.len() {
            return Err(Error::Validation(format!(
                "{kind} takes {} parameter(s), got {}",
                ranges.len(),
                params.len()
            )));
        }
        for (r, v) in ranges.iter().zip(&params) {
            if !r.contains(*v) {
                return Err(Error::Validation(format!(
                    "{kind}.{} = {v} outside [{}, {}]{}",
                    r.name,
                    r.low,
                    r.high,
                    if r.integer_valued { " (integer, exclusive)" } else { "" }
                )));
            }
        }
        Ok(Self { kind, params })
    }

    /// Builds an instance with every parameter clamped into its range.
    pub fn clamped(kind: ActionKind, params: &[f64]) -> Result<Self> {
        let ranges = kind.params();
        if params.len() != ranges.len() {
            return Err(Error::Validation(format!("arity mismatch for {kind}")));
        }
        let params = ranges.iter().zip(params).map(|(r, v)| r.clamp(*v)).collect();
        Self::new(kind, params)
    }

    pub fn kind(&self) -> ActionKind {
        self.kind
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.kind.param_index(name).map(|i| self.params[i])
    }

    /// Checks constraints that depend on the horizon.
    pub fn validate_for_horizon(&self, horizon: usize) -> Result<()> {
        if horizon == 0 {
            return Err(Error::Validation("horizon must be at least 1".into()));
        }
        if self.kind == ActionKind::ShiftSeries {
            let shift = self.params[0];
            if shift.abs() >= horizon as f64 {
                return Err(Error::Validation(format!(
                    "shift {shift} would erase a series of length {horizon}"
                )));
            }
        }
        Ok(())
    }

    /// Transforms one series. `rng` is only consumed by [`ActionKind::AddNoise`].
    pub fn apply_series<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.validate_for_horizon(x.len())?;
        let p = &self.params;
        Ok(match self.kind {
            ActionKind::LinearTrendSlope => kernels::linear_trend_slope(x, p[0]),
            ActionKind::LinearTrendIntercept => kernels::linear_trend_intercept(x, p[0]),
            ActionKind::PiecewiseScaleHigh => kernels::piecewise_scale_high(x, p[0], p[1]),
            ActionKind::PiecewiseScaleLow => kernels::piecewise_scale_low(x, p[0], p[1]),
            ActionKind::SwapSeries => kernels::swap_series(x),
            ActionKind::ShiftSeries => kernels::shift_series(x, p[0] as i64),
            ActionKind::ScaleAmplitude => kernels::scale_amplitude(x, p[0]),
            ActionKind::AddNoise => kernels::add_noise(x, p[0], rng),
            ActionKind::IncreaseMinimumFactor => kernels::increase_minimum_factor(x, p[0]),
        })
    }

    /// Applies the action to every `(sample, channel)` series of a
    /// `[samples, horizon, channels]` tensor.
    ///
    /// The noise stream of each series is derived from
    /// `(seed, step, sample_id, channel)`, so the output for a sample does not
    /// depend on which other samples are in the batch.
    pub fn apply_batch(
        &self,
        pred: ArrayView3<'_, f64>,
        sample_ids: &[String],
        seed: u64,
        step: usize,
    ) -> Result<Array3<f64>> {
        let (n, h, _) = pred.dim();
        if sample_ids.len() != n {
            return Err(Error::Dimension(format!("{} ids for {n} samples", sample_ids.len())));
        }
        self.validate_for_horizon(h)?;
        let mut out = pred.to_owned();
        let mut buf = vec![0.0; h];
        for (i, mut sample) in out.axis_iter_mut(Axis(0)).enumerate() {
            let sid = seed::hash_str(&sample_ids[i]);
            for (c, mut lane) in sample.axis_iter_mut(Axis(1)).enumerate() {
                for (b, v) in buf.iter_mut().zip(lane.iter()) {
                    *b = *v;
                }
                let mut rng = noise_stream(seed, step, sid, c);
                let y = self.apply_series(&buf, &mut rng)?;
                for (dst, v) in lane.iter_mut().zip(y) {
                    *dst = v;
                }
            }
        }
        Ok(out)
    }

    /// Total order used for deterministic tie-breaking.
    pub fn cmp_key(&self, other: &Self) -> std::cmp::Ordering {
        self.kind.cmp(&other.kind).then_with(|| {
            for (a, b) in self.params.iter().zip(&other.params) {
                match a.total_cmp(b) {
                    std::cmp::Ordering::Equal => continue,
                    o => return o,
                }
            }
            std::cmp::Ordering::Equal
        })
    }
}

impl fmt::Display for ActionInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.kind)?;
        for (i, (r, v)) in self.kind.params().iter().zip(&self.params).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}={}", r.name, v)?;
        }
        f.write_str(")")
    }
}

fn noise_stream(seed: u64, step: usize, sample: u64, channel: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed::derive(&[seed, step as u64, sample, channel as u64]))
}

/// JSON form `{"kind": "...", "params": {"name": value}}`.
#[derive(Serialize, Deserialize)]
struct WireAction {
    kind: String,
    #[serde(default)]
    params: BTreeMap<String, f64>,
}

impl TryFrom<WireAction> for ActionInstance {
    type Error = Error;

    fn try_from(w: WireAction) -> Result<Self> {
        let kind: ActionKind = w.kind.parse()?;
        if let Some(unknown) = w.params.keys().find(|k| kind.param_index(k).is_none()) {
            return Err(Error::Validation(format!("{kind} has no parameter {unknown:?}")));
        }
        let params = kind
            .params()
            .iter()
            .map(|r| {
                w.params
                    .get(r.name)
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("{kind} is missing parameter {:?}", r.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        ActionInstance::new(kind, params)
    }
}

impl From<ActionInstance> for WireAction {
    fn from(a: ActionInstance) -> Self {
        WireAction {
            kind: a.kind.name().to_string(),
            params: a
                .kind
                .params()
                .iter()
                .zip(a.params)
                .map(|(r, v)| (r.name.to_string(), v))
                .collect(),
        }
    }
}

/// Draws parameters uniformly from the kind's catalog ranges.
pub fn sample_instance<R: Rng + ?Sized>(kind: ActionKind, rng: &mut R) -> ActionInstance {
    let bounds: Vec<(f64, f64)> = kind.params().iter().map(|r| (r.low, r.high)).collect();
    sample_within(kind, &bounds, rng)
}

/// Draws parameters uniformly from sub-ranges of the catalog.
///
/// Integer parameters are drawn uniformly over the admissible integers of
/// the sub-range. A degenerate range `(v, v)` always yields `v`.
pub fn sample_within<R: Rng + ?Sized>(kind: ActionKind, bounds: &[(f64, f64)], rng: &mut R) -> ActionInstance {
    let params: Vec<f64> = kind
        .params()
        .iter()
        .zip(bounds)
        .map(|(r, &(lo, hi))| {
            if r.integer_valued {
                let lo = r.clamp(lo).ceil() as i64;
                let hi = r.clamp(hi).floor() as i64;
                if hi <= lo {
                    lo as f64
                } else {
                    rng.random_range(lo..=hi) as f64
                }
            } else if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        })
        .collect();
    ActionInstance::clamped(kind, &params).expect("sampled parameters are clamped into range")
}

/// Ordered action sequence, optionally followed by an affine correction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionPlan {
    #[serde(default)]
    pub steps: Vec<ActionInstance>,
    #[serde(default)]
    pub affine: Option<AffineTail>,
    /// Seed of the noise streams used by stochastic steps.
    #[serde(default)]
    pub seed: u64,
}

impl CorrectionPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(action: ActionInstance) -> Self {
        Self {
            steps: vec![action],
            ..Self::default()
        }
    }

    pub fn from_steps(steps: Vec<ActionInstance>) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.affine.is_none()
    }

    /// Number of steps, counting an affine tail as one.
    pub fn len(&self) -> usize {
        self.steps.len() + usize::from(self.affine.is_some())
    }

    pub fn apply(&self, pred: ArrayView3<'_, f64>, sample_ids: &[String]) -> Result<Array3<f64>> {
        apply_plan(self, pred, sample_ids, self.seed)
    }

    pub fn label(&self) -> String {
        let mut parts: Vec<String> = self.steps.iter().map(ToString::to_string).collect();
        if let Some(tail) = &self.affine {
            parts.push(format!("Affine[{}]", tail.scope));
        }
        if parts.is_empty() {
            "identity".into()
        } else {
            parts.join(" -> ")
        }
    }

    /// Total order for tie-breaking equal-error plans: fewer steps, then
    /// lower kind ordinals, then lower parameter values.
    pub fn cmp_key(&self, other: &Self) -> std::cmp::Ordering {
        self.len().cmp(&other.len()).then_with(|| {
            for (a, b) in self.steps.iter().zip(&other.steps) {
                match a.cmp_key(b) {
                    std::cmp::Ordering::Equal => continue,
                    o => return o,
                }
            }
            std::cmp::Ordering::Equal
        })
    }

    /// Stable string key identifying the plan's effect, used for caching.
    pub fn cache_key(&self) -> String {
        serde_json::to_string(self).expect("plans always serialize")
    }
}

/// Applies `plan` step by step, then the affine tail. An empty plan returns
/// a bitwise copy of the input.
pub fn apply_plan(
    plan: &CorrectionPlan,
    pred: ArrayView3<'_, f64>,
    sample_ids: &[String],
    rng_seed: u64,
) -> Result<Array3<f64>> {
    let mut current = pred.to_owned();
    for (index, step) in plan.steps.iter().enumerate() {
        current = step
            .apply_batch(current.view(), sample_ids, rng_seed, index)
            .map_err(|e| Error::Step {
                index,
                source: Box::new(e),
            })?;
    }
    if let Some(tail) = &plan.affine {
        current = tail.apply(current.view()).map_err(|e| Error::Step {
            index: plan.steps.len(),
            source: Box::new(e),
        })?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn act(kind: ActionKind, params: &[f64]) -> ActionInstance {
        ActionInstance::new(kind, params.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn catalog_shape() {
        let arities: Vec<usize> = ActionKind::ALL.iter().map(|k| k.arity()).collect();
        assert_eq!(arities, vec![1, 1, 2, 2, 0, 1, 1, 1, 1]);
        for k in ActionKind::ALL {
            for r in k.params() {
                assert!(r.low < r.high);
                assert_eq!(r.integer_valued, k == ActionKind::ShiftSeries);
            }
            assert_eq!(k.name().parse::<ActionKind>().unwrap(), k);
        }
    }

    #[test]
    fn spot_examples() {
        let mut r = rng();
        // f = 10 lies outside the catalog range; exercise the formula directly.
        assert!(close(&kernels::scale_amplitude(&[1.0, 2.0, 3.0], 10.0), &[1.1, 2.2, 3.3]));
        let y = act(ActionKind::ScaleAmplitude, &[5.0]).apply_series(&[1.0, 2.0, 3.0], &mut r).unwrap();
        assert!(close(&y, &[1.05, 2.1, 3.15]));
        let y = act(ActionKind::SwapSeries, &[]).apply_series(&[1.0, 2.0, 3.0], &mut r).unwrap();
        assert_eq!(y, vec![3.0, 2.0, 1.0]);
        // s = 100 is outside the catalog range; exercise the formula directly.
        assert_eq!(kernels::linear_trend_slope(&[0.0, 1.0, 2.0], 100.0), vec![2.0, 5.0, 8.0]);
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((kernels::quantile(&x, 0.7) - 7.3).abs() < 1e-12);
        let y = act(ActionKind::PiecewiseScaleHigh, &[70.0, 10.0]).apply_series(&x, &mut r).unwrap();
        assert_eq!(&y[..7], &x[..7]);
        assert!(close(&y[7..], &[8.8, 9.9, 11.0]));
    }

    #[test]
    fn shift_replicates_edges() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kernels::shift_series(&x, 1), vec![2.0, 3.0, 4.0, 4.0]);
        assert_eq!(kernels::shift_series(&x, -2), vec![1.0, 1.0, 1.0, 2.0]);
        let mut r = rng();
        let a = act(ActionKind::ShiftSeries, &[4.0]);
        assert!(a.apply_series(&x, &mut r).is_err());
        assert!(act(ActionKind::ShiftSeries, &[3.0]).apply_series(&x, &mut r).is_ok());
    }

    #[test]
    fn validation_errors() {
        assert!(ActionInstance::new(ActionKind::ScaleAmplitude, vec![6.0]).is_err());
        assert!(ActionInstance::new(ActionKind::ScaleAmplitude, vec![]).is_err());
        assert!(ActionInstance::new(ActionKind::ShiftSeries, vec![1.5]).is_err());
        assert!(ActionInstance::new(ActionKind::ShiftSeries, vec![200.0]).is_err());
        assert!(ActionInstance::new(ActionKind::ShiftSeries, vec![199.0]).is_ok());
        assert!(ActionInstance::new(ActionKind::PiecewiseScaleLow, vec![31.0, 1.0]).is_err());
        // Real bounds are inclusive.
        assert!(ActionInstance::new(ActionKind::ScaleAmplitude, vec![5.0]).is_ok());
    }

    #[test]
    fn json_wire_form() {
        let a = act(ActionKind::PiecewiseScaleHigh, &[80.0, 2.5]);
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, r#"{"kind":"PiecewiseScaleHigh","params":{"delta":80.0,"f":2.5}}"#);
        let back: ActionInstance = serde_json::from_str(&s).unwrap();
        assert_eq!(back, a);
        let swap: ActionInstance = serde_json::from_str(r#"{"kind":"SwapSeries"}"#).unwrap();
        assert_eq!(swap.params(), &[] as &[f64]);
        assert!(serde_json::from_str::<ActionInstance>(r#"{"kind":"ScaleAmplitude","params":{"g":1}}"#).is_err());
        assert!(serde_json::from_str::<ActionInstance>(r#"{"kind":"ScaleAmplitude","params":{"f":9}}"#).is_err());
        assert!(serde_json::from_str::<ActionInstance>(r#"{"kind":"Rotate","params":{}}"#).is_err());
    }

    #[test]
    fn sample_instance_examples() {
        let mut r = rng();
        let swap = sample_instance(ActionKind::SwapSeries, &mut r);
        assert!(swap.params().is_empty());
        let a = sample_instance(ActionKind::ScaleAmplitude, &mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_instance(ActionKind::ScaleAmplitude, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
        let shift = sample_instance(ActionKind::ShiftSeries, &mut r);
        assert_eq!(shift.params()[0].fract(), 0.0);
    }

    #[test]
    fn amplitude_draws_are_uniform() {
        // Uniform(-5, 5): mean 0, std 10/sqrt(12); 3-sigma bound on the mean.
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_instance(ActionKind::ScaleAmplitude, &mut r).params()[0])
            .collect();
        let min = draws.iter().copied().fold(f64::INFINITY, f64::min);
        let max = draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(min > -5.0 && max < 5.0);
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd_of_mean = 10.0 / 12f64.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * sd_of_mean, "mean {mean}");
    }

    #[test]
    fn noise_std_matches_percent_of_magnitude() {
        let sigma = 10.0;
        let x = vec![-4.0; 100_000];
        let y = act(ActionKind::AddNoise, &[sigma]).apply_series(&x, &mut rng()).unwrap();
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
        let expected = sigma / 100.0 * 4.0;
        assert!((sd - expected).abs() < 0.1 * expected, "sd {sd}");
    }

    #[test]
    fn batch_noise_is_independent_of_batch_composition() {
        let a = act(ActionKind::AddNoise, &[20.0]);
        let full = Array3::from_shape_fn((3, 4, 2), |(i, j, c)| 1.0 + (i + j + c) as f64);
        let ids: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        let out = a.apply_batch(full.view(), &ids, 9, 0).unwrap();
        let part = full.slice(ndarray::s![1..2, .., ..]);
        let out_part = a.apply_batch(part, &ids[1..2], 9, 0).unwrap();
        assert_eq!(out.slice(ndarray::s![1..2, .., ..]), out_part);
    }

    #[test]
    fn plan_examples() {
        let x = Array3::from_shape_vec((1, 3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let ids = vec!["a".to_string()];
        assert_eq!(apply_plan(&CorrectionPlan::empty(), x.view(), &ids, 0).unwrap(), x);

        let amp = act(ActionKind::ScaleAmplitude, &[5.0]);
        let alone = apply_plan(&CorrectionPlan::single(amp.clone()), x.view(), &ids, 0).unwrap();
        let with_noop = CorrectionPlan::from_steps(vec![amp.clone(), act(ActionKind::LinearTrendIntercept, &[0.0])]);
        assert_eq!(apply_plan(&with_noop, x.view(), &ids, 0).unwrap(), alone);

        let one = Array3::from_shape_vec((1, 1, 1), vec![1.0]).unwrap();
        let twice = CorrectionPlan::from_steps(vec![amp.clone(), amp]);
        let y = apply_plan(&twice, one.view(), &ids, 0).unwrap();
        assert!((y[[0, 0, 0]] - 1.1025).abs() < 1e-12);
        let k = kernels::scale_amplitude(&kernels::scale_amplitude(&[1.0], 10.0), 10.0);
        assert!((k[0] - 1.21).abs() < 1e-12);
    }

    #[test]
    fn plan_step_errors_carry_index() {
        let x = Array3::from_shape_vec((1, 3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let plan = CorrectionPlan::from_steps(vec![
            act(ActionKind::ScaleAmplitude, &[1.0]),
            act(ActionKind::ShiftSeries, &[5.0]),
        ]);
        match apply_plan(&plan, x.view(), &["a".to_string()], 0) {
            Err(Error::Step { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn series() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e3..1e3f64, 1..64)
    }

    proptest! {
        #[test]
        fn shape_is_preserved(x in series(), k in 0usize..9, seed in any::<u64>()) {
            let kind = ActionKind::ALL[k];
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut a = sample_instance(kind, &mut r);
            if kind == ActionKind::ShiftSeries {
                let h = x.len() as f64;
                a = ActionInstance::new(kind, vec![a.params()[0].rem_euclid(h)]).unwrap();
            }
            let y = a.apply_series(&x, &mut r).unwrap();
            prop_assert_eq!(y.len(), x.len());
        }

        #[test]
        fn zero_parameters_are_identities(x in series()) {
            let mut r = rng();
            for (kind, params) in [
                (ActionKind::ScaleAmplitude, vec![0.0]),
                (ActionKind::LinearTrendSlope, vec![0.0]),
                (ActionKind::LinearTrendIntercept, vec![0.0]),
                (ActionKind::PiecewiseScaleHigh, vec![80.0, 0.0]),
                (ActionKind::PiecewiseScaleLow, vec![20.0, 0.0]),
                (ActionKind::IncreaseMinimumFactor, vec![0.0]),
                (ActionKind::ShiftSeries, vec![0.0]),
            ] {
                let y = act(kind, &params).apply_series(&x, &mut r).unwrap();
                prop_assert_eq!(&y, &x, "{:?}", kind);
            }
        }

        #[test]
        fn swap_preserves_mean(x in series()) {
            let y = kernels::swap_series(&x);
            let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!((kernels::mean(&y) - kernels::mean(&x)).abs() <= 1e-12 * scale);
        }

        #[test]
        fn quantile_regions_are_local(x in series(), delta in 70.0..100.0f64, f in -1.0..10.0f64) {
            let q = kernels::quantile(&x, delta / 100.0);
            let y = kernels::piecewise_scale_high(&x, delta, f);
            for (a, b) in x.iter().zip(&y) {
                if *a <= q { prop_assert_eq!(a.to_bits(), b.to_bits()); }
            }
            let q10 = kernels::quantile(&x, 0.1);
            let y = kernels::increase_minimum_factor(&x, f);
            for (a, b) in x.iter().zip(&y) {
                if *a > q10 { prop_assert_eq!(a.to_bits(), b.to_bits()); }
            }
        }
    }
}
