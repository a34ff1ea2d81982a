//! Closed-form affine correction `y = a·x + b` and its risk accounting.
//!
//! Moments use the population convention (divide by `n`), which makes the
//! risk identities below exact on finite samples:
//!
//! ```text
//! R_before = Var(t) + Var(p) - 2 Cov(t, p) + (E[t] - E[p])²
//! R_after  = Var(t) - Cov(t, p)² / Var(p)
//! R_before - R_after = (√Var(p) - Cov(t, p)/√Var(p))² + (E[t] - E[p])²
//! ```
//!
//! The squared-mean term vanishes when predictions are unbiased on average.

use std::fmt;

use ndarray::{Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub a: f64,
    pub b: f64,
    pub cov_py: f64,
    pub var_p: f64,
    pub mean_p: f64,
    pub mean_t: f64,
    var_t: f64,
    /// Constant predictions: only the mean shift is fitted.
    pub degenerate: bool,
}

impl AffineFit {
    pub fn var_t(&self) -> f64 {
        self.var_t
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.a * x + self.b
    }
}

struct Moments {
    mean_p: f64,
    mean_t: f64,
    var_p: f64,
    var_t: f64,
    cov: f64,
}

// Two-pass sums in index order; the reduction order is fixed.
fn moments(pred: &[f64], truth: &[f64]) -> Moments {
    let n = pred.len() as f64;
    let mean_p = pred.iter().sum::<f64>() / n;
    let mean_t = truth.iter().sum::<f64>() / n;
    let (mut spp, mut stt, mut spt) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let dp = p - mean_p;
        let dt = t - mean_t;
        spp += dp * dp;
        stt += dt * dt;
        spt += dp * dt;
    }
    Moments {
        mean_p,
        mean_t,
        var_p: spp / n,
        var_t: stt / n,
        cov: spt / n,
    }
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!("{} predictions vs {} targets", pred.len(), truth.len())));
    }
    if pred.len() < 2 {
        return Err(Error::Validation("affine fit needs at least two points".into()));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite value in affine fit input".into()));
    }
    Ok(())
}

/// Least-squares `(a, b)` minimizing the mean of `(t - (a·p + b))²`.
pub fn fit_affine(pred: &[f64], truth: &[f64]) -> Result<AffineFit> {
    check_pair(pred, truth)?;
    let m = moments(pred, truth);
    let degenerate = !(m.var_p > 0.0);
    let a = if degenerate { 1.0 } else { m.cov / m.var_p };
    Ok(AffineFit {
        a,
        b: m.mean_t - a * m.mean_p,
        cov_py: m.cov,
        var_p: m.var_p,
        mean_p: m.mean_p,
        mean_t: m.mean_t,
        var_t: m.var_t,
        degenerate,
    })
}

pub fn apply_affine(fit: &AffineFit, values: &[f64]) -> Vec<f64> {
    values.iter().map(|&x| fit.apply(x)).collect()
}

/// Risks before and after the optimal affine correction, on the fitted data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RiskGap {
    pub r_before: f64,
    pub r_after: f64,
    /// `r_before - r_after`, both measured directly.
    pub gap: f64,
    /// `(√Var(p) - Cov/√Var(p))²`; `None` for degenerate fits.
    pub variance_term: Option<f64>,
    /// `(E[t] - E[p])²`.
    pub bias_term: f64,
    /// `Var(t) - Cov²/Var(p)`; `None` for degenerate fits.
    pub r_after_closed_form: Option<f64>,
    pub degenerate: bool,
}

impl RiskGap {
    /// Closed form of the full gap, variance plus bias contribution.
    pub fn closed_form_gap(&self) -> Option<f64> {
        self.variance_term.map(|v| v + self.bias_term)
    }
}

pub fn risk_gap(pred: &[f64], truth: &[f64]) -> Result<RiskGap> {
    let fit = fit_affine(pred, truth)?;
    let n = pred.len() as f64;
    let r_before = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum::<f64>() / n;
    let r_after = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (t - fit.apply(*p)).powi(2))
        .sum::<f64>()
        / n;
    let (variance_term, r_after_closed_form) = if fit.degenerate {
        (None, None)
    } else {
        let sd = fit.var_p.sqrt();
        (
            Some((sd - fit.cov_py / sd).powi(2)),
            Some(fit.var_t - fit.cov_py * fit.cov_py / fit.var_p),
        )
    };
    Ok(RiskGap {
        r_before,
        r_after,
        gap: r_before - r_after,
        variance_term,
        bias_term: (fit.mean_t - fit.mean_p).powi(2),
        r_after_closed_form,
        degenerate: fit.degenerate,
    })
}

/// How predictions are pooled when fitting affine coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffineScope {
    Global,
    #[default]
    PerChannel,
    PerHorizon,
}

impl fmt::Display for AffineScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AffineScope::Global => "global",
            AffineScope::PerChannel => "per_channel",
            AffineScope::PerHorizon => "per_horizon",
        })
    }
}

impl std::str::FromStr for AffineScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(AffineScope::Global),
            "per_channel" => Ok(AffineScope::PerChannel),
            "per_horizon" => Ok(AffineScope::PerHorizon),
            other => Err(Error::Validation(format!("unknown affine scope {other:?}"))),
        }
    }
}

impl AffineScope {
    fn axis(self) -> Option<Axis> {
        match self {
            AffineScope::Global => None,
            AffineScope::PerChannel => Some(Axis(2)),
            AffineScope::PerHorizon => Some(Axis(1)),
        }
    }
}

/// Affine coefficients attached to the end of a correction plan.
///
/// Serialized as `{"a": number, "b": number, "scope": "global"}`; scoped
/// variants carry one coefficient per channel or horizon step as arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WireAffine", into = "WireAffine")]
pub struct AffineTail {
    pub scope: AffineScope,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineTail {
    pub fn global(a: f64, b: f64) -> Self {
        Self {
            scope: AffineScope::Global,
            a: vec![a],
            b: vec![b],
        }
    }

    /// Fits one `(a, b)` per group of the given scope.
    pub fn fit(pred: ArrayView3<'_, f64>, truth: ArrayView3<'_, f64>, scope: AffineScope) -> Result<Self> {
        if pred.shape() != truth.shape() {
            return Err(Error::Dimension("affine fit: prediction/truth shape mismatch".into()));
        }
        let groups: Vec<(Vec<f64>, Vec<f64>)> = match scope.axis() {
            None => vec![(pred.iter().copied().collect(), truth.iter().copied().collect())],
            Some(axis) => pred
                .axis_iter(axis)
                .zip(truth.axis_iter(axis))
                .map(|(p, t)| (p.iter().copied().collect(), t.iter().copied().collect()))
                .collect(),
        };
        let mut a = Vec::with_capacity(groups.len());
        let mut b = Vec::with_capacity(groups.len());
        for (p, t) in &groups {
            let fit = fit_affine(p, t)?;
            a.push(fit.a);
            b.push(fit.b);
        }
        Ok(Self { scope, a, b })
    }

    pub fn apply(&self, pred: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let mut out = pred.to_owned();
        match self.scope.axis() {
            None => out.mapv_inplace(|x| self.a[0] * x + self.b[0]),
            Some(axis) => {
                if out.len_of(axis) != self.a.len() {
                    return Err(Error::Dimension(format!(
                        "{} affine coefficients for {} {} groups",
                        self.a.len(),
                        out.len_of(axis),
                        self.scope
                    )));
                }
                for (i, mut lane) in out.axis_iter_mut(axis).enumerate() {
                    let (a, b) = (self.a[i], self.b[i]);
                    lane.mapv_inplace(|x| a * x + b);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Coeffs {
    One(f64),
    Many(Vec<f64>),
}

#[derive(Serialize, Deserialize)]
struct WireAffine {
    a: Coeffs,
    b: Coeffs,
    scope: AffineScope,
}

impl TryFrom<WireAffine> for AffineTail {
    type Error = Error;

    fn try_from(w: WireAffine) -> Result<Self> {
        let vec = |c: Coeffs| match c {
            Coeffs::One(v) => vec![v],
            Coeffs::Many(v) => v,
        };
        let (a, b) = (vec(w.a), vec(w.b));
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::Validation("affine a/b must be non-empty and of equal length".into()));
        }
        if w.scope == AffineScope::Global && a.len() != 1 {
            return Err(Error::Validation("global affine takes a single (a, b)".into()));
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::Validation("affine coefficients must be finite".into()));
        }
        Ok(Self { scope: w.scope, a, b })
    }
}

impl From<AffineTail> for WireAffine {
    fn from(t: AffineTail) -> Self {
        let wrap = |v: Vec<f64>| {
            if t.scope == AffineScope::Global {
                Coeffs::One(v[0])
            } else {
                Coeffs::Many(v)
            }
        };
        WireAffine {
            a: wrap(t.a),
            b: wrap(t.b),
            scope: t.scope,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn identity_and_exact_relation() {
        let p = [1.0, 2.0, 4.0, 7.0];
        let f = fit_affine(&p, &p).unwrap();
        assert!((f.a - 1.0).abs() < 1e-15 && f.b.abs() < 1e-14);
        let t: Vec<f64> = p.iter().map(|x| 2.0 * x + 3.0).collect();
        let f = fit_affine(&p, &t).unwrap();
        assert!((f.a - 2.0).abs() < 1e-14 && (f.b - 3.0).abs() < 1e-13);
    }

    #[test]
    fn matches_normal_equations() {
        // Oracle: solve [Σp² Σp; Σp n][a b]ᵀ = [Σpt Σt]ᵀ by Cramer's rule.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let t: Vec<f64> = p
            .iter()
            .map(|z| 0.8 * z + 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = p.len() as f64;
        let spp: f64 = p.iter().map(|x| x * x).sum();
        let sp: f64 = p.iter().sum();
        let spt: f64 = p.iter().zip(&t).map(|(x, y)| x * y).sum();
        let st: f64 = t.iter().sum();
        let det = spp * n - sp * sp;
        let a = (spt * n - sp * st) / det;
        let b = (spp * st - sp * spt) / det;
        let f = fit_affine(&p, &t).unwrap();
        assert!((f.a - a).abs() < 1e-10, "{} vs {a}", f.a);
        assert!((f.b - b).abs() < 1e-10, "{} vs {b}", f.b);
    }

    #[test]
    fn degenerate_fit_shifts_mean() {
        let f = fit_affine(&[2.0, 2.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.a, 1.0);
        assert_eq!(f.b, 1.0);
        let g = risk_gap(&[2.0, 2.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!(g.degenerate && g.variance_term.is_none());
        assert!(g.gap >= 0.0);
    }

    #[test]
    fn fit_errors() {
        assert!(fit_affine(&[1.0], &[1.0]).is_err());
        assert!(fit_affine(&[1.0, 2.0], &[1.0]).is_err());
        assert!(fit_affine(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn apply_examples() {
        let id = AffineFit {
            a: 1.0,
            b: 0.0,
            cov_py: 0.0,
            var_p: 1.0,
            mean_p: 0.0,
            mean_t: 0.0,
            var_t: 0.0,
            degenerate: false,
        };
        assert_eq!(apply_affine(&id, &[1.5, -2.0]), vec![1.5, -2.0]);
        let collapse = AffineFit { a: 0.0, b: 4.0, ..id };
        assert_eq!(apply_affine(&collapse, &[1.5, -2.0]), vec![4.0, 4.0]);
        let lin = AffineFit { a: 2.0, b: 3.0, ..id };
        assert_eq!(apply_affine(&lin, &[1.0, 2.0]), vec![5.0, 7.0]);
    }

    #[test]
    fn gap_examples() {
        let p = [1.0, 2.0, 3.0, 4.0];
        let g = risk_gap(&p, &p).unwrap();
        assert_eq!(g.gap, 0.0);
        assert!(g.variance_term.unwrap().abs() < 1e-15);
        // Uncorrelated truth with equal mean: gap collapses to Var(p).
        let p = [1.0, -1.0, 1.0, -1.0];
        let t = [1.0, 1.0, -1.0, -1.0];
        let g = risk_gap(&p, &t).unwrap();
        assert!((g.variance_term.unwrap() - 1.0).abs() < 1e-15);
        assert!((g.gap - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mean_offset_enters_the_gap() {
        // truth = pred + 5: the variance term is 0, the whole gap is the bias.
        let p = [1.0, 2.0, 3.0];
        let t = [6.0, 7.0, 8.0];
        let g = risk_gap(&p, &t).unwrap();
        assert!((g.gap - 25.0).abs() < 1e-12);
        assert!(g.variance_term.unwrap().abs() < 1e-12);
        assert!((g.bias_term - 25.0).abs() < 1e-12);
    }

    #[test]
    fn tail_scopes() {
        let pred = Array3::from_shape_fn((4, 3, 2), |(i, j, c)| (i * 3 + j) as f64 + c as f64 * 0.5);
        let truth = Array3::from_shape_fn((4, 3, 2), |(i, j, c)| {
            let x = (i * 3 + j) as f64 + c as f64 * 0.5;
            if c == 0 { 2.0 * x + 1.0 } else { -x + 4.0 }
        });
        let tail = AffineTail::fit(pred.view(), truth.view(), AffineScope::PerChannel).unwrap();
        assert!((tail.a[0] - 2.0).abs() < 1e-12 && (tail.b[0] - 1.0).abs() < 1e-12);
        assert!((tail.a[1] + 1.0).abs() < 1e-12 && (tail.b[1] - 4.0).abs() < 1e-12);
        let out = tail.apply(pred.view()).unwrap();
        for (o, t) in out.iter().zip(truth.iter()) {
            assert!((o - t).abs() < 1e-10);
        }
        let h = AffineTail::fit(pred.view(), truth.view(), AffineScope::PerHorizon).unwrap();
        assert_eq!(h.a.len(), 3);
        let g = AffineTail::fit(pred.view(), truth.view(), AffineScope::Global).unwrap();
        assert_eq!(g.a.len(), 1);
        let wrong = AffineTail::fit(pred.view(), truth.view(), AffineScope::PerHorizon).unwrap();
        let narrow = Array3::<f64>::zeros((1, 2, 2));
        assert!(wrong.apply(narrow.view()).is_err());
    }

    #[test]
    fn tail_wire_form() {
        let s = serde_json::to_string(&AffineTail::global(2.0, 3.0)).unwrap();
        assert_eq!(s, r#"{"a":2.0,"b":3.0,"scope":"global"}"#);
        let t: AffineTail = serde_json::from_str(r#"{"a":[1,2],"b":[0,1],"scope":"per_channel"}"#).unwrap();
        assert_eq!(t.a, vec![1.0, 2.0]);
        assert!(serde_json::from_str::<AffineTail>(r#"{"a":[1,2],"b":[0],"scope":"per_channel"}"#).is_err());
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..200, any::<u64>(), -3.0..3.0f64).prop_map(|(n, seed, log_scale)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 10f64.powf(log_scale);
            let p: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let a: f64 = rng.random_range(-2.0..2.0);
            let t = p
                .iter()
                .map(|x| a * x + scale * (0.5 + rng.sample::<f64, _>(StandardNormal)))
                .collect();
            (p, t)
        })
    }

    proptest! {
        #[test]
        fn correction_never_hurts((p, t) in pair()) {
            let g = risk_gap(&p, &t).unwrap();
            prop_assert!(g.r_after <= g.r_before + 1e-12 * (1.0 + g.r_before));
        }

        #[test]
        fn local_perturbations_do_not_improve((p, t) in pair()) {
            let f = fit_affine(&p, &t).unwrap();
            prop_assume!(!f.degenerate);
            let loss = |a: f64, b: f64| {
                p.iter().zip(&t).map(|(x, y)| (y - (a * x + b)).powi(2)).sum::<f64>() / p.len() as f64
            };
            let best = loss(f.a, f.b);
            for (da, db) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
                prop_assert!(loss(f.a + da, f.b + db) >= best * (1.0 - 1e-12));
            }
        }

        #[test]
        fn full_gap_identity_holds((p, t) in pair()) {
            let g = risk_gap(&p, &t).unwrap();
            prop_assume!(!g.degenerate);
            let cf = g.closed_form_gap().unwrap();
            prop_assert!((g.gap - cf).abs() <= 1e-9 * cf.abs().max(g.r_before));
            let ra = g.r_after_closed_form.unwrap();
            prop_assert!((g.r_after - ra).abs() <= 1e-9 * ra.abs().max(g.r_before));
        }

        #[test]
        fn rescaling_keeps_a_and_scales_b((p, t) in pair(), c in prop_oneof![-10.0..-0.1f64, 0.1..10.0f64]) {
            let f = fit_affine(&p, &t).unwrap();
            prop_assume!(!f.degenerate);
            let ps: Vec<f64> = p.iter().map(|x| c * x).collect();
            let ts: Vec<f64> = t.iter().map(|x| c * x).collect();
            let g = fit_affine(&ps, &ts).unwrap();
            prop_assert!((g.a - f.a).abs() <= 1e-9 * (1.0 + f.a.abs()));
            prop_assert!((g.b - c * f.b).abs() <= 1e-9 * (1.0 + (c * f.b).abs() + f.mean_t.abs() * c.abs()));
            let r0 = risk_gap(&p, &t).unwrap();
            let r1 = risk_gap(&ps, &ts).unwrap();
            prop_assert!((r1.r_before - c * c * r0.r_before).abs() <= 1e-9 * r1.r_before.max(1e-300));
        }
    }
}
