use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;

use crate::actions::CorrectionPlan;
use crate::error::{Error, Result};
use crate::metrics::{relative_improvement, ForecastBatch};

/// Relative train-MSE increase tolerated before a plan counts as overfit.
pub const DEFAULT_GUARD_TOLERANCE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub val_mse: f64,
    pub train_mse: f64,
    /// Train MSE did not worsen beyond the guard tolerance.
    pub consistent: bool,
}

/// Validation MSE as the objective, training MSE as the overfitting guard.
///
/// Evaluations are memoized by plan, and only fresh evaluations are
/// counted against the budget.
#[derive(Debug)]
pub struct Objective {
    val: ForecastBatch,
    train: ForecastBatch,
    guard_tolerance: f64,
    baseline_val: f64,
    baseline_train: f64,
    evaluations: AtomicUsize,
    cache: Mutex<HashMap<String, Evaluation>>,
}

impl Objective {
    pub fn new(train: ForecastBatch, val: ForecastBatch) -> Result<Self> {
        Self::with_tolerance(train, val, DEFAULT_GUARD_TOLERANCE)
    }

    pub fn with_tolerance(train: ForecastBatch, val: ForecastBatch, guard_tolerance: f64) -> Result<Self> {
        if train.horizon() != val.horizon() || train.channels() != val.channels() {
            return Err(Error::Dimension(format!(
                "train [H={}, d={}] and validation [H={}, d={}] disagree",
                train.horizon(),
                train.channels(),
                val.horizon(),
                val.channels()
            )));
        }
        let train_ids: HashSet<&str> = train.sample_ids().iter().map(String::as_str).collect();
        if let Some(shared) = val.sample_ids().iter().find(|id| train_ids.contains(id.as_str())) {
            return Err(Error::Config(format!(
                "sample {shared} appears in both train and validation splits"
            )));
        }
        if !(guard_tolerance >= 0.0) {
            return Err(Error::Config(format!("guard tolerance must be >= 0, got {guard_tolerance}")));
        }
        Ok(Self {
            baseline_val: val.mse(),
            baseline_train: train.mse(),
            val,
            train,
            guard_tolerance,
            evaluations: AtomicUsize::new(0),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn val(&self) -> &ForecastBatch {
        &self.val
    }

    pub fn train(&self) -> &ForecastBatch {
        &self.train
    }

    pub fn horizon(&self) -> usize {
        self.val.horizon()
    }

    pub fn baseline_val_mse(&self) -> f64 {
        self.baseline_val
    }

    pub fn baseline_train_mse(&self) -> f64 {
        self.baseline_train
    }

    pub fn guard_tolerance(&self) -> f64 {
        self.guard_tolerance
    }

    /// Number of fresh (non-memoized) evaluations so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::SeqCst)
    }

    pub fn is_consistent(&self, train_mse: f64) -> bool {
        train_mse <= self.baseline_train * (1.0 + self.guard_tolerance)
    }

    pub fn evaluate(&self, plan: &CorrectionPlan) -> Result<Evaluation> {
        let key = plan.cache_key();
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*hit);
        }
        let eval = self.evaluate_uncached(plan)?;
        self.evaluations.fetch_add(1, Ordering::SeqCst);
        self.cache.lock().expect("cache lock").insert(key, eval);
        Ok(eval)
    }

    /// Evaluates a batch in parallel, returning results in input order.
    /// Duplicate plans within the batch are evaluated once.
    pub fn evaluate_many(&self, plans: &[CorrectionPlan]) -> Result<Vec<Evaluation>> {
        let mut unique: Vec<&CorrectionPlan> = Vec::new();
        let mut seen = HashSet::new();
        for p in plans {
            if seen.insert(p.cache_key()) {
                unique.push(p);
            }
        }
        unique
            .par_iter()
            .map(|p| self.evaluate(p))
            .collect::<Result<Vec<_>>>()?;
        plans.iter().map(|p| self.evaluate(p)).collect()
    }

    fn evaluate_uncached(&self, plan: &CorrectionPlan) -> Result<Evaluation> {
        let val_pred = plan.apply(self.val.predictions(), self.val.sample_ids())?;
        let train_pred = plan.apply(self.train.predictions(), self.train.sample_ids())?;
        let val_mse = crate::metrics::mse(val_pred.view(), self.val.truth())?;
        let train_mse = crate::metrics::mse(train_pred.view(), self.train.truth())?;
        Ok(Evaluation {
            val_mse,
            train_mse,
            consistent: self.is_consistent(train_mse),
        })
    }

    /// Relative validation improvement; zero when the baseline is already
    /// perfect (nothing can be learned).
    pub fn improvement(&self, val_mse: f64) -> f64 {
        relative_improvement(self.baseline_val, val_mse).unwrap_or(0.0)
    }

    /// Bounded reward shared by the bandit and policy strategies:
    /// `M` clamped to `[-1, 1]`, and `-1` for plans that fail the guard.
    pub fn reward(&self, eval: &Evaluation) -> f64 {
        if self.baseline_val <= 0.0 {
            0.0
        } else if eval.consistent {
            self.improvement(eval.val_mse).clamp(-1.0, 1.0)
        } else {
            -1.0
        }
    }
}
