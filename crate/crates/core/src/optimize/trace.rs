use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::objective::{Evaluation, Objective};
use super::Strategy;
use crate::actions::CorrectionPlan;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;

/// One evaluated candidate. Serialized as one JSON Lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode: usize,
    #[serde(default = "first_round")]
    pub round: usize,
    pub plan: CorrectionPlan,
    pub val_mse: f64,
    pub train_mse: f64,
    pub consistent: bool,
    /// Passed the guard and did not degrade validation error.
    pub accepted: bool,
}

fn first_round() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub strategy: Strategy,
    pub episodes: Vec<Episode>,
    pub best_plan: CorrectionPlan,
    pub best_val_mse: f64,
    pub best_train_mse: f64,
    pub baseline_val_mse: f64,
    pub baseline_train_mse: f64,
    /// Distinct plans evaluated by this run, including the baseline.
    pub evaluations: usize,
}

/// Final JSON Lines record of a serialized trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalRecord {
    pub terminal: bool,
    pub strategy: Strategy,
    pub best_plan: CorrectionPlan,
    pub best_val_mse: f64,
    pub baseline_val_mse: f64,
    pub evaluations: usize,
    pub report: Option<EvalReport>,
}

impl SearchTrace {
    /// Validation improvement of the best plan.
    pub fn best_improvement(&self) -> Option<f64> {
        crate::metrics::relative_improvement(self.baseline_val_mse, self.best_val_mse).ok()
    }

    /// Running minimum of accepted validation MSE after each episode.
    pub fn best_curve(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.episodes
            .iter()
            .map(|e| {
                if e.accepted && e.val_mse < best {
                    best = e.val_mse;
                }
                best
            })
            .collect()
    }

    pub fn to_jsonl(&self, report: Option<&EvalReport>) -> Result<String> {
        let mut out = String::new();
        for e in &self.episodes {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.terminal(report.cloned()))?);
        out.push('\n');
        Ok(out)
    }

    pub fn terminal(&self, report: Option<EvalReport>) -> TerminalRecord {
        TerminalRecord {
            terminal: true,
            strategy: self.strategy,
            best_plan: self.best_plan.clone(),
            best_val_mse: self.best_val_mse,
            baseline_val_mse: self.baseline_val_mse,
            evaluations: self.evaluations,
            report,
        }
    }

    /// Parses episode lines and the terminal record back.
    pub fn parse_jsonl(text: &str) -> Result<(Vec<Episode>, Option<TerminalRecord>)> {
        let mut episodes = Vec::new();
        let mut terminal = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let value: serde_json::Value = serde_json::from_str(line)?;
            if value.get("terminal").is_some() {
                terminal = Some(serde_json::from_value(value)?);
            } else if terminal.is_some() {
                return Err(Error::Structure(format!("line {}: episode after terminal record", i + 1)));
            } else {
                episodes.push(serde_json::from_value(value)?);
            }
        }
        Ok((episodes, terminal))
    }
}

fn plan_order(a: (f64, &CorrectionPlan), b: (f64, &CorrectionPlan)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp_key(b.1))
}

/// Append-only episode log that tracks the best accepted plan.
pub(crate) struct Recorder<'a> {
    objective: &'a Objective,
    strategy: Strategy,
    episodes: Vec<Episode>,
    best: CorrectionPlan,
    best_eval: Evaluation,
    distinct: HashSet<String>,
    observer: Option<&'a mut (dyn FnMut(&Episode) + Send + 'a)>,
}

impl<'a> Recorder<'a> {
    /// Evaluates the empty plan first, so the baseline is always a candidate.
    pub fn new(objective: &'a Objective, strategy: Strategy, seed: u64) -> Result<Self> {
        Self::observed(objective, strategy, seed, None)
    }

    /// Same as `new`, reporting every recorded episode to `observer`.
    pub fn observed(
        objective: &'a Objective,
        strategy: Strategy,
        seed: u64,
        observer: Option<&'a mut (dyn FnMut(&Episode) + Send + 'a)>,
    ) -> Result<Self> {
        let empty = CorrectionPlan {
            seed,
            ..CorrectionPlan::default()
        };
        let eval = objective.evaluate(&empty)?;
        let mut rec = Self {
            objective,
            strategy,
            episodes: Vec::new(),
            best: empty.clone(),
            best_eval: eval,
            distinct: HashSet::new(),
            observer,
        };
        rec.push(empty, eval);
        Ok(rec)
    }

    pub fn objective(&self) -> &'a Objective {
        self.objective
    }

    pub fn best(&self) -> (&CorrectionPlan, &Evaluation) {
        (&self.best, &self.best_eval)
    }

    /// Records an evaluated plan; returns whether it was accepted.
    pub fn push(&mut self, plan: CorrectionPlan, eval: Evaluation) -> bool {
        self.distinct.insert(plan.cache_key());
        let accepted = eval.consistent && eval.val_mse <= self.objective.baseline_val_mse();
        if accepted
            && plan_order((eval.val_mse, &plan), (self.best_eval.val_mse, &self.best)) == Ordering::Less
        {
            self.best = plan.clone();
            self.best_eval = eval;
        }
        self.episodes.push(Episode {
            episode: self.episodes.len(),
            round: 1,
            plan,
            val_mse: eval.val_mse,
            train_mse: eval.train_mse,
            consistent: eval.consistent,
            accepted,
        });
        if let Some(observer) = self.observer.as_mut() {
            observer(self.episodes.last().expect("just pushed"));
        }
        accepted
    }

    pub fn finish(self) -> SearchTrace {
        SearchTrace {
            strategy: self.strategy,
            episodes: self.episodes,
            best_val_mse: self.best_eval.val_mse,
            best_train_mse: self.best_eval.train_mse,
            best_plan: self.best,
            baseline_val_mse: self.objective.baseline_val_mse(),
            baseline_train_mse: self.objective.baseline_train_mse(),
            evaluations: self.distinct.len(),
        }
    }
}
