use serde::{Deserialize, Serialize};

use super::space::{SearchSpace, SpaceEntry};
use super::trace::Recorder;
use super::StrategyParams;
use crate::actions::{ActionInstance, ActionKind, CorrectionPlan};
use crate::error::{Error, Result};

/// A bandit arm whose pulls yield rewards; `C` is shared pull context.
pub trait Arm<C: ?Sized> {
    fn pull(&mut self, ctx: &mut C) -> Result<f64>;
}

/// Bookkeeping of one successive-halving run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalvingOutcome {
    /// Arm indices in pull order.
    pub sequence: Vec<usize>,
    pub pulls: Vec<usize>,
    pub best_reward: Vec<f64>,
    pub mean_reward: Vec<f64>,
    /// Active arms after each rung.
    pub rungs: Vec<Vec<usize>>,
    /// Arms alive at the end (normally exactly one).
    pub survivors: Vec<usize>,
    /// Action kinds of the arms, when the arms are action kinds.
    #[serde(default)]
    pub kinds: Vec<ActionKind>,
}

fn ceil_log2(n: usize) -> usize {
    (usize::BITS - (n.max(1) - 1).leading_zeros()) as usize
}

/// Successive halving with UCB1 selection inside each rung.
///
/// Every arm is pulled once. The remaining budget is split evenly over
/// `ceil(log2 n)` rungs; within a rung the active arm maximizing
/// `mean + c * sqrt(ln N / n_i)` is pulled, and at the end of the rung the
/// better half (by best reward, ties to the lower index) survives.
pub fn successive_halving_ucb<C: ?Sized, A: Arm<C>>(
    arms: &mut [A],
    ctx: &mut C,
    budget: usize,
    c: f64,
) -> Result<HalvingOutcome> {
    let n = arms.len();
    if n == 0 {
        return Err(Error::Config("successive halving needs at least one arm".into()));
    }
    let mut out = HalvingOutcome {
        sequence: Vec::with_capacity(budget),
        pulls: vec![0; n],
        best_reward: vec![f64::NEG_INFINITY; n],
        mean_reward: vec![0.0; n],
        rungs: Vec::new(),
        survivors: Vec::new(),
        kinds: Vec::new(),
    };
    let mut sums = vec![0.0; n];
    let mut pull = |i: usize, out: &mut HalvingOutcome, arms: &mut [A], ctx: &mut C| -> Result<()> {
        let r = arms[i].pull(ctx)?;
        out.sequence.push(i);
        out.pulls[i] += 1;
        sums[i] += r;
        out.mean_reward[i] = sums[i] / out.pulls[i] as f64;
        if r > out.best_reward[i] {
            out.best_reward[i] = r;
        }
        Ok(())
    };
    for i in 0..n.min(budget) {
        pull(i, &mut out, arms, ctx)?;
    }
    let rungs = ceil_log2(n).max(1);
    let remaining = budget.saturating_sub(n);
    let mut active: Vec<usize> = (0..n).collect();
    for rung in 0..rungs {
        let share = remaining / rungs + usize::from(rung < remaining % rungs);
        for _ in 0..share {
            let total = out.sequence.len() as f64;
            let mut pick = active[0];
            let mut pick_score = f64::NEG_INFINITY;
            for &i in &active {
                let score = if out.pulls[i] == 0 {
                    f64::INFINITY
                } else {
                    out.mean_reward[i] + c * (total.ln() / out.pulls[i] as f64).sqrt()
                };
                if score > pick_score {
                    pick = i;
                    pick_score = score;
                }
            }
            pull(pick, &mut out, arms, ctx)?;
        }
        if active.len() > 1 {
            active.sort_by(|&a, &b| out.best_reward[b].total_cmp(&out.best_reward[a]).then(a.cmp(&b)));
            active.truncate(active.len().div_ceil(2));
            active.sort_unstable();
        }
        out.rungs.push(active.clone());
    }
    out.survivors = active;
    Ok(out)
}

/// Golden-section bracket maximizing reward along one coordinate.
#[derive(Clone, Debug)]
struct Golden {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    fc: Option<f64>,
    fd: Option<f64>,
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

impl Golden {
    fn new(a: f64, b: f64) -> Self {
        let w = b - a;
        Self {
            a,
            b,
            c: b - INV_PHI * w,
            d: a + INV_PHI * w,
            fc: None,
            fd: None,
        }
    }

    /// Next point to evaluate; shrinks the bracket when both interior
    /// points are known.
    fn next(&mut self) -> f64 {
        match (self.fc, self.fd) {
            (None, _) => self.c,
            (Some(_), None) => self.d,
            (Some(fc), Some(fd)) => {
                if fc >= fd {
                    self.b = self.d;
                    self.d = self.c;
                    self.fd = Some(fc);
                    self.c = self.b - INV_PHI * (self.b - self.a);
                    self.fc = None;
                    self.c
                } else {
                    self.a = self.c;
                    self.c = self.d;
                    self.fc = Some(fd);
                    self.d = self.a + INV_PHI * (self.b - self.a);
                    self.fd = None;
                    self.d
                }
            }
        }
    }

    fn record(&mut self, x: f64, reward: f64) {
        if self.fc.is_none() && x == self.c {
            self.fc = Some(reward);
        } else if self.fd.is_none() && x == self.d {
            self.fd = Some(reward);
        }
    }
}

/// Arm for one action kind: a coordinate-wise golden-section line search.
///
/// Two-parameter kinds search the factor first, then the quantile,
/// switching after `sweep` evaluations. A revisited coordinate searches
/// half its previous bracket, centered on the best value so far.
pub(crate) struct LineSearchArm {
    entry: SpaceEntry,
    seed: u64,
    sweep: usize,
    best: Vec<f64>,
    best_reward: f64,
    order: Vec<usize>,
    order_pos: usize,
    widths: Vec<f64>,
    visited: Vec<bool>,
    golden: Option<Golden>,
    in_sweep: usize,
}

impl LineSearchArm {
    pub fn new(entry: SpaceEntry, seed: u64, sweep: usize) -> Self {
        let best: Vec<f64> = entry.clamp(&entry.bounds.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect::<Vec<_>>());
        let order: Vec<usize> = (0..entry.bounds.len()).rev().collect();
        let widths = entry.bounds.iter().map(|&(lo, hi)| hi - lo).collect();
        Self {
            visited: vec![false; best.len()],
            entry,
            seed,
            sweep: sweep.max(2),
            best,
            best_reward: f64::NEG_INFINITY,
            order,
            order_pos: 0,
            widths,
            golden: None,
            in_sweep: 0,
        }
    }

    fn open_bracket(&mut self) {
        let coord = self.order[self.order_pos];
        let (lo, hi) = self.entry.bounds[coord];
        let (a, b) = if self.visited[coord] {
            self.widths[coord] *= 0.5;
            let half = 0.5 * self.widths[coord];
            ((self.best[coord] - half).max(lo), (self.best[coord] + half).min(hi))
        } else {
            (lo, hi)
        };
        self.visited[coord] = true;
        self.golden = Some(Golden::new(a, b));
        self.in_sweep = 0;
    }

    fn plan(&self, params: &[f64]) -> CorrectionPlan {
        let action = ActionInstance::clamped(self.entry.kind, &self.entry.clamp(params))
            .expect("clamped parameters are admissible");
        CorrectionPlan {
            steps: vec![action],
            affine: None,
            seed: self.seed,
        }
    }
}

impl Arm<Recorder<'_>> for LineSearchArm {
    fn pull(&mut self, rec: &mut Recorder<'_>) -> Result<f64> {
        let mut params = self.best.clone();
        let mut probe = None;
        if !params.is_empty() {
            if self.golden.is_none() {
                self.open_bracket();
            } else if self.order.len() > 1 && self.in_sweep >= self.sweep {
                self.order_pos = (self.order_pos + 1) % self.order.len();
                self.open_bracket();
            }
            let coord = self.order[self.order_pos];
            let x = self.golden.as_mut().expect("bracket is open").next();
            params[coord] = x;
            probe = Some(x);
        }
        let plan = self.plan(&params);
        let eval = rec.objective().evaluate(&plan)?;
        let reward = rec.objective().reward(&eval);
        rec.push(plan, eval);
        if let (Some(x), Some(g)) = (probe, self.golden.as_mut()) {
            g.record(x, reward);
            self.in_sweep += 1;
        }
        if reward > self.best_reward {
            self.best_reward = reward;
            self.best = self.entry.clamp(&params);
        }
        Ok(reward)
    }
}

pub(crate) fn search(
    recorder: &mut Recorder<'_>,
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    params: &StrategyParams,
) -> Result<HalvingOutcome> {
    let mut arms: Vec<LineSearchArm> = space
        .entries
        .iter()
        .map(|e| LineSearchArm::new(e.clone(), seed, params.line_search_sweep))
        .collect();
    let mut outcome = successive_halving_ucb(&mut arms, recorder, budget, params.ucb_c)?;
    outcome.kinds = space.kinds();
    Ok(outcome)
}

/// Runs SH-HPO and also returns the halving bookkeeping; `None` when the
/// budget forced the random fallback.
pub fn optimize_sh_hpo_with_outcome(
    objective: &super::Objective,
    cfg: &super::OptimizerConfig,
) -> Result<(super::SearchTrace, Option<HalvingOutcome>)> {
    let cfg = super::OptimizerConfig {
        strategy: super::Strategy::ShHpo,
        ..cfg.clone()
    };
    super::search_with_outcome(objective, &cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(f64);

    impl Arm<()> for Fixed {
        fn pull(&mut self, _: &mut ()) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn rung_count() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(3), 2);
        assert_eq!(ceil_log2(9), 4);
        assert_eq!(ceil_log2(16), 4);
    }

    #[test]
    fn best_fixed_arm_survives_every_rung() {
        let mut arms = vec![Fixed(0.5), Fixed(0.1), Fixed(0.0)];
        let out = successive_halving_ucb(&mut arms, &mut (), 20, std::f64::consts::SQRT_2).unwrap();
        assert_eq!(out.sequence.len(), 20);
        assert_eq!(&out.sequence[..3], &[0, 1, 2]);
        assert_eq!(out.rungs, vec![vec![0, 1], vec![0]]);
        assert_eq!(out.survivors, vec![0]);
        // Hand simulation of the first rung (9 pulls, arms 0..3 active):
        // N=3 -> UCB ties broken by value, arm 0 leads.
        assert_eq!(out.sequence[3], 0);
        assert!(out.pulls[0] > out.pulls[1] && out.pulls[1] >= out.pulls[2]);
    }

    #[test]
    fn budget_equal_to_arms_is_one_pull_each() {
        let mut arms = vec![Fixed(0.2), Fixed(0.7), Fixed(0.1), Fixed(0.3)];
        let out = successive_halving_ucb(&mut arms, &mut (), 4, 1.0).unwrap();
        assert_eq!(out.pulls, vec![1; 4]);
        assert_eq!(out.survivors, vec![1]);
        assert_eq!(out.rungs, vec![vec![1, 3], vec![1]]);
    }

    #[test]
    fn golden_section_maximizes_concave() {
        let target = 2.7;
        let mut g = Golden::new(-5.0, 5.0);
        for _ in 0..40 {
            let x = g.next();
            g.record(x, -(x - target) * (x - target));
        }
        assert!((g.a - target).abs() < 1e-4 && (g.b - target).abs() < 1e-4);
    }
}
