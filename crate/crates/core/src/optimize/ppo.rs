use rand::Rng;
use serde::{Deserialize, Serialize};

use super::space::SearchSpace;
use super::trace::Recorder;
use crate::actions::{ActionInstance, ActionKind, CorrectionPlan};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoParams {
    /// Actions per episode.
    pub steps: usize,
    /// Bins per continuous parameter.
    pub bins: usize,
    /// Bins per quantile parameter.
    pub delta_bins: usize,
    pub clip: f64,
    /// Optimization passes over each rollout batch.
    pub epochs: usize,
    pub lr: f64,
    pub baseline_lr: f64,
}

impl Default for PpoParams {
    fn default() -> Self {
        Self {
            steps: 3,
            bins: 11,
            delta_bins: 7,
            clip: 0.2,
            epochs: 4,
            lr: 0.5,
            baseline_lr: 0.5,
        }
    }
}

/// Uniform discretization of every parameter of every kind in a space.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionGrid {
    pub kinds: Vec<ActionKind>,
    /// `values[kind][param]` lists the bin centers.
    pub values: Vec<Vec<Vec<f64>>>,
}

impl ActionGrid {
    pub fn new(space: &SearchSpace, bins: usize, delta_bins: usize) -> Self {
        let mut values = Vec::with_capacity(space.len());
        for e in &space.entries {
            let per_param = e
                .kind
                .params()
                .iter()
                .zip(&e.bounds)
                .map(|(r, &(lo, hi))| {
                    let n = if r.name == "delta" { delta_bins } else { bins }.max(1);
                    let mut v: Vec<f64> = if n == 1 || hi <= lo {
                        vec![0.5 * (lo + hi)]
                    } else {
                        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
                    };
                    for x in v.iter_mut() {
                        *x = r.clamp(*x);
                    }
                    v.dedup();
                    v
                })
                .collect();
            values.push(per_param);
        }
        Self {
            kinds: space.kinds(),
            values,
        }
    }

    pub fn instance(&self, kind: usize, bins: &[usize]) -> ActionInstance {
        let params: Vec<f64> = bins.iter().enumerate().map(|(j, &b)| self.values[kind][j][b]).collect();
        ActionInstance::new(self.kinds[kind], params).expect("grid values are admissible")
    }

    /// Every length-1 plan on the grid.
    pub fn single_actions(&self) -> Vec<ActionInstance> {
        let mut out = Vec::new();
        for k in 0..self.kinds.len() {
            let dims: Vec<usize> = self.values[k].iter().map(Vec::len).collect();
            let total: usize = dims.iter().product();
            for mut flat in 0..total {
                let mut bins = vec![0; dims.len()];
                for (j, d) in dims.iter().enumerate().rev() {
                    bins[j] = flat % d;
                    flat /= d;
                }
                out.push(self.instance(k, &bins));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
struct StepChoice {
    /// `None` is the no-op choice.
    kind: Option<usize>,
    bins: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct Rollout {
    choices: Vec<StepChoice>,
    logp: f64,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Adds `coef * d log p(choice) / d logits` to `grad`.
fn add_log_grad(grad: &mut [f64], logits: &[f64], choice: usize, coef: f64) {
    let p = softmax(logits);
    for (i, (g, pi)) in grad.iter_mut().zip(p).enumerate() {
        *g += coef * (f64::from(u8::from(i == choice)) - pi);
    }
}

/// Factorized categorical policy over a fixed number of steps.
///
/// Each step picks a kind or a no-op, then one bin per parameter of the
/// chosen kind. The no-op starts with probability one half.
#[derive(Clone, Debug)]
pub struct PpoAgent {
    pub grid: ActionGrid,
    steps: usize,
    kind_logits: Vec<Vec<f64>>,
    bin_logits: Vec<Vec<Vec<Vec<f64>>>>,
    baseline: f64,
}

impl PpoAgent {
    pub fn new(grid: ActionGrid, steps: usize) -> Self {
        let n = grid.kinds.len();
        let mut kind = vec![0.0; n + 1];
        kind[n] = (n as f64).ln();
        let bins: Vec<Vec<Vec<f64>>> = grid
            .values
            .iter()
            .map(|per_param| per_param.iter().map(|v| vec![0.0; v.len()]).collect())
            .collect();
        Self {
            steps,
            kind_logits: vec![kind; steps],
            bin_logits: vec![bins; steps],
            baseline: 0.0,
            grid,
        }
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    /// Probability of the no-op choice at step `s`.
    pub fn noop_probability(&self, s: usize) -> f64 {
        *softmax(&self.kind_logits[s]).last().expect("no-op logit")
    }

    /// Joint entropy of the per-step action distribution, summed over steps.
    pub fn entropy(&self) -> f64 {
        let mut h = 0.0;
        for s in 0..self.steps {
            let p = softmax(&self.kind_logits[s]);
            h += entropy(&p);
            for (k, pk) in p.iter().take(self.grid.kinds.len()).enumerate() {
                let hk: f64 = self.bin_logits[s][k].iter().map(|l| entropy(&softmax(l))).sum();
                h += pk * hk;
            }
        }
        h
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Rollout {
        let n = self.grid.kinds.len();
        let mut choices = Vec::with_capacity(self.steps);
        for s in 0..self.steps {
            let k = sample_index(&softmax(&self.kind_logits[s]), rng);
            if k == n {
                choices.push(StepChoice { kind: None, bins: vec![] });
                continue;
            }
            let bins = self.bin_logits[s][k].iter().map(|l| sample_index(&softmax(l), rng)).collect();
            choices.push(StepChoice { kind: Some(k), bins });
        }
        let logp = self.log_prob(&choices);
        Rollout { choices, logp }
    }

    fn log_prob(&self, choices: &[StepChoice]) -> f64 {
        let n = self.grid.kinds.len();
        let mut lp = 0.0;
        for (s, c) in choices.iter().enumerate() {
            let k = c.kind.unwrap_or(n);
            lp += softmax(&self.kind_logits[s])[k].ln();
            for (j, &b) in c.bins.iter().enumerate() {
                lp += softmax(&self.bin_logits[s][k][j])[b].ln();
            }
        }
        lp
    }

    fn plan(&self, rollout: &Rollout, seed: u64) -> CorrectionPlan {
        let steps = rollout
            .choices
            .iter()
            .filter_map(|c| c.kind.map(|k| self.grid.instance(k, &c.bins)))
            .collect();
        CorrectionPlan {
            steps,
            affine: None,
            seed,
        }
    }

    /// Clipped-surrogate ascent on one batch, then a baseline update.
    fn update(&mut self, batch: &[Rollout], rewards: &[f64], params: &PpoParams) {
        let n = self.grid.kinds.len();
        let adv: Vec<f64> = rewards.iter().map(|r| r - self.baseline).collect();
        let scale = 1.0 / batch.len() as f64;
        for _ in 0..params.epochs {
            let mut g_kind: Vec<Vec<f64>> = self.kind_logits.iter().map(|l| vec![0.0; l.len()]).collect();
            let mut g_bins: Vec<Vec<Vec<Vec<f64>>>> = self
                .bin_logits
                .iter()
                .map(|s| s.iter().map(|k| k.iter().map(|b| vec![0.0; b.len()]).collect()).collect())
                .collect();
            for (r, &a) in batch.iter().zip(&adv) {
                if a == 0.0 {
                    continue;
                }
                let ratio = (self.log_prob(&r.choices) - r.logp).exp();
                if (a > 0.0 && ratio > 1.0 + params.clip) || (a < 0.0 && ratio < 1.0 - params.clip) {
                    continue;
                }
                let coef = a * ratio * scale;
                for (s, c) in r.choices.iter().enumerate() {
                    let k = c.kind.unwrap_or(n);
                    add_log_grad(&mut g_kind[s], &self.kind_logits[s], k, coef);
                    for (j, &b) in c.bins.iter().enumerate() {
                        add_log_grad(&mut g_bins[s][k][j], &self.bin_logits[s][k][j], b, coef);
                    }
                }
            }
            for (l, g) in self.kind_logits.iter_mut().zip(&g_kind) {
                for (x, d) in l.iter_mut().zip(g) {
                    *x += params.lr * d;
                }
            }
            for (ls, gs) in self.bin_logits.iter_mut().zip(&g_bins) {
                for (lk, gk) in ls.iter_mut().zip(gs) {
                    for (lb, gb) in lk.iter_mut().zip(gk) {
                        for (x, d) in lb.iter_mut().zip(gb) {
                            *x += params.lr * d;
                        }
                    }
                }
            }
        }
        let mean = rewards.iter().sum::<f64>() * scale;
        self.baseline += params.baseline_lr * (mean - self.baseline);
    }
}

pub(crate) fn search<R: Rng + ?Sized>(
    recorder: &mut Recorder<'_>,
    space: &SearchSpace,
    budget: usize,
    updates: usize,
    seed: u64,
    params: &PpoParams,
    rng: &mut R,
) -> Result<PpoAgent> {
    let grid = ActionGrid::new(space, params.bins, params.delta_bins);
    let mut agent = PpoAgent::new(grid, params.steps);
    let updates = updates.min(budget);
    for u in 0..updates {
        let size = budget / updates + usize::from(u < budget % updates);
        let batch: Vec<Rollout> = (0..size).map(|_| agent.sample(rng)).collect();
        let plans: Vec<CorrectionPlan> = batch.iter().map(|r| agent.plan(r, seed)).collect();
        let evals = recorder.objective().evaluate_many(&plans)?;
        let rewards: Vec<f64> = evals.iter().map(|e| recorder.objective().reward(e)).collect();
        for (plan, eval) in plans.into_iter().zip(evals) {
            recorder.push(plan, eval);
        }
        agent.update(&batch, &rewards, params);
    }
    Ok(agent)
}
