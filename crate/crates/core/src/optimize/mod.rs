//! The post-training search loop.
//!
//! Every strategy follows the same contract: the empty plan is evaluated
//! first, each candidate is scored on the validation split and checked
//! against the training split, and only candidates that pass the guard can
//! become the best plan. Strategies differ only in how candidates are
//! proposed.

mod ga;
mod objective;
mod ppo;
mod random;
mod sh_hpo;
mod space;
mod trace;

pub use ga::{evolve, mutate, GaOutcome, GaParams};
pub use objective::{Evaluation, Objective, DEFAULT_GUARD_TOLERANCE};
pub use ppo::{ActionGrid, PpoAgent, PpoParams};
pub use sh_hpo::{optimize_sh_hpo_with_outcome, successive_halving_ucb, Arm, HalvingOutcome};
pub use space::{SearchSpace, SpaceEntry};
pub use trace::{Episode, SearchTrace, TerminalRecord};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actions::CorrectionPlan;
use crate::affine::{AffineScope, AffineTail};
use crate::error::{Error, Result};
use crate::metrics::{per_channel_report, EvalReport, ForecastBatch};
use crate::seed;
use trace::Recorder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    ShHpo,
    Ppo,
    Ga,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Random, Strategy::ShHpo, Strategy::Ppo, Strategy::Ga];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::ShHpo => "sh-hpo",
            Strategy::Ppo => "ppo",
            Strategy::Ga => "ga",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown strategy {s:?} (random, sh-hpo, ppo, ga)")))
    }
}

/// Strategy-specific knobs. Defaults are the documented ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyParams {
    /// UCB1 exploration constant.
    pub ucb_c: f64,
    /// Line-search evaluations per coordinate before switching coordinate.
    pub line_search_sweep: usize,
    pub ppo: PpoParams,
    pub ga: GaParams,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            ucb_c: std::f64::consts::SQRT_2,
            line_search_sweep: 4,
            ppo: PpoParams::default(),
            ga: GaParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub strategy: Strategy,
    /// Total candidate evaluations, excluding the baseline.
    pub budget: usize,
    /// Policy updates (PPO) or generations (GA).
    pub episodes: usize,
    pub seed: u64,
    /// Fit an affine tail on validation after the search.
    #[serde(default)]
    pub affine_tail: Option<AffineScope>,
    /// Worker threads for candidate evaluation; 0 uses the global pool.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default)]
    pub space: SearchSpace,
    #[serde(default)]
    pub params: StrategyParams,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Random,
            budget: 200,
            episodes: 20,
            seed: 0,
            affine_tail: None,
            jobs: 0,
            space: SearchSpace::full(),
            params: StrategyParams::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn new(strategy: Strategy, budget: usize, seed: u64) -> Self {
        Self {
            strategy,
            budget,
            seed,
            ..Self::default()
        }
    }

    /// Field-level checks; returns `Error::Config` naming the field.
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if self.affine_tail.is_some() && self.budget < 2 {
            return Err(Error::Config("budget must be at least 2 when an affine tail is requested".into()));
        }
        if !(self.params.ucb_c >= 0.0) {
            return Err(Error::Config("params.ucb_c must be >= 0".into()));
        }
        if self.params.ga.population < 2 {
            return Err(Error::Config("params.ga.population must be at least 2".into()));
        }
        if self.params.ppo.steps == 0 {
            return Err(Error::Config("params.ppo.steps must be at least 1".into()));
        }
        self.space.validate()
    }

    /// The strategy that will actually run for this budget.
    pub fn effective_strategy(&self, space_len: usize) -> Strategy {
        let search_budget = self.search_budget();
        match self.strategy {
            Strategy::ShHpo if search_budget < space_len => Strategy::Random,
            Strategy::Ga if search_budget < 2 => Strategy::Random,
            s => s,
        }
    }

    fn search_budget(&self) -> usize {
        self.budget - usize::from(self.affine_tail.is_some())
    }

    fn rng(&self, strategy: Strategy) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed::derive(&[self.seed, strategy.tag()]))
    }
}

/// Runs the configured strategy on the validation objective.
///
/// Budgets below a strategy's minimum fall back to random search.
pub fn search(objective: &Objective, cfg: &OptimizerConfig) -> Result<SearchTrace> {
    search_with_outcome(objective, cfg, None).map(|(trace, _)| trace)
}

/// Like `search`, calling `observer` with each episode as soon as it is recorded.
pub fn search_observed(
    objective: &Objective,
    cfg: &OptimizerConfig,
    observer: &mut (dyn FnMut(&Episode) + Send),
) -> Result<SearchTrace> {
    search_with_outcome(objective, cfg, Some(observer)).map(|(trace, _)| trace)
}

fn search_with_outcome<'a>(
    objective: &'a Objective,
    cfg: &OptimizerConfig,
    observer: Option<&'a mut (dyn FnMut(&Episode) + Send + 'a)>,
) -> Result<(SearchTrace, Option<HalvingOutcome>)> {
    cfg.validate()?;
    if cfg.jobs > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Internal(format!("worker pool: {e}")))?;
        pool.install(|| search_inner(objective, cfg, observer))
    } else {
        search_inner(objective, cfg, observer)
    }
}

fn search_inner<'a>(
    objective: &'a Objective,
    cfg: &OptimizerConfig,
    observer: Option<&'a mut (dyn FnMut(&Episode) + Send + 'a)>,
) -> Result<(SearchTrace, Option<HalvingOutcome>)> {
    let space = cfg.space.for_horizon(objective.horizon());
    if space.is_empty() {
        return Err(Error::Config("no action kind is usable at this horizon".into()));
    }
    let strategy = cfg.effective_strategy(space.len());
    if strategy != cfg.strategy {
        log::warn!(
            "budget {} is below the minimum for {}; falling back to {}",
            cfg.budget,
            cfg.strategy,
            strategy
        );
    }
    let mut recorder = Recorder::observed(objective, cfg.strategy, cfg.seed, observer)?;
    let budget = cfg.search_budget();
    let mut rng = cfg.rng(strategy);
    let mut outcome = None;
    match strategy {
        Strategy::Random => random::search(&mut recorder, &space, budget, cfg.seed, &mut rng)?,
        Strategy::ShHpo => {
            outcome = Some(sh_hpo::search(&mut recorder, &space, budget, cfg.seed, &cfg.params)?);
        }
        Strategy::Ppo => {
            ppo::search(&mut recorder, &space, budget, cfg.episodes, cfg.seed, &cfg.params.ppo, &mut rng)?;
        }
        Strategy::Ga => {
            ga::search(&mut recorder, &space, budget, cfg.episodes, cfg.seed, &cfg.params.ga, &mut rng, &[])?;
        }
    }
    if let Some(scope) = cfg.affine_tail {
        add_affine_tail(&mut recorder, scope)?;
    }
    Ok((recorder.finish(), outcome))
}

fn add_affine_tail(recorder: &mut Recorder<'_>, scope: AffineScope) -> Result<()> {
    let objective = recorder.objective();
    let mut plan = recorder.best().0.clone();
    let val = objective.val();
    let corrected = plan.apply(val.predictions(), val.sample_ids())?;
    plan.affine = Some(AffineTail::fit(corrected.view(), val.truth(), scope)?);
    let eval = objective.evaluate(&plan)?;
    recorder.push(plan, eval);
    Ok(())
}

/// Applies `plan` to a held-out batch and reports against the base forecasts.
///
/// `train` supplies the consistency verdict with the given guard tolerance.
pub fn evaluate_plan(
    plan: &CorrectionPlan,
    train: &ForecastBatch,
    test: &ForecastBatch,
    guard_tolerance: f64,
) -> Result<EvalReport> {
    let corrected = test.with_predictions(plan.apply(test.predictions(), test.sample_ids())?)?;
    let mut report = per_channel_report(test, &corrected)?;
    let train_after = plan.apply(train.predictions(), train.sample_ids())?;
    let train_mse = crate::metrics::mse(train_after.view(), train.truth())?;
    report.train_consistent = Some(train_mse <= train.mse() * (1.0 + guard_tolerance));
    Ok(report)
}

/// Search on validation, then report once on the untouched test split.
pub fn run(objective: &Objective, cfg: &OptimizerConfig, test: &ForecastBatch) -> Result<(SearchTrace, EvalReport)> {
    if test.horizon() != objective.horizon() || test.channels() != objective.val().channels() {
        return Err(Error::Config("test batch shape differs from train/validation".into()));
    }
    let trace = search(objective, cfg)?;
    let report = evaluate_plan(&trace.best_plan, objective.train(), test, objective.guard_tolerance())?;
    Ok((trace, report))
}

/// Random search.
///
/// The budget is split evenly across the kinds of the space, parameters are
/// drawn uniformly, and the best consistent single-action plan wins.
pub fn optimize_random(objective: &Objective, cfg: &OptimizerConfig) -> Result<SearchTrace> {
    search(objective, &OptimizerConfig { strategy: Strategy::Random, ..cfg.clone() })
}

/// Successive halving over action kinds with UCB1 arm selection and a
/// golden-section line search per arm.
pub fn optimize_sh_hpo(objective: &Objective, cfg: &OptimizerConfig) -> Result<SearchTrace> {
    search(objective, &OptimizerConfig { strategy: Strategy::ShHpo, ..cfg.clone() })
}

/// Clipped-surrogate policy gradient over a discretized action grid.
pub fn optimize_ppo(objective: &Objective, cfg: &OptimizerConfig) -> Result<SearchTrace> {
    search(objective, &OptimizerConfig { strategy: Strategy::Ppo, ..cfg.clone() })
}

/// Genetic search over plans of one to three actions.
pub fn optimize_ga(objective: &Objective, cfg: &OptimizerConfig) -> Result<SearchTrace> {
    search(objective, &OptimizerConfig { strategy: Strategy::Ga, ..cfg.clone() })
}
