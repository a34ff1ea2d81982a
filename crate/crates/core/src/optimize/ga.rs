use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::objective::{Evaluation, Objective};
use super::space::SearchSpace;
use super::trace::Recorder;
use super::{OptimizerConfig, SearchTrace, Strategy};
use crate::actions::{ActionInstance, CorrectionPlan};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaParams {
    pub population: usize,
    pub tournament: usize,
    /// Per-step probability of perturbing its parameters.
    pub mutation_rate: f64,
    /// Mutation standard deviation as a fraction of the parameter range.
    pub mutation_scale: f64,
    pub max_steps: usize,
    pub elitism: usize,
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            population: 30,
            tournament: 3,
            mutation_rate: 0.5,
            mutation_scale: 0.1,
            max_steps: 3,
            elitism: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaOutcome {
    pub trace: SearchTrace,
    /// Last generation with fitness, best first.
    pub final_population: Vec<(CorrectionPlan, f64)>,
    pub generations: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Member {
    plan: CorrectionPlan,
    fitness: f64,
}

fn fitness(objective: &Objective, eval: &Evaluation) -> f64 {
    if eval.consistent {
        objective.improvement(eval.val_mse)
    } else {
        f64::NEG_INFINITY
    }
}

fn random_genome<R: Rng + ?Sized>(space: &SearchSpace, max_steps: usize, seed: u64, rng: &mut R) -> CorrectionPlan {
    let len = rng.random_range(1..=max_steps.max(1));
    let steps = (0..len)
        .map(|_| space.entries[rng.random_range(0..space.len())].sample(rng))
        .collect();
    CorrectionPlan {
        steps,
        affine: None,
        seed,
    }
}

/// Gaussian perturbation of each step's parameters, clamped into the
/// space's bounds. Steps whose kind is outside the space are left as is.
pub fn mutate<R: Rng + ?Sized>(plan: &CorrectionPlan, space: &SearchSpace, params: &GaParams, rng: &mut R) -> CorrectionPlan {
    let steps = plan
        .steps
        .iter()
        .map(|step| {
            let Some(entry) = space.entry(step.kind()) else {
                return step.clone();
            };
            if step.params().is_empty() || !rng.random_bool(params.mutation_rate.clamp(0.0, 1.0)) {
                return step.clone();
            }
            let moved: Vec<f64> = step
                .params()
                .iter()
                .zip(&entry.bounds)
                .map(|(v, &(lo, hi))| {
                    let sd = params.mutation_scale * (hi - lo);
                    if sd > 0.0 {
                        v + Normal::new(0.0, sd).expect("positive std").sample(rng)
                    } else {
                        *v
                    }
                })
                .collect();
            ActionInstance::clamped(step.kind(), &entry.clamp(&moved)).expect("clamped parameters are admissible")
        })
        .collect();
    CorrectionPlan {
        steps,
        affine: None,
        seed: plan.seed,
    }
}

/// Uniform crossover at step granularity.
fn crossover<R: Rng + ?Sized>(a: &CorrectionPlan, b: &CorrectionPlan, rng: &mut R) -> CorrectionPlan {
    let len = if rng.random_bool(0.5) { a.steps.len() } else { b.steps.len() };
    let steps = (0..len)
        .map(|i| match (a.steps.get(i), b.steps.get(i)) {
            (Some(x), Some(y)) => {
                if rng.random_bool(0.5) {
                    x.clone()
                } else {
                    y.clone()
                }
            }
            (Some(x), None) | (None, Some(x)) => x.clone(),
            (None, None) => unreachable!("length comes from a parent"),
        })
        .collect();
    CorrectionPlan {
        steps,
        affine: None,
        seed: a.seed,
    }
}

fn tournament<'m, R: Rng + ?Sized>(pop: &'m [Member], k: usize, rng: &mut R) -> &'m Member {
    let mut best = &pop[rng.random_range(0..pop.len())];
    for _ in 1..k.max(1) {
        let c = &pop[rng.random_range(0..pop.len())];
        if better(c, best) {
            best = c;
        }
    }
    best
}

fn better(a: &Member, b: &Member) -> bool {
    match a.fitness.total_cmp(&b.fitness) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a.plan.cmp_key(&b.plan) == std::cmp::Ordering::Less,
    }
}

fn rank(pop: &mut [Member]) {
    pop.sort_by(|a, b| b.fitness.total_cmp(&a.fitness).then_with(|| a.plan.cmp_key(&b.plan)));
}

fn score(recorder: &mut Recorder<'_>, plans: Vec<CorrectionPlan>) -> Result<Vec<Member>> {
    let objective = recorder.objective();
    let evals = objective.evaluate_many(&plans)?;
    Ok(plans
        .into_iter()
        .zip(evals)
        .map(|(plan, eval)| {
            let fitness = fitness(objective, &eval);
            recorder.push(plan.clone(), eval);
            Member { plan, fitness }
        })
        .collect())
}

/// Returns the final population and the number of generations run.
#[allow(clippy::too_many_arguments)]
pub(crate) fn search<R: Rng + ?Sized>(
    recorder: &mut Recorder<'_>,
    space: &SearchSpace,
    budget: usize,
    generations: usize,
    seed: u64,
    params: &GaParams,
    rng: &mut R,
    seeds: &[CorrectionPlan],
) -> Result<(Vec<Member>, usize)> {
    let size = params.population.min(budget).max(1);
    let mut initial: Vec<CorrectionPlan> = seeds
        .iter()
        .take(size)
        .map(|p| CorrectionPlan {
            steps: p.steps.clone(),
            affine: None,
            seed,
        })
        .collect();
    while initial.len() < size {
        initial.push(random_genome(space, params.max_steps, seed, rng));
    }
    let mut spent = initial.len();
    let mut pop = score(recorder, initial)?;
    rank(&mut pop);
    let elite = params.elitism.min(size);
    let mut done = 1;
    while done < generations && spent < budget {
        let children = (size - elite).min(budget - spent);
        if children == 0 {
            break;
        }
        let plans: Vec<CorrectionPlan> = (0..children)
            .map(|_| {
                let a = tournament(&pop, params.tournament, rng);
                let b = tournament(&pop, params.tournament, rng);
                let child = crossover(&a.plan, &b.plan, rng);
                mutate(&child, space, params, rng)
            })
            .collect();
        spent += children;
        let mut next: Vec<Member> = pop[..elite].to_vec();
        next.extend(score(recorder, plans)?);
        rank(&mut next);
        pop = next;
        done += 1;
    }
    Ok((pop, done))
}

/// Runs the genetic search with `seeds` injected into the first generation.
pub fn evolve(objective: &Objective, cfg: &OptimizerConfig, seeds: &[CorrectionPlan]) -> Result<GaOutcome> {
    cfg.validate()?;
    let space = cfg.space.for_horizon(objective.horizon());
    if space.is_empty() {
        return Err(Error::Config("no action kind is usable at this horizon".into()));
    }
    let mut recorder = Recorder::new(objective, Strategy::Ga, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[cfg.seed, Strategy::Ga as u64 + 1]));
    let (pop, generations) = search(
        &mut recorder,
        &space,
        cfg.budget,
        cfg.episodes,
        cfg.seed,
        &cfg.params.ga,
        &mut rng,
        seeds,
    )?;
    Ok(GaOutcome {
        trace: recorder.finish(),
        final_population: pop.into_iter().map(|m| (m.plan, m.fitness)).collect(),
        generations,
    })
}
