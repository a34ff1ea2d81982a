use rand::Rng;

use super::space::SearchSpace;
use super::trace::Recorder;
use crate::actions::CorrectionPlan;
use crate::error::Result;

/// Per-kind draw counts. Parameterless kinds need a single draw; the rest
/// of the budget is spread evenly with the remainder going to the first
/// kinds.
pub(crate) fn allocation(space: &SearchSpace, budget: usize) -> Vec<usize> {
    let n = space.len();
    if budget <= n {
        return (0..n).map(|i| usize::from(i < budget)).collect();
    }
    let open: Vec<usize> = (0..n).filter(|&i| space.entries[i].kind.arity() > 0).collect();
    let mut counts: Vec<usize> = vec![1; n];
    if open.is_empty() {
        return counts;
    }
    let spread = budget - (n - open.len());
    for (j, &i) in open.iter().enumerate() {
        counts[i] = spread / open.len() + usize::from(j < spread % open.len());
    }
    counts
}

pub(crate) fn search<R: Rng + ?Sized>(
    recorder: &mut Recorder<'_>,
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    rng: &mut R,
) -> Result<()> {
    let counts = allocation(space, budget);
    let mut plans = Vec::with_capacity(budget);
    for (entry, &count) in space.entries.iter().zip(&counts) {
        for _ in 0..count {
            plans.push(CorrectionPlan {
                steps: vec![entry.sample(rng)],
                affine: None,
                seed,
            });
        }
    }
    let evals = recorder.objective().evaluate_many(&plans)?;
    for (plan, eval) in plans.into_iter().zip(evals) {
        recorder.push(plan, eval);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::ActionKind;

    #[test]
    fn allocation_is_even() {
        let space = SearchSpace::full();
        let c = allocation(&space, 9);
        assert_eq!(c, vec![1; 9]);
        let c = allocation(&space, 200);
        assert_eq!(c.iter().sum::<usize>(), 200);
        let swap = ActionKind::SwapSeries.ordinal();
        assert_eq!(c[swap], 1);
        let others: Vec<usize> = c.iter().enumerate().filter(|(i, _)| *i != swap).map(|(_, v)| *v).collect();
        assert!(others.iter().max().unwrap() - others.iter().min().unwrap() <= 1);
        let c = allocation(&space, 5);
        assert_eq!(c.iter().sum::<usize>(), 5);
        assert_eq!(&c[..5], &[1, 1, 1, 1, 1]);
    }
}
