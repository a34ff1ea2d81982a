use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actions::{sample_within, ActionInstance, ActionKind};
use crate::error::{Error, Result};

/// One searchable kind with (possibly narrowed) parameter bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceEntry {
    pub kind: ActionKind,
    pub bounds: Vec<(f64, f64)>,
}

impl SpaceEntry {
    pub fn catalog(kind: ActionKind) -> Self {
        Self {
            kind,
            bounds: kind.params().iter().map(|r| (r.low, r.high)).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ActionInstance {
        sample_within(self.kind, &self.bounds, rng)
    }

    /// Clamps a parameter vector into these bounds (and the catalog).
    pub fn clamp(&self, params: &[f64]) -> Vec<f64> {
        self.kind
            .params()
            .iter()
            .zip(params.iter().zip(&self.bounds))
            .map(|(r, (v, &(lo, hi)))| {
                let v = if r.integer_valued { v.round() } else { *v };
                r.clamp(v.clamp(lo, hi))
            })
            .collect()
    }

    pub fn contains(&self, action: &ActionInstance) -> bool {
        action.kind() == self.kind
            && action
                .params()
                .iter()
                .zip(&self.bounds)
                .all(|(v, &(lo, hi))| *v >= lo && *v <= hi)
    }
}

/// The candidate action space: which kinds may be used, within which bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub entries: Vec<SpaceEntry>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self::full()
    }
}

impl SearchSpace {
    /// All nine kinds with their catalog ranges.
    pub fn full() -> Self {
        Self {
            entries: ActionKind::ALL.into_iter().map(SpaceEntry::catalog).collect(),
        }
    }

    pub fn only(kinds: &[ActionKind]) -> Self {
        let mut kinds = kinds.to_vec();
        kinds.sort();
        kinds.dedup();
        Self {
            entries: kinds.into_iter().map(SpaceEntry::catalog).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn kinds(&self) -> Vec<ActionKind> {
        self.entries.iter().map(|e| e.kind).collect()
    }

    pub fn entry(&self, kind: ActionKind) -> Option<&SpaceEntry> {
        self.entries.iter().find(|e| e.kind == kind)
    }

    /// Bounds must be ordered sub-intervals of the catalog ranges.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("search space has no action kinds".into()));
        }
        for e in &self.entries {
            let ranges = e.kind.params();
            if e.bounds.len() != ranges.len() {
                return Err(Error::Config(format!("{}: expected {} bounds", e.kind, ranges.len())));
            }
            for (r, &(lo, hi)) in ranges.iter().zip(&e.bounds) {
                if !(lo <= hi) || lo < r.low || hi > r.high {
                    return Err(Error::Config(format!(
                        "{}.{} bounds [{lo}, {hi}] are not inside [{}, {}]",
                        e.kind, r.name, r.low, r.high
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tightens bounds that depend on the horizon: shifts must satisfy
    /// `|shift| < H`, so `ShiftSeries` disappears when `H = 1`.
    pub fn for_horizon(&self, horizon: usize) -> SearchSpace {
        let limit = horizon as f64 - 1.0;
        let entries = self
            .entries
            .iter()
            .filter_map(|e| {
                if e.kind != ActionKind::ShiftSeries {
                    return Some(e.clone());
                }
                let (lo, hi) = e.bounds[0];
                let (lo, hi) = (lo.max(-limit), hi.min(limit));
                (limit >= 1.0 && lo <= hi).then(|| SpaceEntry {
                    kind: e.kind,
                    bounds: vec![(lo, hi)],
                })
            })
            .collect();
        SearchSpace { entries }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn horizon_clamps_shift() {
        let s = SearchSpace::full().for_horizon(8);
        let e = s.entry(ActionKind::ShiftSeries).unwrap();
        assert_eq!(e.bounds[0], (-7.0, 7.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let a = e.sample(&mut rng);
            assert!(a.params()[0].abs() < 8.0);
        }
        assert!(SearchSpace::full().for_horizon(1).entry(ActionKind::ShiftSeries).is_none());
    }

    #[test]
    fn validation() {
        assert!(SearchSpace::full().validate().is_ok());
        let mut s = SearchSpace::only(&[ActionKind::ScaleAmplitude]);
        s.entries[0].bounds[0] = (-6.0, 1.0);
        assert!(s.validate().is_err());
        assert!(SearchSpace { entries: vec![] }.validate().is_err());
    }

    #[test]
    fn clamp_respects_bounds() {
        let e = SpaceEntry {
            kind: ActionKind::PiecewiseScaleHigh,
            bounds: vec![(75.0, 80.0), (2.0, 3.0)],
        };
        assert_eq!(e.clamp(&[100.0, -4.0]), vec![80.0, 2.0]);
    }
}
