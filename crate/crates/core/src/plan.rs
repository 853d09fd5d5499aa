//! Session schedule: disjoint class splits for pretraining, the base
//! session and the N-way K-shot incremental sessions, plus the growing
//! evaluation pools.

use std::collections::HashSet;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;

const STREAM_ASSIGN: u64 = 0x11;
const STREAM_SUPPORT: u64 = 0x5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub pretrain: u32,
    pub base: u32,
    pub sessions: u32,
    pub way: u32,
    pub shot: u32,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            pretrain: 40,
            base: 20,
            sessions: 5,
            way: 4,
            shot: 5,
        }
    }
}

impl Protocol {
    pub fn classes_needed(&self) -> usize {
        (self.pretrain + self.base + self.sessions * self.way) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionPlan {
    pub pretrain_classes: Vec<u32>,
    pub base_classes: Vec<u32>,
    pub incremental: Vec<Vec<u32>>,
    pub shot: u32,
    pub seed: u64,
}

/// Assign disjoint class sets by chunking a seeded shuffle of the dataset's
/// classes, then fix the K-shot support draws per session.
pub fn plan_sessions(dataset: &Dataset, protocol: &Protocol, seed: u64) -> Result<SessionPlan> {
    if protocol.base == 0 {
        return Err(Error::InvalidArgument("base session needs classes".into()));
    }
    let available = dataset.class_count();
    let needed = protocol.classes_needed();
    if needed > available {
        return Err(Error::InsufficientClasses { needed, available });
    }
    let mut classes: Vec<u32> = (0..available as u32).collect();
    Rng::new(seed).stream(STREAM_ASSIGN).shuffle(&mut classes);

    let take = |n: usize, cursor: &mut usize| -> Vec<u32> {
        let out = classes[*cursor..*cursor + n].to_vec();
        *cursor += n;
        out
    };
    let mut cursor = 0usize;
    let pretrain_classes = take(protocol.pretrain as usize, &mut cursor);
    let base_classes = take(protocol.base as usize, &mut cursor);
    let incremental = (0..protocol.sessions)
        .map(|_| take(protocol.way as usize, &mut cursor))
        .collect();

    let plan = SessionPlan {
        pretrain_classes,
        base_classes,
        incremental,
        shot: protocol.shot,
        seed,
    };
    plan.validate()?;
    Ok(plan)
}

impl SessionPlan {
    /// Rebuild a plan from explicit class lists (e.g. out of a checkpoint);
    /// rejects any overlap between splits.
    pub fn from_parts(
        pretrain_classes: Vec<u32>,
        base_classes: Vec<u32>,
        incremental: Vec<Vec<u32>>,
        shot: u32,
        seed: u64,
    ) -> Result<Self> {
        let plan = Self {
            pretrain_classes,
            base_classes,
            incremental,
            shot,
            seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let groups = std::iter::once(&self.pretrain_classes)
            .chain(std::iter::once(&self.base_classes))
            .chain(self.incremental.iter());
        for group in groups {
            for &c in group {
                if !seen.insert(c) {
                    return Err(Error::OverlappingClasses(c));
                }
            }
        }
        Ok(())
    }

    /// Number of evaluated sessions: the base session plus the increments.
    pub fn session_count(&self) -> usize {
        1 + self.incremental.len()
    }

    /// Classes of session `t` (0 = base).
    pub fn session_classes(&self, t: usize) -> Result<&[u32]> {
        if t == 0 {
            Ok(&self.base_classes)
        } else if t <= self.incremental.len() {
            Ok(&self.incremental[t - 1])
        } else {
            Err(Error::IndexOutOfRange {
                index: t,
                len: self.incremental.len(),
            })
        }
    }

    /// All classes evaluated at session `t`: base plus sessions 1..=t.
    pub fn classes_up_to(&self, t: usize) -> Vec<u32> {
        let mut out = self.base_classes.clone();
        for s in self.incremental.iter().take(t) {
            out.extend_from_slice(s);
        }
        out
    }

    /// Classes introduced after the base session, up to and including `t`.
    pub fn novel_classes_up_to(&self, t: usize) -> Vec<u32> {
        let mut out = Vec::new();
        for s in self.incremental.iter().take(t) {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn pretrain_train_indices(&self, dataset: &Dataset) -> Vec<usize> {
        self.pretrain_classes
            .iter()
            .flat_map(|&c| dataset.train_indices_of_class(c))
            .collect()
    }

    pub fn pretrain_test_indices(&self, dataset: &Dataset) -> Vec<usize> {
        self.pretrain_classes
            .iter()
            .flat_map(|&c| dataset.test_indices_of_class(c))
            .collect()
    }

    pub fn base_train_indices(&self, dataset: &Dataset) -> Vec<usize> {
        self.base_classes
            .iter()
            .flat_map(|&c| dataset.train_indices_of_class(c))
            .collect()
    }

    /// K-shot support set of incremental session `t` (t ≥ 1). Subsampling is
    /// seeded per session id, so adding sessions never reshuffles earlier
    /// ones.
    pub fn support_indices(&self, dataset: &Dataset, t: usize) -> Result<Vec<usize>> {
        if t == 0 || t > self.incremental.len() {
            return Err(Error::IndexOutOfRange {
                index: t,
                len: self.incremental.len(),
            });
        }
        let mut rng = Rng::new(self.seed).stream(STREAM_SUPPORT + t as u64);
        let mut out = Vec::new();
        for &class in &self.incremental[t - 1] {
            let mut pool = dataset.train_indices_of_class(class);
            if pool.len() < self.shot as usize {
                return Err(Error::InvalidArgument(format!(
                    "class {class} has {} train samples, need {} shots",
                    pool.len(),
                    self.shot
                )));
            }
            rng.shuffle(&mut pool);
            pool.truncate(self.shot as usize);
            pool.sort_unstable();
            out.extend(pool);
        }
        Ok(out)
    }

    /// Evaluation pool of session `t`: held-out samples of every class seen
    /// so far.
    pub fn eval_pool(&self, dataset: &Dataset, t: usize) -> Vec<usize> {
        self.classes_up_to(t)
            .iter()
            .flat_map(|&c| dataset.test_indices_of_class(c))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};

    fn dataset() -> Dataset {
        generate(&DatasetSpec::default()).unwrap()
    }

    #[test]
    fn default_protocol_uses_80_classes() {
        let ds = dataset();
        let plan = plan_sessions(&ds, &Protocol::default(), 5).unwrap();
        assert_eq!(plan.pretrain_classes.len(), 40);
        assert_eq!(plan.base_classes.len(), 20);
        assert_eq!(plan.incremental.len(), 5);
        let total: usize = 40 + 20 + plan.incremental.iter().map(Vec::len).sum::<usize>();
        assert_eq!(total, 80);
        // session 3 training set: 4-way 5-shot = 20 samples
        assert_eq!(plan.support_indices(&ds, 3).unwrap().len(), 20);
    }

    #[test]
    fn zero_incremental_sessions() {
        let ds = dataset();
        let protocol = Protocol {
            sessions: 0,
            ..Protocol::default()
        };
        let plan = plan_sessions(&ds, &protocol, 5).unwrap();
        assert_eq!(plan.session_count(), 1);
        assert!(plan.support_indices(&ds, 1).is_err());
    }

    #[test]
    fn insufficient_classes_is_an_error() {
        let ds = dataset();
        let protocol = Protocol {
            pretrain: 70,
            base: 20,
            ..Protocol::default()
        };
        assert!(matches!(
            plan_sessions(&ds, &protocol, 5),
            Err(Error::InsufficientClasses { .. })
        ));
    }

    #[test]
    fn overlap_is_rejected() {
        let err = SessionPlan::from_parts(
            vec![0, 1],
            vec![2, 3],
            vec![vec![4], vec![3]],
            5,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OverlappingClasses(3)));
    }

    #[test]
    fn support_draw_is_stable_per_session() {
        let ds = dataset();
        let plan = plan_sessions(&ds, &Protocol::default(), 5).unwrap();
        let s2_a = plan.support_indices(&ds, 2).unwrap();
        let s2_b = plan.support_indices(&ds, 2).unwrap();
        assert_eq!(s2_a, s2_b);
        // a plan with more sessions keeps earlier draws identical
        let bigger = Protocol {
            sessions: 5,
            ..Protocol::default()
        };
        let smaller = Protocol {
            sessions: 2,
            ..Protocol::default()
        };
        let p_big = plan_sessions(&ds, &bigger, 5).unwrap();
        let p_small = plan_sessions(&ds, &smaller, 5).unwrap();
        assert_eq!(
            p_big.support_indices(&ds, 1).unwrap(),
            p_small.support_indices(&ds, 1).unwrap()
        );
    }

    #[test]
    fn eval_pool_grows_with_sessions() {
        let ds = dataset();
        let plan = plan_sessions(&ds, &Protocol::default(), 5).unwrap();
        let p0 = plan.eval_pool(&ds, 0);
        let p2 = plan.eval_pool(&ds, 2);
        assert_eq!(p0.len(), 20 * 10);
        assert_eq!(p2.len(), (20 + 8) * 10);
        for i in &p0 {
            assert!(p2.contains(i));
        }
    }
}
