//! Epoch batching: the unlabeled set defines the epoch; the labeled set
//! recycles with a reshuffle whenever it runs out.

use crate::error::{Error, Result};
use crate::rng::RngState;

use super::Mode;

/// Indices (into the labeled / unlabeled sets) of one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

struct RecyclingStream {
    n: usize,
    order: Vec<usize>,
    pos: usize,
}

impl RecyclingStream {
    fn new(n: usize, rng: &mut RngState) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { n, order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut RngState) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos == self.n {
                rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Plans the minibatches of one epoch.
///
/// SSL modes: `batch_size/2` unlabeled + `batch_size/2` labeled per batch;
/// the epoch covers the unlabeled set once (at least one batch).
/// Supervised: all-labeled batches, the epoch covers the labeled set.
pub fn plan_epoch(
    mode: Mode,
    n_labeled: usize,
    n_unlabeled: usize,
    batch_size: usize,
    rng: &mut RngState,
) -> Result<Vec<BatchPlan>> {
    match mode {
        Mode::Cpc | Mode::Ccpc => {
            if n_labeled == 0 || n_unlabeled == 0 {
                return Err(Error::BothBatchesEmpty);
            }
            let half = batch_size / 2;
            let n_batches = (n_unlabeled / half).max(1);
            let mut unl = RecyclingStream::new(n_unlabeled, rng);
            let mut lab = RecyclingStream::new(n_labeled, rng);
            Ok((0..n_batches)
                .map(|_| BatchPlan {
                    labeled: lab.take(half, rng),
                    unlabeled: unl.take(half, rng),
                })
                .collect())
        }
        Mode::SupervisedOnly => {
            if n_labeled == 0 {
                return Err(Error::BothBatchesEmpty);
            }
            let n_batches = (n_labeled / batch_size).max(1);
            let mut lab = RecyclingStream::new(n_labeled, rng);
            Ok((0..n_batches)
                .map(|_| BatchPlan {
                    labeled: lab.take(batch_size, rng),
                    unlabeled: Vec::new(),
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ssl_batches_are_half_and_half() {
        let mut rng = RngState::new(1);
        let plans = plan_epoch(Mode::Cpc, 10, 80, 16, &mut rng).unwrap();
        assert_eq!(plans.len(), 10);
        for p in &plans {
            assert_eq!(p.labeled.len(), 8);
            assert_eq!(p.unlabeled.len(), 8);
        }
    }

    #[test]
    fn small_labeled_set_recycles_within_an_epoch() {
        let mut rng = RngState::new(2);
        // 10 labeled items but 8 needed per batch over 10 batches: items
        // must repeat, and each refill covers the whole set before reuse.
        let plans = plan_epoch(Mode::Cpc, 10, 80, 16, &mut rng).unwrap();
        let mut seen = vec![0usize; 10];
        for p in &plans {
            for &i in &p.labeled {
                seen[i] += 1;
            }
        }
        let total: usize = seen.iter().sum();
        assert_eq!(total, 80);
        let (min, max) = (seen.iter().min().unwrap(), seen.iter().max().unwrap());
        assert!(max - min <= 1, "recycling must stay balanced: {seen:?}");
    }

    #[test]
    fn epoch_covers_unlabeled_exactly_once_when_divisible() {
        let mut rng = RngState::new(3);
        let plans = plan_epoch(Mode::Ccpc, 4, 24, 8, &mut rng).unwrap();
        let mut seen = vec![0usize; 24];
        for p in &plans {
            for &i in &p.unlabeled {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn planning_is_deterministic_in_the_seed() {
        let a = plan_epoch(Mode::Cpc, 7, 33, 8, &mut RngState::new(9)).unwrap();
        let b = plan_epoch(Mode::Cpc, 7, 33, 8, &mut RngState::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn supervised_uses_only_labeled() {
        let mut rng = RngState::new(4);
        let plans = plan_epoch(Mode::SupervisedOnly, 33, 99, 16, &mut rng).unwrap();
        assert_eq!(plans.len(), 2);
        for p in &plans {
            assert_eq!(p.labeled.len(), 16);
            assert!(p.unlabeled.is_empty());
        }
    }

    #[test]
    fn tiny_labeled_set_still_yields_a_batch() {
        let mut rng = RngState::new(5);
        let plans = plan_epoch(Mode::SupervisedOnly, 3, 0, 16, &mut rng).unwrap();
        assert_eq!(plans.len(), 1);
        assert_eq!(plans[0].labeled.len(), 16);
    }

    #[test]
    fn empty_split_is_rejected() {
        let mut rng = RngState::new(6);
        assert!(plan_epoch(Mode::Cpc, 0, 10, 8, &mut rng).is_err());
        assert!(plan_epoch(Mode::SupervisedOnly, 0, 10, 8, &mut rng).is_err());
    }
}
