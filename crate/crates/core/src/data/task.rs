//! Contrastive task construction: one positive target per prediction step
//! plus negatives drawn uniformly from the minibatch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CpcConfig;
use crate::rng::RngState;

use super::SequenceSample;

/// A slot in the shuffled candidate list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CandidateRef {
    /// The true future patch of the task's own sequence.
    Positive,
    /// A patch of some sequence in the batch, addressed by `(sample id,
    /// position)`.
    Negative { sample_id: u64, position: usize },
}

/// One prediction step: the position being predicted and the shuffled
/// candidate set containing exactly one positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTask {
    pub positive_position: usize,
    pub candidates: Vec<CandidateRef>,
    pub positive_slot: usize,
}

/// The contrastive task of one sequence: `context_len` conditioning steps
/// followed by one [`StepTask`] per prediction step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveTask {
    pub sample_id: u64,
    pub context_len: usize,
    pub steps: Vec<StepTask>,
}

/// Draws `n_neg` distinct `(sample id, position)` pairs uniformly without
/// replacement from every patch position of every sequence in `pool`,
/// excluding the positive's own pair. Positions of the positive's own
/// sequence other than `exclude.1` remain eligible.
pub fn draw_negatives(
    pool: &[(u64, usize)],
    exclude: (u64, usize),
    n_neg: usize,
    rng: &mut RngState,
) -> Result<Vec<(u64, usize)>> {
    let mut eligible: Vec<(u64, usize)> = Vec::new();
    for &(id, len) in pool {
        for pos in 0..len {
            if (id, pos) != exclude {
                eligible.push((id, pos));
            }
        }
    }
    if eligible.len() < n_neg {
        return Err(Error::PoolTooSmall {
            needed: n_neg,
            available: eligible.len(),
        });
    }
    // Partial Fisher-Yates: the first n_neg entries are a uniform draw
    // without replacement.
    let total = eligible.len();
    for i in 0..n_neg {
        let j = i + rng.below((total - i) as u64) as usize;
        eligible.swap(i, j);
    }
    eligible.truncate(n_neg);
    Ok(eligible)
}

/// Builds the contrastive task of one sequence against a batch pool of
/// `(sample id, sequence length)` entries. The positive for step `k`
/// (1-based) sits at position `context_len + k - 1`; its slot in the
/// candidate list is drawn uniformly.
pub fn build_task(
    sample: &SequenceSample,
    pool: &[(u64, usize)],
    cfg: &CpcConfig,
    rng: &mut RngState,
) -> Result<ContrastiveTask> {
    if sample.len() < cfg.min_seq_len() {
        return Err(Error::SequenceTooShort {
            needed: cfg.min_seq_len(),
            got: sample.len(),
        });
    }
    let mut steps = Vec::with_capacity(cfg.pred_steps);
    for k in 1..=cfg.pred_steps {
        let positive_position = cfg.context_len + k - 1;
        let negatives = draw_negatives(
            pool,
            (sample.id, positive_position),
            cfg.set_size - 1,
            rng,
        )?;
        let positive_slot = rng.below(cfg.set_size as u64) as usize;
        let mut candidates = Vec::with_capacity(cfg.set_size);
        let mut neg_iter = negatives.into_iter();
        for slot in 0..cfg.set_size {
            if slot == positive_slot {
                candidates.push(CandidateRef::Positive);
            } else {
                let (sample_id, position) = neg_iter.next().expect("n_neg = set_size - 1");
                candidates.push(CandidateRef::Negative {
                    sample_id,
                    position,
                });
            }
        }
        steps.push(StepTask {
            positive_position,
            candidates,
            positive_slot,
        });
    }
    Ok(ContrastiveTask {
        sample_id: sample.id,
        context_len: cfg.context_len,
        steps,
    })
}

/// Tasks for every sequence of a batch, drawn against the whole batch pool.
pub fn build_tasks(
    samples: &[&SequenceSample],
    cfg: &CpcConfig,
    rng: &mut RngState,
) -> Result<Vec<ContrastiveTask>> {
    let pool: Vec<(u64, usize)> = samples.iter().map(|s| (s.id, s.len())).collect();
    samples
        .iter()
        .map(|s| build_task(s, &pool, cfg, rng))
        .collect()
}
