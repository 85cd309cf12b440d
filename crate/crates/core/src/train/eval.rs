//! Top-k evaluation over groups and the InfoNCE mutual-information bound.

use std::collections::BTreeMap;

use crate::data::SequenceSample;
use crate::error::{Error, Result};
use crate::model::pool_features;
use crate::objectives::classify;
use crate::params::ParamSet;
use crate::tape::Tape;

use super::Model;

/// `ln N - L_N`: the mutual-information lower-bound estimate implied by a
/// mean per-step contrastive loss over sets of size `n`.
pub fn mi_lower_bound(mean_nce_loss: f64, n: usize) -> f64 {
    (n as f64).ln() - mean_nce_loss
}

/// True when `label` ranks among the `k` best scores, breaking ties toward
/// the lowest class index.
pub fn topk_hit(scores: &[f64], label: usize, k: usize) -> bool {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.iter().take(k).any(|&i| i == label)
}

fn group_scores(
    model: &Model,
    params: &ParamSet,
    members: &[&SequenceSample],
) -> Result<Vec<f64>> {
    let pool_len = model.cfg().min_seq_len();
    let mut tape = Tape::new(params);
    let mut pooled_members = Vec::with_capacity(members.len());
    for s in members {
        if s.len() < pool_len {
            return Err(Error::SequenceTooShort {
                needed: pool_len,
                got: s.len(),
            });
        }
        let latents = crate::model::encode_sequence(&mut tape, &s.patches[..pool_len], model.encoder())?;
        pooled_members.push(pool_features(&mut tape, &latents)?);
    }
    let feature = pool_features(&mut tape, &pooled_members)?;
    let logp = classify(&mut tape, feature, model.classifier())?;
    Ok(tape.value(logp).data().to_vec())
}

/// Accuracy at each requested `k` over a labeled evaluation set. Sequences
/// sharing a group are pooled into one prediction (an image's columns vote
/// as one item). `threads` caps the worker threads used to fan out over
/// groups; results are merged in group order either way.
pub fn evaluate_topk(
    model: &Model,
    params: &ParamSet,
    data: &[SequenceSample],
    k_list: &[usize],
    threads: usize,
) -> Result<Vec<(usize, f64)>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut groups: BTreeMap<u64, Vec<&SequenceSample>> = BTreeMap::new();
    for s in data {
        groups.entry(s.group).or_default().push(s);
    }
    let entries: Vec<(u64, Vec<&SequenceSample>)> = groups.into_iter().collect();
    let labels: Vec<usize> = entries
        .iter()
        .map(|(_, members)| {
            members
                .iter()
                .find_map(|s| s.label)
                .ok_or(Error::MissingLabel {
                    id: members[0].id,
                })
        })
        .collect::<Result<_>>()?;

    let workers = threads.max(1).min(entries.len());
    let scores: Vec<Vec<f64>> = if workers <= 1 {
        entries
            .iter()
            .map(|(_, members)| group_scores(model, params, members))
            .collect::<Result<_>>()?
    } else {
        let chunk = entries.len().div_ceil(workers);
        let mut out: Vec<Option<Result<Vec<Vec<f64>>>>> =
            (0..workers).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (w, chunk_entries) in entries.chunks(chunk).enumerate() {
                handles.push((
                    w,
                    scope.spawn(move || {
                        chunk_entries
                            .iter()
                            .map(|(_, members)| group_scores(model, params, members))
                            .collect::<Result<Vec<_>>>()
                    }),
                ));
            }
            for (w, h) in handles {
                out[w] = Some(h.join().expect("eval worker panicked"));
            }
        });
        let mut merged = Vec::with_capacity(entries.len());
        for slot in out.into_iter().flatten() {
            merged.extend(slot?);
        }
        merged
    };

    let n = entries.len() as f64;
    Ok(k_list
        .iter()
        .map(|&k| {
            let hits = scores
                .iter()
                .zip(&labels)
                .filter(|(s, &y)| topk_hit(s, y, k))
                .count();
            (k, hits as f64 / n)
        })
        .collect())
}
