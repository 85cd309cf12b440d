//! Labeled/unlabeled splitting over whole groups (an image's column
//! sequences stay together), with a manifest for exact reproduction.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

use super::SequenceSample;

/// Result of a split. Sequences in `unlabeled` have their labels removed;
/// the true labels survive in `hidden_labels` for evaluation only, never for
/// training.
#[derive(Clone, Debug)]
pub struct LabeledSplit {
    pub labeled: Vec<SequenceSample>,
    pub unlabeled: Vec<SequenceSample>,
    pub hidden_labels: HashMap<u64, usize>,
    pub labeled_groups: Vec<u64>,
    n_groups_labeled: usize,
    n_groups_unlabeled: usize,
}

impl LabeledSplit {
    /// Ratio of unlabeled to labeled groups.
    pub fn rho(&self) -> f64 {
        self.n_groups_unlabeled as f64 / self.n_groups_labeled as f64
    }

    /// Default classification weight `8 * rho`.
    pub fn alpha_default(&self) -> f64 {
        8.0 * self.rho()
    }

    pub fn group_counts(&self) -> (usize, usize) {
        (self.n_groups_labeled, self.n_groups_unlabeled)
    }
}

/// Uniform random sample of `round(fraction * groups)` groups keeps labels;
/// the rest have labels hidden. There is no per-class stratification.
pub fn split_labeled(
    dataset: Vec<SequenceSample>,
    fraction: f64,
    rng: &mut RngState,
) -> Result<LabeledSplit> {
    if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(Error::InvalidConfig {
            what: "split fraction",
            detail: format!("fraction must be in (0, 1), got {fraction}"),
        });
    }
    let mut groups: Vec<u64> = Vec::new();
    let mut seen = HashSet::new();
    for s in &dataset {
        if seen.insert(s.group) {
            groups.push(s.group);
        }
    }
    let n_lab = (fraction * groups.len() as f64).round() as usize;
    if n_lab == 0 {
        return Err(Error::DegenerateSplit {
            fraction,
            items: groups.len(),
        });
    }
    let total = groups.len();
    rng.shuffle(&mut groups);
    let labeled_groups: HashSet<u64> = groups[..n_lab].iter().copied().collect();
    apply_split(dataset, &groups[..n_lab], total - n_lab, labeled_groups)
}

fn apply_split(
    dataset: Vec<SequenceSample>,
    labeled_list: &[u64],
    n_groups_unlabeled: usize,
    labeled_set: HashSet<u64>,
) -> Result<LabeledSplit> {
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut hidden = HashMap::new();
    for mut s in dataset {
        if labeled_set.contains(&s.group) {
            if s.label.is_none() {
                return Err(Error::MissingLabel { id: s.id });
            }
            labeled.push(s);
        } else {
            if let Some(y) = s.label.take() {
                hidden.insert(s.id, y);
            }
            unlabeled.push(s);
        }
    }
    Ok(LabeledSplit {
        labeled,
        unlabeled,
        hidden_labels: hidden,
        labeled_groups: labeled_list.to_vec(),
        n_groups_labeled: labeled_list.len(),
        n_groups_unlabeled,
    })
}

/// On-disk record of which groups were labeled, for exact re-runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled_groups: Vec<u64>,
}

/// Reapplies a recorded split to a dataset.
pub fn split_from_manifest(
    dataset: Vec<SequenceSample>,
    manifest: &SplitManifest,
) -> Result<LabeledSplit> {
    let labeled_set: HashSet<u64> = manifest.labeled_groups.iter().copied().collect();
    let mut all_groups = HashSet::new();
    for s in &dataset {
        all_groups.insert(s.group);
    }
    let n_unlabeled = all_groups.len() - labeled_set.len();
    apply_split(dataset, &manifest.labeled_groups, n_unlabeled, labeled_set)
}
