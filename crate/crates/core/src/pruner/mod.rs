//! Delete-set selection, structural rewiring and multi-layer schedules.

mod rewire;
mod schedule;

pub use rewire::{plan_channel_deletion, ChannelPlan, prune_block, prune_block_with_summary, RewireSummary};
pub use schedule::{
    run_schedule, run_schedule_with, BlockSelection, FineTune, NoFineTune, PruneReport,
    PruneSchedule, ReportHeader, ReportRow, ScheduleOutcome, ScheduleStep,
};

use std::collections::BTreeSet;
use std::str::FromStr;

use serde::Serialize;

use crate::similarity::SimilarityMatrix;
use crate::{Error, Result};

/// How a layer's delete set is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    /// Most-similar pairs first; the auxiliary score picks the victim.
    Qsfm,
    /// Lowest average rank (HRank-style).
    RankOnly,
    /// Seeded uniform sample.
    Random,
    /// Lowest L1 norm.
    L1Only,
}

impl Selector {
    pub fn as_str(self) -> &'static str {
        match self {
            Selector::Qsfm => "qsfm",
            Selector::RankOnly => "rank_only",
            Selector::Random => "random",
            Selector::L1Only => "l1_only",
        }
    }
}

impl FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "qsfm" => Ok(Selector::Qsfm),
            "rank_only" | "hrank" => Ok(Selector::RankOnly),
            "random" => Ok(Selector::Random),
            "l1_only" | "l1" => Ok(Selector::L1Only),
            other => Err(format!("unknown selector '{other}'")),
        }
    }
}

/// One step of the selection loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    /// The most similar surviving pair `(m, n)`; the member with the lower
    /// auxiliary value goes (`m` on ties).
    Pair {
        m: usize,
        n: usize,
        similarity: f64,
        aux_m: f64,
        aux_n: f64,
        victim: usize,
    },
    /// Baseline selectors: the lowest remaining auxiliary value goes.
    Lowest { victim: usize, aux: f64 },
}

impl Decision {
    pub fn victim(&self) -> usize {
        match self {
            Decision::Pair { victim, .. } | Decision::Lowest { victim, .. } => *victim,
        }
    }
}

/// Filters to remove from one convolution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeleteSet {
    /// Index of the convolution layer.
    pub layer: usize,
    /// Channel count before deletion.
    pub channels: usize,
    /// Sorted, unique filter indices.
    pub indices: Vec<usize>,
    pub trace: Vec<Decision>,
}

impl DeleteSet {
    pub fn empty(layer: usize, channels: usize) -> Self {
        Self {
            layer,
            channels,
            indices: Vec::new(),
            trace: Vec::new(),
        }
    }

    /// A delete set without a selection trace (e.g. dead-filter removal).
    pub fn from_indices(layer: usize, channels: usize, indices: &[usize]) -> Result<Self> {
        let set: BTreeSet<usize> = indices.iter().copied().collect();
        let d = Self {
            layer,
            channels,
            indices: set.into_iter().collect(),
            trace: Vec::new(),
        };
        d.check()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Victims recorded in the trace, sorted.
    pub fn replay(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.trace.iter().map(Decision::victim).collect();
        v.sort_unstable();
        v
    }

    pub fn check(&self) -> Result<()> {
        if self.indices.iter().any(|&i| i >= self.channels) {
            return Err(Error::Selection(format!(
                "delete index out of range for {} channels",
                self.channels
            )));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Selection("delete indices must be sorted and unique".into()));
        }
        if !self.indices.is_empty() && self.indices.len() >= self.channels {
            return Err(Error::Selection(format!(
                "cannot delete {} of {} filters; at least one must remain",
                self.indices.len(),
                self.channels
            )));
        }
        if !self.trace.is_empty() && self.replay() != self.indices {
            return Err(Error::Selection("trace does not replay to the delete set".into()));
        }
        Ok(())
    }
}

fn check_request(n: usize, aux: &[f64], n_delete: usize) -> Result<()> {
    if aux.len() != n {
        return Err(Error::Selection(format!(
            "auxiliary length {} does not match {n} channels",
            aux.len()
        )));
    }
    if n_delete > 0 && n_delete + 1 > n {
        return Err(Error::Selection(format!(
            "cannot delete {n_delete} of {n} filters; at most {} allowed",
            n.saturating_sub(1)
        )));
    }
    if aux.iter().any(|v| !v.is_finite()) {
        return Err(Error::Selection("auxiliary values must be finite".into()));
    }
    Ok(())
}

/// Greedy QSFM selection.
///
/// Repeatedly takes the pair `(m, n)` with the largest similarity among
/// pairs where neither member has been deleted yet (ties: lexicographically
/// smallest `(m, n)`), then deletes `n` if `aux[m] > aux[n]` and `m`
/// otherwise, until `n_delete` filters are selected.
pub fn select_delete_set(s: &SimilarityMatrix, aux: &[f64], n_delete: usize) -> Result<DeleteSet> {
    let n = s.n;
    check_request(n, aux, n_delete)?;
    let mut pairs: Vec<(usize, usize, f64)> = s.pairs().collect();
    if pairs.iter().any(|p| !p.2.is_finite()) {
        return Err(Error::Selection("similarity scores must be finite".into()));
    }
    // Once a channel is deleted no pair containing it is eligible again, so
    // walking the pairs in descending order and skipping ineligible ones is
    // the same as rescanning for the maximum after every deletion.
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut deleted = vec![false; n];
    let mut trace = Vec::with_capacity(n_delete);
    for (m, j, sim) in pairs {
        if trace.len() == n_delete {
            break;
        }
        if deleted[m] || deleted[j] {
            continue;
        }
        let victim = if aux[m] > aux[j] { j } else { m };
        deleted[victim] = true;
        trace.push(Decision::Pair {
            m,
            n: j,
            similarity: sim,
            aux_m: aux[m],
            aux_n: aux[j],
            victim,
        });
    }
    let d = DeleteSet {
        layer: s.layer,
        channels: n,
        indices: (0..n).filter(|&i| deleted[i]).collect(),
        trace,
    };
    debug_assert_eq!(d.len(), n_delete);
    Ok(d)
}

/// Baseline selectors: delete the `n_delete` channels with the lowest
/// auxiliary values (ties to the lower index). Pass average ranks for the
/// rank-only baseline, L1 norms for L1, seeded random scores for random.
pub fn select_baseline(layer: usize, aux: &[f64], n_delete: usize) -> Result<DeleteSet> {
    let n = aux.len();
    check_request(n, aux, n_delete)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| aux[a].total_cmp(&aux[b]).then(a.cmp(&b)));
    let trace: Vec<Decision> = order[..n_delete]
        .iter()
        .map(|&v| Decision::Lowest {
            victim: v,
            aux: aux[v],
        })
        .collect();
    let mut indices: Vec<usize> = order[..n_delete].to_vec();
    indices.sort_unstable();
    Ok(DeleteSet {
        layer,
        channels: n,
        indices,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auxiliary::random_scores;
    use crate::similarity::SimilarityMeasure;

    fn matrix(n: usize, dense: &[f64]) -> SimilarityMatrix {
        SimilarityMatrix::from_dense(0, n, dense, SimilarityMeasure::ssim())
    }

    #[test]
    fn zero_deletions_is_empty() {
        let s = matrix(2, &[0., 0.5, 0.5, 0.]);
        let d = select_delete_set(&s, &[1.0, 2.0], 0).unwrap();
        assert!(d.is_empty());
        assert!(d.trace.is_empty());
    }

    #[test]
    fn hand_executed_three_channel_case() {
        // channels are 1-based in the worked example: S_12 is the maximum,
        // rank = [5, 2, 4] -> aux[1] > aux[2] so filter 2 (index 1) goes.
        #[rustfmt::skip]
        let s = matrix(3, &[
            0.0, 0.9, 0.2,
            0.9, 0.0, 0.4,
            0.2, 0.4, 0.0,
        ]);
        let d = select_delete_set(&s, &[5.0, 2.0, 4.0], 1).unwrap();
        assert_eq!(d.indices, vec![1]);
        assert_eq!(
            d.trace,
            vec![Decision::Pair {
                m: 0,
                n: 1,
                similarity: 0.9,
                aux_m: 5.0,
                aux_n: 2.0,
                victim: 1
            }]
        );
    }

    #[test]
    fn equal_aux_deletes_first_member() {
        let s = matrix(3, &[0.0, 0.1, 0.7, 0.1, 0.0, 0.3, 0.7, 0.3, 0.0]);
        let d = select_delete_set(&s, &[3.0, 1.0, 3.0], 1).unwrap();
        assert_eq!(d.indices, vec![0]);
    }

    #[test]
    fn similarity_ties_take_lexicographic_pair() {
        let s = matrix(4, &[0.0, 0.5, 0.5, 0.1, 0.5, 0.0, 0.1, 0.1, 0.5, 0.1, 0.0, 0.1, 0.1, 0.1, 0.1, 0.0]);
        // pairs (0,1) and (0,2) tie at 0.5; (0,1) first; aux[0] > aux[1] so 1 goes.
        let d = select_delete_set(&s, &[9.0, 1.0, 0.0, 5.0], 1).unwrap();
        assert_eq!(d.indices, vec![1]);
    }

    #[test]
    fn deleted_members_exclude_pairs() {
        // (0,1)=0.9 -> delete 0 (aux 0 <= 1); (0,2)=0.8 now ineligible;
        // next (1,2)=0.5 -> delete 2 (aux[1]=5 > aux[2]=2).
        let s = matrix(4, &[0.0, 0.9, 0.8, 0.0, 0.9, 0.0, 0.5, 0.1, 0.8, 0.5, 0.0, 0.2, 0.0, 0.1, 0.2, 0.0]);
        let d = select_delete_set(&s, &[0.0, 5.0, 2.0, 1.0], 2).unwrap();
        assert_eq!(d.indices, vec![0, 2]);
        assert_eq!(d.replay(), d.indices);
        d.check().unwrap();
    }

    #[test]
    fn too_many_deletions_rejected() {
        let s = matrix(2, &[0., 0.5, 0.5, 0.]);
        assert!(select_delete_set(&s, &[1.0, 2.0], 2).is_err());
        assert!(select_delete_set(&s, &[1.0], 1).is_err());
        let d = select_delete_set(&s, &[1.0, 2.0], 1).unwrap();
        assert_eq!(d.indices, vec![0]);
    }

    #[test]
    fn rank_only_deletes_argmin() {
        let d = select_baseline(0, &[3.0, 1.0, 2.0], 1).unwrap();
        assert_eq!(d.indices, vec![1]);
    }

    #[test]
    fn random_baseline_is_seeded() {
        let a = select_baseline(2, &random_scores(2, 16, 7).values, 5).unwrap();
        let b = select_baseline(2, &random_scores(2, 16, 7).values, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn l1_baseline_matches_argsort() {
        let l1 = [4.0, 0.5, 9.0, 0.5, 2.0, 7.0];
        let d = select_baseline(0, &l1, 3).unwrap();
        let mut idx: Vec<usize> = (0..l1.len()).collect();
        idx.sort_by(|&a, &b| l1[a].partial_cmp(&l1[b]).unwrap().then(a.cmp(&b)));
        let mut expect = idx[..3].to_vec();
        expect.sort();
        assert_eq!(d.indices, expect);
    }

    #[test]
    fn delete_set_checks() {
        assert!(DeleteSet::from_indices(0, 4, &[0, 1, 2, 3]).is_err());
        assert!(DeleteSet::from_indices(0, 4, &[4]).is_err());
        assert_eq!(DeleteSet::from_indices(0, 4, &[2, 0, 2]).unwrap().indices, vec![0, 2]);
    }
}
