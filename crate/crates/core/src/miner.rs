//! Hard-negative mining.
//!
//! For each query the corpus is sorted by relevance. Among the ranks scoring
//! strictly below the target, the two largest adjacent score drops `k1`, `k2`
//! are located, and the hard-negative set is every image ranked in
//! `[min(k1,k2)+1, max(k1,k2)]`. The ablation strategies (whole corpus, top-k,
//! top-k after the target) and the warm-up set share the same output type.
//!
//! Ranks are 1-based throughout this module.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::scorer::{AdapterParams, Scorer};
use crate::store::Dataset;

pub const DEFAULT_TOP_K: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    TwoDrops,
    #[serde(rename = "all")]
    AllCorpus,
    TopK,
    AfterTargetTopK,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::TwoDrops,
        Strategy::AllCorpus,
        Strategy::TopK,
        Strategy::AfterTargetTopK,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::TwoDrops => "two-drops",
            Strategy::AllCorpus => "all",
            Strategy::TopK => "top-k",
            Strategy::AfterTargetTopK => "after-target-top-k",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// How a set came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetOrigin {
    /// Epoch-0 set: corpus minus target.
    WarmUp,
    /// Produced by the strategy's own rule.
    Defined,
    /// Strategy failed; whole below-target region used.
    BelowTargetFallback,
    /// Strategy failed and nothing scores below the target; corpus minus target used.
    CorpusFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MiningError {
    #[error("fewer than two score drops below the target")]
    InsufficientDrops,
    #[error("strategy cannot define a set for this query; fallback required")]
    FallbackRequired,
}

/// Scores of one query sorted descending, with the corpus row at each rank.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedScoreView {
    pub query_id: String,
    pub scores: Vec<f64>,
    pub image_index: Vec<usize>,
    /// 1-based rank of the target.
    pub target_pos: usize,
}

impl SortedScoreView {
    /// Builds a view from `(corpus row, score)` pairs already in rank order.
    pub fn from_sorted(
        query_id: impl Into<String>,
        sorted: Vec<(usize, f64)>,
        target_row: usize,
    ) -> Result<Self> {
        let (image_index, scores): (Vec<usize>, Vec<f64>) = sorted.into_iter().unzip();
        if scores.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Validation("scores are not non-increasing".into()));
        }
        let target_pos = image_index
            .iter()
            .position(|&r| r == target_row)
            .ok_or_else(|| Error::Validation("target missing from score view".into()))?
            + 1;
        Ok(Self {
            query_id: query_id.into(),
            scores,
            image_index,
            target_pos,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Score at 1-based rank `j`.
    pub fn score(&self, j: usize) -> f64 {
        self.scores[j - 1]
    }

    pub fn row(&self, j: usize) -> usize {
        self.image_index[j - 1]
    }

    pub fn target_score(&self) -> f64 {
        self.score(self.target_pos)
    }

    pub fn target_row(&self) -> usize {
        self.row(self.target_pos)
    }
}

/// Per-query negative pool. `negatives` are corpus rows, in rank order when
/// produced from a score view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardNegativeSet {
    pub query_id: String,
    pub negatives: Vec<usize>,
    pub strategy: Strategy,
    pub origin: SetOrigin,
    pub epoch_defined: usize,
    /// Rank interval the members occupy, when contiguous in the defining view.
    pub rank_span: Option<Range<usize>>,
}

impl HardNegativeSet {
    pub fn len(&self) -> usize {
        self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.negatives.is_empty()
    }

    pub fn ids<'a>(&'a self, dataset: &'a Dataset) -> impl Iterator<Item = &'a str> + 'a {
        self.negatives.iter().map(|&r| dataset.corpus.id(r))
    }
}

/// Ranks `j` with `s_j < target_score`, as a half-open 1-based range (a suffix).
pub fn below_target_slice(view: &SortedScoreView, target_score: f64) -> Range<usize> {
    let first = view.scores.partition_point(|&s| s >= target_score) + 1;
    first..view.len() + 1
}

/// The two ranks `j` in `below` with the largest drops `s_j - s_{j+1}`; drops
/// are only defined where rank `j+1` exists. Equal drops prefer the smaller
/// rank. Returns `(largest, second largest)`.
pub fn top2_drops(view: &SortedScoreView, below: Range<usize>) -> std::result::Result<(usize, usize), MiningError> {
    let last_with_successor = view.len().saturating_sub(1);
    let mut best: Option<(usize, f64)> = None;
    let mut second: Option<(usize, f64)> = None;
    for j in below.start..below.end.min(last_with_successor + 1) {
        let d = view.score(j) - view.score(j + 1);
        // strict comparisons keep the earlier (smaller) rank on ties
        match best {
            Some((_, bd)) if d <= bd => match second {
                Some((_, sd)) if d <= sd => {}
                _ => second = Some((j, d)),
            },
            _ => {
                second = best;
                best = Some((j, d));
            }
        }
    }
    match (best, second) {
        (Some((k1, _)), Some((k2, _))) => Ok((k1, k2)),
        _ => Err(MiningError::InsufficientDrops),
    }
}

fn set_from_ranks(
    view: &SortedScoreView,
    ranks: Range<usize>,
    strategy: Strategy,
    origin: SetOrigin,
    epoch: usize,
) -> HardNegativeSet {
    HardNegativeSet {
        query_id: view.query_id.clone(),
        negatives: ranks.clone().map(|j| view.row(j)).collect(),
        strategy,
        origin,
        epoch_defined: epoch,
        rank_span: Some(ranks),
    }
}

/// Images ranked between the two steepest drops below the target.
pub fn two_drops_set(
    view: &SortedScoreView,
    target_score: f64,
    epoch: usize,
) -> std::result::Result<HardNegativeSet, MiningError> {
    let below = below_target_slice(view, target_score);
    let (k1, k2) = top2_drops(view, below.clone()).map_err(|_| MiningError::FallbackRequired)?;
    let (lo, hi) = (k1.min(k2), k1.max(k2));
    // lo >= below.start, so every rank in the interval is already below the target
    let ranks = lo + 1..hi + 1;
    Ok(set_from_ranks(view, ranks, Strategy::TwoDrops, SetOrigin::Defined, epoch))
}

/// Corpus minus the target, in rank order when a view is available.
pub fn all_but_target(view: &SortedScoreView, strategy: Strategy, origin: SetOrigin, epoch: usize) -> HardNegativeSet {
    let target = view.target_row();
    HardNegativeSet {
        query_id: view.query_id.clone(),
        negatives: view.image_index.iter().copied().filter(|&r| r != target).collect(),
        strategy,
        origin,
        epoch_defined: epoch,
        rank_span: None,
    }
}

/// Warm-up set for a query without scoring: every corpus row except the target.
pub fn warm_up_set(query_id: &str, n_img: usize, target_row: usize, strategy: Strategy) -> HardNegativeSet {
    HardNegativeSet {
        query_id: query_id.to_owned(),
        negatives: (0..n_img).filter(|&r| r != target_row).collect(),
        strategy,
        origin: SetOrigin::WarmUp,
        epoch_defined: 0,
        rank_span: None,
    }
}

pub fn strategy_set(
    view: &SortedScoreView,
    target_score: f64,
    strategy: Strategy,
    k: usize,
    epoch: usize,
) -> std::result::Result<HardNegativeSet, MiningError> {
    match strategy {
        Strategy::TwoDrops => two_drops_set(view, target_score, epoch),
        Strategy::AllCorpus => Ok(all_but_target(view, strategy, SetOrigin::Defined, epoch)),
        Strategy::TopK => {
            let target = view.target_row();
            let negatives: Vec<usize> = view
                .image_index
                .iter()
                .copied()
                .filter(|&r| r != target)
                .take(k.max(1))
                .collect();
            Ok(HardNegativeSet {
                query_id: view.query_id.clone(),
                negatives,
                strategy,
                origin: SetOrigin::Defined,
                epoch_defined: epoch,
                rank_span: None,
            })
        }
        Strategy::AfterTargetTopK => {
            let below = below_target_slice(view, target_score);
            if below.is_empty() {
                return Err(MiningError::FallbackRequired);
            }
            let end = below.end.min(below.start + k.max(1));
            Ok(set_from_ranks(view, below.start..end, strategy, SetOrigin::Defined, epoch))
        }
    }
}

/// Fallback for a query whose strategy could not define a set: the whole
/// below-target region if nonempty, else corpus minus target.
pub fn fallback_set(view: &SortedScoreView, target_score: f64, strategy: Strategy, epoch: usize) -> HardNegativeSet {
    let below = below_target_slice(view, target_score);
    if below.is_empty() {
        all_but_target(view, strategy, SetOrigin::CorpusFallback, epoch)
    } else {
        set_from_ranks(view, below, strategy, SetOrigin::BelowTargetFallback, epoch)
    }
}

/// Full descending view of query `qi` under the scorer's parameters.
pub fn score_view(scorer: &Scorer<'_>, dataset: &Dataset, qi: usize) -> Result<SortedScoreView> {
    let q = scorer.query_vector(dataset, qi)?;
    let scores = scorer.score_all(&q);
    let sorted = scorer.sorted((0..scores.len()).collect(), scores);
    SortedScoreView::from_sorted(
        dataset.queries()[qi].query_id.clone(),
        sorted,
        dataset.resolved()[qi].target_row,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerStats {
    pub epoch: usize,
    pub strategy: Strategy,
    pub n_queries: usize,
    pub mean_size: f64,
    pub median_size: f64,
    pub min_size: usize,
    pub max_size: usize,
    pub fallback_count: usize,
    pub below_target_fallbacks: usize,
    pub corpus_fallbacks: usize,
}

impl MinerStats {
    pub fn from_sets(sets: &[HardNegativeSet], epoch: usize, strategy: Strategy) -> Self {
        let mut sizes: Vec<usize> = sets.iter().map(HardNegativeSet::len).collect();
        sizes.sort_unstable();
        let n = sizes.len();
        let median_size = match n {
            0 => 0.0,
            _ if n % 2 == 1 => sizes[n / 2] as f64,
            _ => (sizes[n / 2 - 1] + sizes[n / 2]) as f64 / 2.0,
        };
        let count = |o: SetOrigin| sets.iter().filter(|s| s.origin == o).count();
        let below = count(SetOrigin::BelowTargetFallback);
        let corpus = count(SetOrigin::CorpusFallback);
        Self {
            epoch,
            strategy,
            n_queries: n,
            mean_size: if n == 0 { 0.0 } else { sizes.iter().sum::<usize>() as f64 / n as f64 },
            median_size,
            min_size: sizes.first().copied().unwrap_or(0),
            max_size: sizes.last().copied().unwrap_or(0),
            fallback_count: below + corpus,
            below_target_fallbacks: below,
            corpus_fallbacks: corpus,
        }
    }
}

/// Defines the negative pool of every query from a frozen parameter snapshot.
///
/// Epoch 0 is the warm-up: every pool is the corpus minus the target,
/// regardless of strategy. Results are in manifest order and independent of
/// the worker count.
pub fn mine_all(
    params_snapshot: &AdapterParams,
    dataset: &Dataset,
    strategy: Strategy,
    k: usize,
    epoch: usize,
) -> Result<(Vec<HardNegativeSet>, MinerStats)> {
    let n_img = dataset.corpus.count();
    let sets: Vec<HardNegativeSet> = if epoch == 0 || strategy == Strategy::AllCorpus {
        let origin = if epoch == 0 { SetOrigin::WarmUp } else { SetOrigin::Defined };
        dataset
            .queries()
            .iter()
            .zip(dataset.resolved())
            .map(|(q, r)| {
                let mut s = warm_up_set(&q.query_id, n_img, r.target_row, strategy);
                s.origin = origin;
                s.epoch_defined = epoch;
                s
            })
            .collect()
    } else {
        let scorer = Scorer::new(params_snapshot, &dataset.corpus)?;
        (0..dataset.n_queries())
            .into_par_iter()
            .map(|qi| {
                let view = score_view(&scorer, dataset, qi)?;
                let target_score = view.target_score();
                Ok(strategy_set(&view, target_score, strategy, k, epoch)
                    .unwrap_or_else(|_| fallback_set(&view, target_score, strategy, epoch)))
            })
            .collect::<Result<_>>()?
    };
    let stats = MinerStats::from_sets(&sets, epoch, strategy);
    Ok((sets, stats))
}

/// One uniformly drawn member of `set` (a corpus row).
pub fn sample_negative<R: Rng + ?Sized>(set: &HardNegativeSet, rng: &mut R) -> usize {
    assert!(!set.is_empty(), "cannot sample from an empty negative set");
    set.negatives[rng.random_range(0..set.negatives.len())]
}

/// JSON-lines record of a mined set: `{query_id, negative_ids, strategy, epoch}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedSetRecord {
    pub query_id: String,
    pub negative_ids: Vec<String>,
    pub strategy: Strategy,
    pub epoch: usize,
}

impl MinedSetRecord {
    pub fn new(set: &HardNegativeSet, dataset: &Dataset) -> Self {
        Self {
            query_id: set.query_id.clone(),
            negative_ids: set.ids(dataset).map(str::to_owned).collect(),
            strategy: set.strategy,
            epoch: set.epoch_defined,
        }
    }
}
