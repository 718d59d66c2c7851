//! Retrieval metrics over ranked lists, set relevance, and agreement of the
//! model's set preference with human choices.
//!
//! All metric values are percentages in `[0, 100]`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::{embed_image, fuse_query, rank_order, relevance_score, AdapterParams, RankedEntry, RankedList, Scorer};
use crate::store::{read_jsonl, write_jsonl, Dataset, QueryRecord};

/// Images per compared set in a preference record.
pub const SET_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub query_id: String,
    pub relevant_ids: Vec<String>,
}

/// Relevant-id sets keyed by query id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TruthTable {
    sets: HashMap<String, HashSet<String>>,
}

impl TruthTable {
    pub fn new(records: impl IntoIterator<Item = GroundTruth>) -> Result<Self> {
        let mut sets = HashMap::new();
        for r in records {
            if r.relevant_ids.is_empty() {
                return Err(Error::Validation(format!("query `{}` has no relevant ids", r.query_id)));
            }
            let set: HashSet<String> = r.relevant_ids.into_iter().collect();
            if sets.insert(r.query_id.clone(), set).is_some() {
                return Err(Error::Validation(format!("duplicate truth for query `{}`", r.query_id)));
            }
        }
        Ok(Self { sets })
    }

    /// Single-target truth taken from the manifest.
    pub fn from_targets(queries: &[QueryRecord]) -> Result<Self> {
        Self::new(queries.iter().map(|q| GroundTruth {
            query_id: q.query_id.clone(),
            relevant_ids: vec![q.target_id.clone()],
        }))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_jsonl::<GroundTruth>(path)?)
    }

    pub fn get(&self, query_id: &str) -> Result<&HashSet<String>> {
        self.sets
            .get(query_id)
            .ok_or_else(|| Error::MissingTruth(query_id.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Records sorted by query id, relevant ids sorted.
    pub fn records(&self) -> Vec<GroundTruth> {
        let mut out: Vec<GroundTruth> = self
            .sets
            .iter()
            .map(|(q, s)| {
                let mut ids: Vec<String> = s.iter().cloned().collect();
                ids.sort();
                GroundTruth { query_id: q.clone(), relevant_ids: ids }
            })
            .collect();
        out.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(&self.records(), path)
    }
}

fn check_inputs(rankings: &[RankedList], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if rankings.is_empty() {
        return Err(Error::Validation("no rankings to evaluate".into()));
    }
    Ok(())
}

fn percent(sum: f64, n: usize) -> f64 {
    100.0 * sum / n as f64
}

/// Share of queries with at least one relevant image in the top `k`.
pub fn recall_at_k(rankings: &[RankedList], truth: &TruthTable, k: usize) -> Result<f64> {
    check_inputs(rankings, k)?;
    let mut hits = 0usize;
    for r in rankings {
        let rel = truth.get(&r.query_id)?;
        if r.ids().take(k).any(|id| rel.contains(id)) {
            hits += 1;
        }
    }
    Ok(percent(hits as f64, rankings.len()))
}

/// Keeps only the entries whose id is in `subset`, preserving order.
pub fn restrict_to_subset(list: &RankedList, subset: &[String]) -> RankedList {
    let keep: HashSet<&str> = subset.iter().map(String::as_str).collect();
    RankedList {
        query_id: list.query_id.clone(),
        entries: list
            .entries
            .iter()
            .filter(|e| keep.contains(e.image_id.as_str()))
            .cloned()
            .collect::<Vec<RankedEntry>>(),
        target_rank: None,
    }
}

/// Recall with ranks taken inside each query's candidate subset.
pub fn recall_subset_at_k(
    rankings: &[RankedList],
    truth: &TruthTable,
    subsets: &HashMap<String, Vec<String>>,
    k: usize,
) -> Result<f64> {
    check_inputs(rankings, k)?;
    let restricted = rankings
        .iter()
        .map(|r| {
            subsets
                .get(&r.query_id)
                .map(|s| restrict_to_subset(r, s))
                .ok_or_else(|| Error::MissingSubset(r.query_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    recall_at_k(&restricted, truth, k)
}

/// Average precision at `k`, normalized by `min(k, |relevant|)`.
pub fn average_precision(ids: &[&str], relevant: &HashSet<String>, k: usize) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, id) in ids.iter().take(k).enumerate() {
        if relevant.contains(*id) {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    sum / k.min(relevant.len()) as f64
}

pub fn map_at_k(rankings: &[RankedList], truth: &TruthTable, k: usize) -> Result<f64> {
    check_inputs(rankings, k)?;
    let mut total = 0.0;
    for r in rankings {
        let rel = truth.get(&r.query_id)?;
        let ids: Vec<&str> = r.ids().take(k).collect();
        total += average_precision(&ids, rel, k);
    }
    Ok(percent(total, rankings.len()))
}

/// Mean relevance score of a retrieved set of exactly five images.
pub fn set_relevance(params: &AdapterParams, dataset: &Dataset, query: &QueryRecord, set_ids: &[String]) -> Result<f64> {
    let x_img = dataset.query_img.row_by_id(&query.ref_image_id)?;
    let x_txt = dataset.query_txt.row_by_id(&query.text_embed_id)?;
    let q = fuse_query(params, x_img, x_txt).map_err(|e| match e {
        Error::DegenerateQuery { .. } => Error::DegenerateQuery { query_id: query.query_id.clone() },
        other => other,
    })?;
    set_relevance_for(params, &q, dataset, set_ids)
}

fn set_relevance_for(params: &AdapterParams, q: &[f64], dataset: &Dataset, set_ids: &[String]) -> Result<f64> {
    if set_ids.len() != SET_SIZE {
        return Err(Error::Validation(format!(
            "a compared set must hold {SET_SIZE} images, got {}",
            set_ids.len()
        )));
    }
    let mut sum = 0.0;
    for id in set_ids {
        let v = embed_image(params, dataset.corpus.row_by_id(id)?)?;
        sum += relevance_score(params, q, &v);
    }
    Ok(sum / SET_SIZE as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Set1,
    Set2,
}

/// One human judgement between two retrieved sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub query_id: String,
    pub set1_ids: Vec<String>,
    pub set2_ids: Vec<String>,
    pub choice: Choice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PreferenceOutcome {
    /// Percent of considered records where humans chose set 1.
    pub rate: f64,
    /// Records with set 1 scored strictly above set 2.
    pub considered: usize,
    pub agreed: usize,
    /// Records with set 1 scored at or below set 2.
    pub excluded: usize,
}

/// Agreement rate from precomputed `(s_rel(set1), s_rel(set2), choice)` triples.
pub fn preference_rate_from_scores(items: &[(f64, f64, Choice)]) -> Result<PreferenceOutcome> {
    let considered: Vec<_> = items.iter().filter(|(s1, s2, _)| s1 > s2).collect();
    let excluded = items.len() - considered.len();
    if considered.is_empty() {
        return Err(Error::UndefinedRate { excluded });
    }
    let agreed = considered.iter().filter(|(_, _, c)| *c == Choice::Set1).count();
    Ok(PreferenceOutcome {
        rate: percent(agreed as f64, considered.len()),
        considered: considered.len(),
        agreed,
        excluded,
    })
}

/// Probability (percent) that humans prefer set 1 given the model scores it
/// strictly higher. Ties and reversals are excluded and counted.
pub fn preference_rate(params: &AdapterParams, records: &[PreferenceRecord], dataset: &Dataset) -> Result<PreferenceOutcome> {
    let items = records
        .par_iter()
        .map(|r| {
            let qi = dataset
                .query_index(&r.query_id)
                .ok_or_else(|| Error::UnknownId(r.query_id.clone()))?;
            let query = &dataset.queries()[qi];
            let s1 = set_relevance(params, dataset, query, &r.set1_ids)?;
            let s2 = set_relevance(params, dataset, query, &r.set2_ids)?;
            Ok((s1, s2, r.choice))
        })
        .collect::<Result<Vec<_>>>()?;
    preference_rate_from_scores(&items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Recall(usize),
    RecallSubset(usize),
    Map(usize),
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Recall(k) => write!(f, "recall@{k}"),
            Metric::RecallSubset(k) => write!(f, "recall_subset@{k}"),
            Metric::Map(k) => write!(f, "map@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown metric `{s}` (expected recall@k, recall_subset@k, or map@k)"));
        let (name, k) = s.trim().split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match name.to_ascii_lowercase().as_str() {
            "recall" => Ok(Metric::Recall(k)),
            "recall_subset" | "recall-subset" | "recalls" => Ok(Metric::RecallSubset(k)),
            "map" => Ok(Metric::Map(k)),
            _ => Err(bad()),
        }
    }
}

/// Parses a comma-separated metric list such as `recall@10,map@5`.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub query_count: usize,
    pub split: String,
    pub config: BTreeMap<String, String>,
}

/// Computes every metric in `metrics`. Subset metrics need `subsets`.
pub fn evaluate(
    rankings: &[RankedList],
    truth: &TruthTable,
    metrics: &[Metric],
    subsets: Option<&HashMap<String, Vec<String>>>,
    split: &str,
) -> Result<EvalReport> {
    let mut out = BTreeMap::new();
    for &m in metrics {
        let v = match m {
            Metric::Recall(k) => recall_at_k(rankings, truth, k)?,
            Metric::Map(k) => map_at_k(rankings, truth, k)?,
            Metric::RecallSubset(k) => {
                let subsets = subsets.ok_or_else(|| {
                    Error::Config(format!("{m} needs candidate subsets"))
                })?;
                recall_subset_at_k(rankings, truth, subsets, k)?
            }
        };
        out.insert(m.to_string(), v);
    }
    let mut config = BTreeMap::new();
    config.insert(
        "metrics".to_owned(),
        metrics.iter().map(Metric::to_string).collect::<Vec<_>>().join(","),
    );
    Ok(EvalReport {
        metrics: out,
        query_count: rankings.len(),
        split: split.to_owned(),
        config,
    })
}

/// Recall@k against the manifest targets, for each `k` in `ks`.
///
/// Only the target's rank is computed, so this is cheaper than a full ranking
/// and agrees with it exactly.
pub fn target_recall(params: &AdapterParams, dataset: &Dataset, ks: &[usize]) -> Result<BTreeMap<String, f64>> {
    let ranks = target_ranks(params, dataset)?;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            (Metric::Recall(k).to_string(), percent(hits as f64, ranks.len()))
        })
        .collect())
}

/// 1-based full-corpus rank of every query's target.
pub fn target_ranks(params: &AdapterParams, dataset: &Dataset) -> Result<Vec<usize>> {
    let scorer = Scorer::new(params, &dataset.corpus)?;
    let corpus = &dataset.corpus;
    (0..dataset.n_queries())
        .into_par_iter()
        .map(|qi| {
            let q = scorer.query_vector(dataset, qi)?;
            let scores = scorer.score_all(&q);
            let t = dataset.resolved()[qi].target_row;
            let key = (scores[t], corpus.id(t));
            let ahead = (0..corpus.count())
                .filter(|&r| rank_order((scores[r], corpus.id(r)), key).is_lt())
                .count();
            Ok(ahead + 1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(qid: &str, ids: &[&str]) -> RankedList {
        RankedList {
            query_id: qid.into(),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, id)| RankedEntry { image_id: (*id).into(), score: -(i as f64) })
                .collect(),
            target_rank: None,
        }
    }

    fn truth(pairs: &[(&str, &[&str])]) -> TruthTable {
        TruthTable::new(pairs.iter().map(|(q, ids)| GroundTruth {
            query_id: (*q).into(),
            relevant_ids: ids.iter().map(|s| s.to_string()).collect(),
        }))
        .unwrap()
    }

    fn corpus_ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("i{i:02}")).collect()
    }

    #[test]
    fn recall_two_queries() {
        let ids = corpus_ids(60);
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let rankings = vec![list("a", &refs), list("b", &refs)];
        let t = truth(&[("a", &["i02"]), ("b", &["i49"])]);
        assert_eq!(recall_at_k(&rankings, &t, 10).unwrap(), 50.0);
        assert_eq!(recall_at_k(&rankings, &t, 60).unwrap(), 100.0);
        assert_eq!(recall_at_k(&rankings, &t, 1000).unwrap(), 100.0);
    }

    #[test]
    fn missing_truth_names_query() {
        let t = truth(&[("a", &["x"])]);
        match recall_at_k(&[list("zz", &["x"])], &t, 1) {
            Err(Error::MissingTruth(q)) => assert_eq!(q, "zz"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn map_hand_case() {
        let t = truth(&[("q", &["a", "b"])]);
        let r = vec![list("q", &["a", "x", "b", "y", "z", "w"])];
        let v = map_at_k(&r, &t, 5).unwrap();
        assert!((v - 83.333_333_333_333_33).abs() < 1e-9);
        assert_eq!(format!("{v:.2}"), "83.33");
    }

    #[test]
    fn map_perfect_and_empty() {
        let t = truth(&[("q", &["a", "b"])]);
        assert_eq!(map_at_k(&[list("q", &["b", "a", "c"])], &t, 3).unwrap(), 100.0);
        assert_eq!(map_at_k(&[list("q", &["c", "d", "a"])], &t, 2).unwrap(), 0.0);
    }

    #[test]
    fn subset_recall() {
        let t = truth(&[("q", &["a"])]);
        let r = vec![list("q", &["z", "b", "a", "c", "d", "e", "f"])];
        let mut subsets = HashMap::new();
        subsets.insert("q".to_string(), ["a", "b", "c", "d", "e", "f"].map(String::from).to_vec());
        assert_eq!(recall_subset_at_k(&r, &t, &subsets, 1).unwrap(), 0.0);
        assert_eq!(recall_subset_at_k(&r, &t, &subsets, 2).unwrap(), 100.0);
        subsets.insert("q".to_string(), vec!["a".to_string()]);
        assert_eq!(recall_subset_at_k(&r, &t, &subsets, 1).unwrap(), 100.0);
        assert!(matches!(
            recall_subset_at_k(&r, &t, &HashMap::new(), 1),
            Err(Error::MissingSubset(_))
        ));
    }

    #[test]
    fn preference_counts() {
        use Choice::*;
        let items = [(2.0, 1.0, Set1), (3.0, 1.0, Set1), (1.5, 1.0, Set2), (9.0, 0.0, Set1), (1.0, 1.0, Set1)];
        let out = preference_rate_from_scores(&items).unwrap();
        assert_eq!((out.rate, out.considered, out.agreed, out.excluded), (75.0, 4, 3, 1));
        assert!(matches!(
            preference_rate_from_scores(&[(1.0, 1.0, Set1), (0.0, 2.0, Set2)]),
            Err(Error::UndefinedRate { excluded: 2 })
        ));
        assert_eq!(preference_rate_from_scores(&[(2.0, 1.0, Set1)]).unwrap().rate, 100.0);
    }

    #[test]
    fn metric_names() {
        let ms = parse_metrics("recall@10, recall_subset@1,map@5").unwrap();
        assert_eq!(ms, vec![Metric::Recall(10), Metric::RecallSubset(1), Metric::Map(5)]);
        assert_eq!(ms.iter().map(|m| m.to_string()).collect::<Vec<_>>(), ["recall@10", "recall_subset@1", "map@5"]);
        assert!("recall@0".parse::<Metric>().is_err());
        assert!("ndcg@5".parse::<Metric>().is_err());
    }

    #[test]
    fn choice_wire_format() {
        let r: PreferenceRecord = serde_json::from_str(
            r#"{"query_id":"q","set1_ids":["a"],"set2_ids":["b"],"choice":"set2"}"#,
        )
        .unwrap();
        assert_eq!(r.choice, Choice::Set2);
    }
}
