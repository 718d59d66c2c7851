//! Independent reference implementations shared by the integration tests.
//! Everything here is written from the definitions, not from the library.
#![allow(dead_code)]

use std::collections::BTreeSet;

use qure::evaluator::Choice;
use qure::miner::SortedScoreView;
use qure::store::{DatasetManifest, EmbeddingMatrix, QueryRecord};
use qure::{AdapterParams, Dataset};
use rand::Rng;

/// Score view over rows `0..n` in the given (non-increasing) order.
pub fn view(scores: &[f64], target_pos: usize) -> SortedScoreView {
    SortedScoreView::from_sorted("q", scores.iter().copied().enumerate().collect(), target_pos - 1).unwrap()
}

/// Literal two-drops rule over a descending score list (1-based ranks).
/// `None` when fewer than two drops exist below the target.
pub fn brute_two_drops(scores: &[f64], target_pos: usize) -> Option<BTreeSet<usize>> {
    let n = scores.len();
    let s = |j: usize| scores[j - 1];
    let st = s(target_pos);
    let below: Vec<usize> = (1..=n).filter(|&j| s(j) < st).collect();
    let mut drops: Vec<(usize, f64)> = below.iter().filter(|&&j| j < n).map(|&j| (j, s(j) - s(j + 1))).collect();
    if drops.len() < 2 {
        return None;
    }
    // largest drop first; equal drops: smaller rank first
    drops.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let (k1, k2) = (drops[0].0, drops[1].0);
    Some((k1.min(k2) + 1..=k1.max(k2)).collect())
}

/// Descending scores on a dyadic grid (exact under power-of-two scaling),
/// with frequent ties and repeated gaps.
pub fn grid_scores(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let levels = rng.random_range(2..=40);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-levels..=levels) as f64 / 64.0).collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v
}

pub fn brute_recall(rankings: &[Vec<String>], truth: &[BTreeSet<String>], k: usize) -> f64 {
    let hits = rankings
        .iter()
        .zip(truth)
        .filter(|(r, t)| r.iter().take(k).any(|id| t.contains(id)))
        .count();
    hits as f64 * 100.0 / rankings.len() as f64
}

pub fn brute_ap(ranking: &[String], rel: &BTreeSet<String>, k: usize) -> f64 {
    let mut total = 0.0;
    for i in 1..=k.min(ranking.len()) {
        if rel.contains(&ranking[i - 1]) {
            let hits_upto_i = ranking[..i].iter().filter(|id| rel.contains(*id)).count();
            total += hits_upto_i as f64 / i as f64;
        }
    }
    total / k.min(rel.len()) as f64
}

pub fn brute_map(rankings: &[Vec<String>], truth: &[BTreeSet<String>], k: usize) -> f64 {
    let sum: f64 = rankings.iter().zip(truth).map(|(r, t)| brute_ap(r, t, k)).sum();
    sum * 100.0 / rankings.len() as f64
}

/// `(rate, considered, excluded)` or `None` when nothing is considered.
pub fn brute_preference(items: &[(f64, f64, Choice)]) -> Option<(f64, usize, usize)> {
    let considered: Vec<&(f64, f64, Choice)> = items.iter().filter(|t| t.0 > t.1).collect();
    if considered.is_empty() {
        return None;
    }
    let agree = considered.iter().filter(|t| matches!(t.2, Choice::Set1)).count();
    Some((agree as f64 * 100.0 / considered.len() as f64, considered.len(), items.len() - considered.len()))
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn matvec(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, br)| br + (0..cols).map(|c| w[r * cols + c] * x[c]).sum::<f64>())
        .collect()
}

/// Score computed directly from the formula, without the library's helpers.
pub fn brute_score(p: &AdapterParams, x_img: &[f32], x_txt: &[f32], image: &[f32]) -> f64 {
    let joint: Vec<f64> = x_img.iter().chain(x_txt).map(|&x| x as f64).collect();
    let q = unit(matvec(&p.w_fuse, &p.b_fuse, &joint));
    let img: Vec<f64> = image.iter().map(|&x| x as f64).collect();
    let v = unit(matvec(&p.w_img, &p.b_img, &img));
    q.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() * p.log_inv_tau.exp()
}

pub fn brute_loss(p: &AdapterParams, x_img: &[f32], x_txt: &[f32], pos: &[f32], neg: &[f32]) -> f64 {
    let gap = brute_score(p, x_img, x_txt, pos) - brute_score(p, x_img, x_txt, neg);
    // -ln sigmoid(gap)
    if gap > 0.0 {
        (-gap).exp().ln_1p()
    } else {
        -gap + gap.exp().ln_1p()
    }
}

pub fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub fn random_params(rng: &mut impl Rng, d_in: usize, d_out: usize, max_inv_tau: f64) -> AdapterParams {
    let mut p = AdapterParams::zeros(d_in, d_out);
    for (name, block) in p.blocks_mut() {
        if name != "log_inv_tau" {
            block.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        }
    }
    p.log_inv_tau = rng.random_range(0.0..max_inv_tau.ln());
    p
}

/// Random dataset with `n_img` corpus images `i000..` and `n_q` queries.
pub fn random_dataset(rng: &mut impl Rng, dim: usize, n_img: usize, n_q: usize) -> Dataset {
    let corpus = EmbeddingMatrix::from_rows(dim, (0..n_img).map(|i| (format!("i{i:03}"), random_vec(rng, dim)))).unwrap();
    let qi = EmbeddingMatrix::from_rows(dim, (0..n_q).map(|i| (format!("r{i:03}"), random_vec(rng, dim)))).unwrap();
    let qt = EmbeddingMatrix::from_rows(dim, (0..n_q).map(|i| (format!("t{i:03}"), random_vec(rng, dim)))).unwrap();
    let queries = (0..n_q)
        .map(|i| QueryRecord {
            query_id: format!("q{i:03}"),
            ref_image_id: format!("r{i:03}"),
            text_embed_id: format!("t{i:03}"),
            target_id: format!("i{:03}", rng.random_range(0..n_img)),
            subset_ids: None,
        })
        .collect();
    let manifest = DatasetManifest::new(queries, &corpus, "test");
    Dataset::new(manifest, corpus, qi, qt).unwrap()
}
