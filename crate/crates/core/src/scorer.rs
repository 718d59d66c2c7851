//! Relevance scoring: a trainable linear fusion adapter maps `(reference image,
//! text)` pairs and corpus images into a shared unit sphere, and the relevance
//! score is their inner product scaled by the learned inverse temperature.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Dataset, EmbeddingMatrix};

pub const MIN_LOG_INV_TAU: f64 = 0.0;
/// ln 100
pub const MAX_LOG_INV_TAU: f64 = 4.605_170_185_988_092;
pub const DEFAULT_CHUNK_ROWS: usize = 8192;
const DEGENERATE_NORM: f64 = 1e-12;

/// Trainable adapter weights. Matrices are row-major with `d_out` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub d_in: usize,
    pub d_out: usize,
    /// `d_out x 2*d_in`, applied to `[x_img ; x_txt]`.
    pub w_fuse: Vec<f64>,
    pub b_fuse: Vec<f64>,
    /// `d_out x d_in`
    pub w_img: Vec<f64>,
    pub b_img: Vec<f64>,
    /// `1/tau = exp(log_inv_tau)`
    pub log_inv_tau: f64,
}

impl AdapterParams {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            w_fuse: vec![0.0; d_out * 2 * d_in],
            b_fuse: vec![0.0; d_out],
            w_img: vec![0.0; d_out * d_in],
            b_img: vec![0.0; d_out],
            log_inv_tau: 0.0,
        }
    }

    /// Scaled-identity initialization: the fusion head maps each input block by
    /// `I/sqrt(2)`, the image head by `I`, plus uniform noise in `[-noise, noise]`.
    pub fn identity_init<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        inv_tau: f64,
        noise: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(d_in, d_out);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for r in 0..d_out.min(d_in) {
            p.w_fuse[r * 2 * d_in + r] = s;
            p.w_fuse[r * 2 * d_in + d_in + r] = s;
            p.w_img[r * d_in + r] = 1.0;
        }
        if noise > 0.0 {
            for w in p.w_fuse.iter_mut().chain(p.w_img.iter_mut()) {
                *w += rng.random_range(-noise..=noise);
            }
        }
        p.log_inv_tau = inv_tau.ln().clamp(MIN_LOG_INV_TAU, MAX_LOG_INV_TAU);
        p
    }

    /// Fusion weights that pass a pre-fused query vector (stored as the text
    /// input) through unchanged, and an identity image head.
    pub fn prefused(dim: usize, inv_tau: f64) -> Self {
        let mut p = Self::zeros(dim, dim);
        for r in 0..dim {
            p.w_fuse[r * 2 * dim + dim + r] = 1.0;
            p.w_img[r * dim + r] = 1.0;
        }
        p.log_inv_tau = inv_tau.ln();
        p
    }

    pub fn inv_tau(&self) -> f64 {
        self.log_inv_tau.exp()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.d_in == other.d_in && self.d_out == other.d_out
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("w_fuse", &self.w_fuse),
            ("b_fuse", &self.b_fuse),
            ("w_img", &self.w_img),
            ("b_img", &self.b_img),
            ("log_inv_tau", std::slice::from_ref(&self.log_inv_tau)),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 5] {
        [
            ("w_fuse", &mut self.w_fuse),
            ("b_fuse", &mut self.b_fuse),
            ("w_img", &mut self.w_img),
            ("b_img", &mut self.b_img),
            ("log_inv_tau", std::slice::from_mut(&mut self.log_inv_tau)),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    /// Flat copy in block order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }

    pub fn from_flat(d_in: usize, d_out: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(d_in, d_out);
        if flat.len() != p.n_params() {
            return Err(Error::DimensionMismatch {
                expected: p.n_params(),
                actual: flat.len(),
            });
        }
        let mut rest = flat;
        for (_, block) in p.blocks_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
        Ok(p)
    }
}

/// `w * x + b` where `x` is the concatenation of `parts`.
pub(crate) fn affine(w: &[f64], b: &[f64], parts: &[&[f32]]) -> Vec<f64> {
    let cols: usize = parts.iter().map(|p| p.len()).sum();
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            let row = &w[r * cols..(r + 1) * cols];
            let mut acc = bias;
            let mut c = 0;
            for part in parts {
                for &x in *part {
                    acc += row[c] * x as f64;
                    c += 1;
                }
            }
            acc
        })
        .collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Normalizes in place, returning the pre-normalization norm; `None` if degenerate.
pub(crate) fn normalize(v: &mut [f64]) -> Option<f64> {
    let n = norm(v);
    if n.is_nan() || n < DEGENERATE_NORM {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(n)
}

fn check_dim(expected: usize, v: &[f32]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: v.len(),
        });
    }
    Ok(())
}

/// Unit-norm fused query `normalize(w_fuse [x_img; x_txt] + b_fuse)`.
pub fn fuse_query(params: &AdapterParams, x_img: &[f32], x_txt: &[f32]) -> Result<Vec<f64>> {
    check_dim(params.d_in, x_img)?;
    check_dim(params.d_in, x_txt)?;
    let mut u = affine(&params.w_fuse, &params.b_fuse, &[x_img, x_txt]);
    normalize(&mut u).ok_or(Error::DegenerateQuery {
        query_id: String::new(),
    })?;
    Ok(u)
}

/// Unit-norm image embedding `normalize(w_img v + b_img)`.
pub fn embed_image(params: &AdapterParams, v: &[f32]) -> Result<Vec<f64>> {
    check_dim(params.d_in, v)?;
    let mut a = affine(&params.w_img, &params.b_img, &[v]);
    normalize(&mut a).ok_or(Error::DegenerateImage)?;
    Ok(a)
}

/// `(q . v) / tau` for unit vectors `q` and `v`.
pub fn relevance_score(params: &AdapterParams, q: &[f64], v: &[f64]) -> f64 {
    dot(q, v) * params.inv_tau()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image_id: String,
    pub score: f64,
}

/// Descending-score ranking for one query; ties broken by ascending image id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
    /// 1-based; `None` when the target was not scored.
    pub target_rank: Option<usize>,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.image_id.as_str())
    }

    /// Position (1-based) of `id`, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.image_id == id).map(|p| p + 1)
    }
}

/// Wire form of a ranked list: `{query_id, ids:[...], scores:[...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub query_id: String,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl RankingRecord {
    pub fn from_ranked(list: &RankedList, k: usize) -> Self {
        let n = k.min(list.entries.len());
        Self {
            query_id: list.query_id.clone(),
            ids: list.entries[..n].iter().map(|e| e.image_id.clone()).collect(),
            scores: list.entries[..n].iter().map(|e| e.score).collect(),
        }
    }

    pub fn into_ranked(self) -> Result<RankedList> {
        if self.ids.len() != self.scores.len() {
            return Err(Error::Validation(format!(
                "ranking for `{}` has {} ids but {} scores",
                self.query_id,
                self.ids.len(),
                self.scores.len()
            )));
        }
        Ok(RankedList {
            query_id: self.query_id,
            entries: self
                .ids
                .into_iter()
                .zip(self.scores)
                .map(|(image_id, score)| RankedEntry { image_id, score })
                .collect(),
            target_rank: None,
        })
    }
}

/// First `min(k, len)` ids of the ranking.
pub fn top_k(ranked: &RankedList, k: usize) -> Vec<String> {
    ranked.entries.iter().take(k).map(|e| e.image_id.clone()).collect()
}

/// Score descending, then id ascending. Total over distinct ids.
pub(crate) fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Corpus projected through the image head under a fixed parameter snapshot.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    params: &'a AdapterParams,
    corpus: &'a EmbeddingMatrix,
    projected: Vec<f64>,
    chunk_rows: usize,
}

impl<'a> Scorer<'a> {
    pub fn new(params: &'a AdapterParams, corpus: &'a EmbeddingMatrix) -> Result<Self> {
        if corpus.dim() != params.d_in {
            return Err(Error::DimensionMismatch {
                expected: params.d_in,
                actual: corpus.dim(),
            });
        }
        let rows: Vec<Vec<f64>> = (0..corpus.count())
            .into_par_iter()
            .map(|i| {
                embed_image(params, corpus.row(i))
                    .map_err(|e| e.context(format!("corpus image `{}`", corpus.id(i))))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            corpus,
            projected: rows.concat(),
            chunk_rows: DEFAULT_CHUNK_ROWS,
        })
    }

    pub fn with_chunk_rows(mut self, rows: usize) -> Self {
        self.chunk_rows = rows.max(1);
        self
    }

    pub fn params(&self) -> &AdapterParams {
        self.params
    }

    pub fn corpus(&self) -> &EmbeddingMatrix {
        self.corpus
    }

    pub fn image_vector(&self, row: usize) -> &[f64] {
        let d = self.params.d_out;
        &self.projected[row * d..(row + 1) * d]
    }

    /// Fused unit query vector for manifest query `qi`.
    pub fn query_vector(&self, dataset: &Dataset, qi: usize) -> Result<Vec<f64>> {
        let (x_img, x_txt) = dataset.query_inputs(qi);
        fuse_query(self.params, x_img, x_txt).map_err(|e| match e {
            Error::DegenerateQuery { .. } => Error::DegenerateQuery {
                query_id: dataset.queries()[qi].query_id.clone(),
            },
            other => other,
        })
    }

    /// Scores against every corpus row, in corpus order.
    pub fn score_all(&self, q: &[f64]) -> Vec<f64> {
        let d = self.params.d_out;
        let inv_tau = self.params.inv_tau();
        let mut out = Vec::with_capacity(self.corpus.count());
        for chunk in self.projected.chunks(self.chunk_rows * d) {
            out.extend(chunk.chunks_exact(d).map(|v| dot(q, v) * inv_tau));
        }
        out
    }

    pub fn score_rows(&self, q: &[f64], rows: &[usize]) -> Vec<f64> {
        let inv_tau = self.params.inv_tau();
        rows.iter().map(|&r| dot(q, self.image_vector(r)) * inv_tau).collect()
    }

    /// Sorts `rows` by (score desc, id asc); returns `(row, score)` pairs.
    pub fn sorted(&self, rows: Vec<usize>, scores: Vec<f64>) -> Vec<(usize, f64)> {
        let mut pairs: Vec<(usize, f64)> = rows.into_iter().zip(scores).collect();
        pairs.sort_unstable_by(|a, b| {
            rank_order((a.1, self.corpus.id(a.0)), (b.1, self.corpus.id(b.0)))
        });
        pairs
    }

    /// Ranks the full corpus (or only `restrict_to` rows) for query `qi`.
    pub fn rank_query(
        &self,
        dataset: &Dataset,
        qi: usize,
        restrict_to: Option<&[usize]>,
    ) -> Result<RankedList> {
        let q = self.query_vector(dataset, qi)?;
        let (rows, scores) = match restrict_to {
            Some(rows) => {
                let unique: Vec<usize> = {
                    let mut seen = HashSet::new();
                    rows.iter().copied().filter(|r| seen.insert(*r)).collect()
                };
                let scores = self.score_rows(&q, &unique);
                (unique, scores)
            }
            None => ((0..self.corpus.count()).collect(), self.score_all(&q)),
        };
        let target = dataset.resolved()[qi].target_row;
        let sorted = self.sorted(rows, scores);
        let target_rank = sorted.iter().position(|(r, _)| *r == target).map(|p| p + 1);
        Ok(RankedList {
            query_id: dataset.queries()[qi].query_id.clone(),
            entries: sorted
                .into_iter()
                .map(|(r, score)| RankedEntry {
                    image_id: self.corpus.id(r).to_owned(),
                    score,
                })
                .collect(),
            target_rank,
        })
    }

    /// Ranks every query; with `use_subsets`, each query is restricted to its
    /// candidate subset (queries without one are an error).
    pub fn rank_all(&self, dataset: &Dataset, use_subsets: bool) -> Result<Vec<RankedList>> {
        (0..dataset.n_queries())
            .into_par_iter()
            .map(|qi| {
                let restrict = if use_subsets {
                    Some(dataset.resolved()[qi].subset_rows.as_deref().ok_or_else(|| {
                        Error::MissingSubset(dataset.queries()[qi].query_id.clone())
                    })?)
                } else {
                    None
                };
                self.rank_query(dataset, qi, restrict)
            })
            .collect()
    }
}

/// One-off ranking of query `qi`, optionally restricted to a set of image ids.
pub fn rank_corpus(
    params: &AdapterParams,
    dataset: &Dataset,
    qi: usize,
    restrict_to: Option<&[String]>,
) -> Result<RankedList> {
    let scorer = Scorer::new(params, &dataset.corpus)?;
    let rows = restrict_to
        .map(|ids| ids.iter().map(|id| dataset.corpus.lookup(id)).collect::<Result<Vec<_>>>())
        .transpose()?;
    scorer.rank_query(dataset, qi, rows.as_deref())
}
