//! Planted-attribute synthetic datasets.
//!
//! The embedding space is split into `n_attributes` orthogonal blocks of
//! `dim / n_attributes` coordinates; attribute `a` taking value `v` is the
//! basis vector at coordinate `a * block + v`. An image is the sum of its
//! attribute vectors plus Gaussian noise. A query pairs a reference image
//! (the target with a few attributes changed) with a text vector holding the
//! signed change, and the target is the reference with the change undone.
//!
//! Text vectors code values through a fixed per-block permutation, so the
//! identity-initialized adapter is not already the ideal scorer but a linear
//! one exists ([`PlantedInfo::ideal_params`]).
//!
//! A `false_negative_rate` share of the corpus is planted as exact signature
//! duplicates of each target: relevant images that the manifest does not mark.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{GroundTruth, TruthTable};
use crate::rng::stream_rng;
use crate::scorer::AdapterParams;
use crate::store::{write_embeddings, write_manifest, Dataset, DatasetManifest, EmbeddingMatrix, QueryRecord};

const SIGNATURE_STREAM: u64 = 10;
const PERMUTATION_STREAM: u64 = 11;
const IMAGE_NOISE_STREAM: u64 = 12;
const LAYOUT_STREAM: u64 = 13;
const QUERY_STREAM: u64 = 14;

/// Candidate subset size per query, target included.
pub const SUBSET_SIZE: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_attributes: usize,
    pub dim: usize,
    pub n_corpus: usize,
    pub n_queries: usize,
    pub noise_sigma: f64,
    pub false_negative_rate: f64,
    pub seed: u64,
    /// Queries change between 1 and this many attributes.
    pub max_changed_attributes: usize,
}

impl Default for SynthConfig {
    /// The reference instance used by the ablation run.
    fn default() -> Self {
        Self {
            n_attributes: 4,
            dim: 32,
            n_corpus: 2000,
            n_queries: 500,
            noise_sigma: 0.05,
            false_negative_rate: 0.05,
            seed: 7,
            max_changed_attributes: 2,
        }
    }
}

impl SynthConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }

    pub fn block_size(&self) -> usize {
        self.dim / self.n_attributes.max(1)
    }

    /// Planted duplicates per target signature.
    pub fn duplicates_per_target(&self) -> usize {
        (self.false_negative_rate * self.n_corpus as f64).round() as usize
    }

    fn n_signatures_possible(&self) -> u128 {
        (self.block_size() as u128).saturating_pow(self.n_attributes as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_attributes == 0 {
            return fail("n_attributes must be positive".into());
        }
        if self.dim < 2 * self.n_attributes {
            return fail(format!(
                "dim ({}) must be at least 2 * n_attributes ({})",
                self.dim,
                2 * self.n_attributes
            ));
        }
        if self.n_corpus < 10 {
            return fail(format!("n_corpus must be at least 10, got {}", self.n_corpus));
        }
        if self.n_queries == 0 {
            return fail("n_queries must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.false_negative_rate) {
            return fail(format!("false_negative_rate must lie in [0, 1), got {}", self.false_negative_rate));
        }
        if self.duplicates_per_target() + 1 > self.n_corpus {
            return fail("false_negative_rate leaves no room for a target".into());
        }
        if self.max_changed_attributes == 0 || self.max_changed_attributes > self.n_attributes {
            return fail(format!(
                "max_changed_attributes must lie in 1..={}, got {}",
                self.n_attributes, self.max_changed_attributes
            ));
        }
        let (_, n_unique) = self.layout();
        let needed = (self.n_groups() + n_unique) as u128;
        if needed > self.n_signatures_possible() {
            return fail(format!(
                "{needed} distinct signatures needed but only {} exist",
                self.n_signatures_possible()
            ));
        }
        Ok(())
    }

    fn n_groups(&self) -> usize {
        self.n_corpus / (self.duplicates_per_target() + 1)
    }

    /// `(images in duplicate groups, images with a unique signature)`.
    fn layout(&self) -> (usize, usize) {
        let grouped = self.n_groups() * (self.duplicates_per_target() + 1);
        (grouped, self.n_corpus - grouped)
    }
}

/// Generator bookkeeping, kept for oracles and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedInfo {
    pub n_attributes: usize,
    pub block_size: usize,
    pub dim: usize,
    /// Attribute values of each corpus row.
    pub signatures: Vec<Vec<usize>>,
    /// Duplicate-group index of each corpus row; `None` for unique images.
    pub group_of: Vec<Option<usize>>,
    /// Text coding: value `v` of attribute `a` sits at `a * block + permutations[a][v]`.
    pub permutations: Vec<Vec<usize>>,
}

impl PlantedInfo {
    /// Adapter that decodes the text permutation and adds it to the reference,
    /// recovering the target signature up to noise.
    pub fn ideal_params(&self, inv_tau: f64) -> AdapterParams {
        let d = self.dim;
        let mut p = AdapterParams::zeros(d, d);
        for r in 0..d {
            p.w_fuse[r * 2 * d + r] = 1.0;
            p.w_img[r * d + r] = 1.0;
        }
        for (a, perm) in self.permutations.iter().enumerate() {
            for (v, &pv) in perm.iter().enumerate() {
                let row = a * self.block_size + v;
                p.w_fuse[row * 2 * d + d + a * self.block_size + pv] = 1.0;
            }
        }
        p.log_inv_tau = inv_tau.ln();
        p
    }

    fn signature_vector(&self, sig: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for (a, &val) in sig.iter().enumerate() {
            v[a * self.block_size + val] = 1.0;
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub corpus: EmbeddingMatrix,
    pub query_img: EmbeddingMatrix,
    pub query_txt: EmbeddingMatrix,
    pub queries: Vec<QueryRecord>,
    pub truth: TruthTable,
    pub planted: PlantedInfo,
}

impl SynthDataset {
    pub fn manifest(&self, split: &str) -> DatasetManifest {
        DatasetManifest::new(self.queries.clone(), &self.corpus, split)
    }

    pub fn into_dataset(self, split: &str) -> Result<Dataset> {
        let manifest = self.manifest(split);
        Dataset::new(manifest, self.corpus, self.query_img, self.query_txt)
    }

    /// Writes `corpus.qure`, `query_img.qure`, `query_txt.qure`,
    /// `manifest.jsonl`, and `truth.jsonl` into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_embeddings(&self.corpus, dir.join("corpus.qure"))?;
        write_embeddings(&self.query_img, dir.join("query_img.qure"))?;
        write_embeddings(&self.query_txt, dir.join("query_txt.qure"))?;
        write_manifest(&self.queries, dir.join("manifest.jsonl"))?;
        self.truth.save(dir.join("truth.jsonl"))
    }
}

fn distinct_signatures(cfg: &SynthConfig, n: usize) -> Vec<Vec<usize>> {
    let (a, v) = (cfg.n_attributes, cfg.block_size());
    let mut rng = stream_rng(cfg.seed, &[SIGNATURE_STREAM]);
    let total = cfg.n_signatures_possible();
    if total <= 1 << 20 && (n as u128) * 2 > total {
        // Dense regime: enumerate everything and take a shuffled prefix.
        let mut all: Vec<Vec<usize>> = (0..total as usize)
            .map(|mut code| {
                (0..a)
                    .map(|_| {
                        let d = code % v;
                        code /= v;
                        d
                    })
                    .collect()
            })
            .collect();
        all.shuffle(&mut rng);
        all.truncate(n);
        return all;
    }
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let sig: Vec<usize> = (0..a).map(|_| rng.random_range(0..v)).collect();
        if seen.insert(sig.clone()) {
            out.push(sig);
        }
    }
    out
}

fn noisy(base: &[f64], sigma: f64, normal: &Normal<f64>, rng: &mut impl Rng) -> Vec<f64> {
    base.iter()
        .map(|&x| if sigma > 0.0 { x + normal.sample(rng) } else { x })
        .collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Generates a dataset. Deterministic in the config, seed included.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let (a_count, bs, dim) = (cfg.n_attributes, cfg.block_size(), cfg.dim);
    let group_size = cfg.duplicates_per_target() + 1;
    let n_groups = cfg.n_groups();
    let (_, n_unique) = cfg.layout();
    let sigs = distinct_signatures(cfg, n_groups + n_unique);

    let mut perm_rng = stream_rng(cfg.seed, &[PERMUTATION_STREAM]);
    let permutations: Vec<Vec<usize>> = (0..a_count)
        .map(|_| {
            let mut p: Vec<usize> = (0..bs).collect();
            p.shuffle(&mut perm_rng);
            p
        })
        .collect();

    // Images in generation order: groups first, then uniques; then shuffled.
    let mut layout: Vec<(Vec<usize>, Option<usize>)> = Vec::with_capacity(cfg.n_corpus);
    for (g, sig) in sigs[..n_groups].iter().enumerate() {
        layout.extend((0..group_size).map(|_| (sig.clone(), Some(g))));
    }
    layout.extend(sigs[n_groups..].iter().map(|s| (s.clone(), None)));
    layout.shuffle(&mut stream_rng(cfg.seed, &[LAYOUT_STREAM]));

    let mut planted = PlantedInfo {
        n_attributes: a_count,
        block_size: bs,
        dim,
        signatures: Vec::with_capacity(cfg.n_corpus),
        group_of: Vec::with_capacity(cfg.n_corpus),
        permutations,
    };
    let normal = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let sigma = cfg.noise_sigma;

    let mut noise_rng = stream_rng(cfg.seed, &[IMAGE_NOISE_STREAM]);
    let mut corpus_vals: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_corpus);
    let mut image_noise: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_corpus);
    for (sig, group) in layout {
        let base = planted.signature_vector(&sig);
        let v = noisy(&base, sigma, &normal, &mut noise_rng);
        image_noise.push(v.iter().zip(&base).map(|(x, b)| x - b).collect());
        corpus_vals.push(v);
        planted.signatures.push(sig);
        planted.group_of.push(group);
    }
    let corpus_ids: Vec<String> = (0..cfg.n_corpus).map(|i| format!("img{i:05}")).collect();
    let corpus = EmbeddingMatrix::from_rows(
        dim,
        corpus_ids.iter().zip(&corpus_vals).map(|(id, v)| (id.as_str(), to_f32(v))),
    )?;

    let mut members: HashMap<usize, Vec<usize>> = HashMap::new();
    for (row, g) in planted.group_of.iter().enumerate() {
        if let Some(g) = g {
            members.entry(*g).or_default().push(row);
        }
    }
    let mut target_pool: Vec<usize> = (0..cfg.n_corpus).filter(|&r| planted.group_of[r].is_some()).collect();
    let mut qrng = stream_rng(cfg.seed, &[QUERY_STREAM]);
    target_pool.shuffle(&mut qrng);

    let mut q_img = Vec::with_capacity(cfg.n_queries);
    let mut q_txt = Vec::with_capacity(cfg.n_queries);
    let mut queries = Vec::with_capacity(cfg.n_queries);
    let mut truth = Vec::with_capacity(cfg.n_queries);
    for qi in 0..cfg.n_queries {
        let target = target_pool[qi % target_pool.len()];
        let tsig = &planted.signatures[target];

        let n_change = qrng.random_range(1..=cfg.max_changed_attributes);
        let mut attrs: Vec<usize> = (0..a_count).collect();
        attrs.shuffle(&mut qrng);
        let mut rsig = tsig.clone();
        let mut text = vec![0.0; dim];
        for &a in &attrs[..n_change] {
            let others: Vec<usize> = (0..bs).filter(|&v| v != tsig[a]).collect();
            let old = *others.choose(&mut qrng).expect("block size is at least 2");
            rsig[a] = old;
            text[a * bs + planted.permutations[a][tsig[a]]] += 1.0;
            text[a * bs + planted.permutations[a][old]] -= 1.0;
        }
        let rbase = planted.signature_vector(&rsig);
        let fresh = noisy(&vec![0.0; dim], sigma, &normal, &mut qrng);
        let reference: Vec<f64> = rbase
            .iter()
            .zip(&image_noise[target])
            .zip(&fresh)
            .map(|((b, n), f)| b + n + f)
            .collect();

        let mut subset = vec![corpus_ids[target].clone()];
        let mut candidates: Vec<usize> = (0..cfg.n_corpus).filter(|&r| r != target).collect();
        candidates.shuffle(&mut qrng);
        subset.extend(candidates[..SUBSET_SIZE - 1].iter().map(|&r| corpus_ids[r].clone()));
        subset.sort();

        let group = planted.group_of[target].expect("targets come from duplicate groups");
        let query_id = format!("q{qi:05}");
        queries.push(QueryRecord {
            query_id: query_id.clone(),
            ref_image_id: format!("ref{qi:05}"),
            text_embed_id: format!("txt{qi:05}"),
            target_id: corpus_ids[target].clone(),
            subset_ids: Some(subset),
        });
        truth.push(GroundTruth {
            query_id,
            relevant_ids: members[&group].iter().map(|&r| corpus_ids[r].clone()).collect(),
        });
        q_img.push((format!("ref{qi:05}"), to_f32(&reference)));
        q_txt.push((format!("txt{qi:05}"), to_f32(&text)));
    }

    Ok(SynthDataset {
        corpus,
        query_img: EmbeddingMatrix::from_rows(dim, q_img)?,
        query_txt: EmbeddingMatrix::from_rows(dim, q_txt)?,
        queries,
        truth: TruthTable::new(truth)?,
        planted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::target_ranks;

    fn small(noise: f64, fnr: f64) -> SynthConfig {
        SynthConfig {
            n_attributes: 3,
            dim: 18,
            n_corpus: 100,
            n_queries: 40,
            noise_sigma: noise,
            false_negative_rate: fnr,
            seed: 3,
            max_changed_attributes: 2,
        }
    }

    #[test]
    fn noiseless_target_ranks_first_under_ideal_scorer() {
        let s = generate(&small(0.0, 0.0)).unwrap();
        let ideal = s.planted.ideal_params(20.0);
        let ds = s.into_dataset("train").unwrap();
        assert!(target_ranks(&ideal, &ds).unwrap().iter().all(|&r| r == 1));
    }

    #[test]
    fn planted_duplicates_counted() {
        let s = generate(&small(0.05, 0.1)).unwrap();
        for q in &s.queries {
            let rel = s.truth.get(&q.query_id).unwrap();
            assert_eq!(rel.len(), 11);
            assert!(rel.contains(&q.target_id));
            let t = s.corpus.index_of(&q.target_id).unwrap();
            for id in rel {
                let r = s.corpus.index_of(id).unwrap();
                assert_eq!(s.planted.signatures[r], s.planted.signatures[t]);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate(&small(0.05, 0.1)).unwrap().write_to_dir(&a).unwrap();
        generate(&small(0.05, 0.1)).unwrap().write_to_dir(&b).unwrap();
        for f in ["corpus.qure", "query_img.qure", "query_txt.qure", "manifest.jsonl", "truth.jsonl"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn reference_instance_is_valid() {
        let cfg = SynthConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.duplicates_per_target(), 100);
        let s = generate(&cfg).unwrap();
        assert_eq!(s.corpus.count(), 2000);
        assert_eq!(s.queries.len(), 500);
        s.into_dataset("train").unwrap();
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(SynthConfig { dim: 5, ..small(0.0, 0.0) }.validate().is_err());
        assert!(SynthConfig { n_corpus: 9, ..small(0.0, 0.0) }.validate().is_err());
        assert!(SynthConfig { false_negative_rate: 1.0, ..small(0.0, 0.0) }.validate().is_err());
        // 2 values per attribute, 2 attributes: only 4 signatures for 10 images.
        assert!(SynthConfig { n_attributes: 2, dim: 4, n_corpus: 10, ..small(0.0, 0.0) }.validate().is_err());
    }
}
