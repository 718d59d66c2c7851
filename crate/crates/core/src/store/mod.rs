//! Embedding files, query manifests, and the validated [`Dataset`] bundle the
//! scorer, miner, and trainer read from.

mod embeddings;
mod manifest;

use std::collections::HashMap;
use std::path::Path;

pub use embeddings::{
    decode_embeddings, load_embeddings, write_embeddings, ContainerHeader, EmbeddingMatrix,
    DTYPE_CHECKPOINT, DTYPE_F32, FORMAT_VERSION, HEADER_LEN, MAGIC,
};
pub use manifest::{
    read_jsonl, read_manifest, validate_manifest, write_jsonl, write_manifest, DatasetManifest,
    QueryRecord, ValidationIssue, ValidationReport,
};

use crate::error::{Error, Result};

/// Dense row indices for one query, resolved once at load time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedQuery {
    pub ref_row: usize,
    pub txt_row: usize,
    pub target_row: usize,
    pub subset_rows: Option<Vec<usize>>,
}

/// A manifest together with the three embedding matrices it references.
///
/// Only constructible from inputs with an empty [`ValidationReport`], so every
/// id lookup downstream succeeds.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub corpus: EmbeddingMatrix,
    pub query_img: EmbeddingMatrix,
    pub query_txt: EmbeddingMatrix,
    resolved: Vec<ResolvedQuery>,
    query_lookup: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(
        manifest: DatasetManifest,
        corpus: EmbeddingMatrix,
        query_img: EmbeddingMatrix,
        query_txt: EmbeddingMatrix,
    ) -> Result<Self> {
        let report = validate_manifest(&manifest, &corpus, &query_img, &query_txt);
        if !report.is_empty() {
            return Err(Error::InvalidManifest(report));
        }
        let resolved = manifest
            .queries
            .iter()
            .map(|q| ResolvedQuery {
                ref_row: query_img.index_of(&q.ref_image_id).unwrap(),
                txt_row: query_txt.index_of(&q.text_embed_id).unwrap(),
                target_row: corpus.index_of(&q.target_id).unwrap(),
                subset_rows: q
                    .subset_ids
                    .as_ref()
                    .map(|s| s.iter().map(|id| corpus.index_of(id).unwrap()).collect()),
            })
            .collect();
        let query_lookup = manifest
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.query_id.clone(), i))
            .collect();
        Ok(Self {
            manifest,
            corpus,
            query_img,
            query_txt,
            resolved,
            query_lookup,
        })
    }

    pub fn load(
        manifest: impl AsRef<Path>,
        corpus: impl AsRef<Path>,
        query_img: impl AsRef<Path>,
        query_txt: impl AsRef<Path>,
        split: &str,
    ) -> Result<Self> {
        let corpus = load_embeddings(corpus)?;
        let queries = read_manifest(manifest)?;
        let manifest = DatasetManifest::new(queries, &corpus, split);
        Self::new(
            manifest,
            corpus,
            load_embeddings(query_img)?,
            load_embeddings(query_txt)?,
        )
    }

    pub fn queries(&self) -> &[QueryRecord] {
        &self.manifest.queries
    }

    pub fn resolved(&self) -> &[ResolvedQuery] {
        &self.resolved
    }

    pub fn n_queries(&self) -> usize {
        self.resolved.len()
    }

    pub fn dim(&self) -> usize {
        self.corpus.dim()
    }

    /// `(reference image, text)` input vectors for query `i`.
    pub fn query_inputs(&self, i: usize) -> (&[f32], &[f32]) {
        let r = &self.resolved[i];
        (self.query_img.row(r.ref_row), self.query_txt.row(r.txt_row))
    }

    pub fn query_index(&self, query_id: &str) -> Option<usize> {
        self.query_lookup.get(query_id).copied()
    }
}
