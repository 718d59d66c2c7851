//! Line-delimited JSON query manifests and their validation.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EmbeddingMatrix;
use crate::error::{Error, Result};

/// One composed query: reference image + modification text, with its annotated target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub ref_image_id: String,
    pub text_embed_id: String,
    pub target_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub corpus_ids: Vec<String>,
    pub queries: Vec<QueryRecord>,
    pub split: String,
}

impl DatasetManifest {
    /// Manifest whose corpus listing is the id list of `corpus`.
    pub fn new(queries: Vec<QueryRecord>, corpus: &EmbeddingMatrix, split: impl Into<String>) -> Self {
        Self {
            corpus_ids: corpus.ids().to_vec(),
            queries,
            split: split.into(),
        }
    }

    pub fn n_data(&self) -> usize {
        self.queries.len()
    }

    pub fn n_img(&self) -> usize {
        self.corpus_ids.len()
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::from(e).context(format!("{}:{}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>> {
    read_jsonl(path)
}

pub fn write_manifest(queries: &[QueryRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(queries, path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    NoQueries,
    CorpusTooSmall { n_img: usize },
    CorpusIdMissing { id: String },
    DuplicateQueryId { query_id: String },
    DanglingTarget { query_id: String, id: String },
    DanglingReference { query_id: String, id: String },
    DanglingText { query_id: String, id: String },
    TargetOutsideSubset { query_id: String },
    SubsetOutsideCorpus { query_id: String, id: String },
    DimensionMismatch { matrix: &'static str, expected: usize, actual: usize },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ValidationIssue::*;
        match self {
            NoQueries => write!(f, "manifest has no queries"),
            CorpusTooSmall { n_img } => write!(f, "corpus too small: {n_img} images, need at least 2"),
            CorpusIdMissing { id } => write!(f, "corpus id `{id}` missing from corpus embeddings"),
            DuplicateQueryId { query_id } => write!(f, "duplicate query id `{query_id}`"),
            DanglingTarget { query_id, id } => {
                write!(f, "dangling target `{id}` in query `{query_id}`")
            }
            DanglingReference { query_id, id } => {
                write!(f, "dangling reference image `{id}` in query `{query_id}`")
            }
            DanglingText { query_id, id } => {
                write!(f, "dangling text embedding `{id}` in query `{query_id}`")
            }
            TargetOutsideSubset { query_id } => {
                write!(f, "target outside subset in query `{query_id}`")
            }
            SubsetOutsideCorpus { query_id, id } => {
                write!(f, "subset id `{id}` of query `{query_id}` not in corpus")
            }
            DimensionMismatch { matrix, expected, actual } => write!(
                f,
                "dimension mismatch: {matrix} has dim {actual}, corpus has dim {expected}"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} issue(s)", self.issues.len())?;
        for issue in &self.issues {
            write!(f, "; {issue}")?;
        }
        Ok(())
    }
}

/// Collects every problem that would make a lookup fail downstream. Never errors.
pub fn validate_manifest(
    manifest: &DatasetManifest,
    corpus: &EmbeddingMatrix,
    queries_img: &EmbeddingMatrix,
    queries_txt: &EmbeddingMatrix,
) -> ValidationReport {
    let mut issues = Vec::new();
    if manifest.queries.is_empty() {
        issues.push(ValidationIssue::NoQueries);
    }
    if manifest.n_img() < 2 {
        issues.push(ValidationIssue::CorpusTooSmall { n_img: manifest.n_img() });
    }
    for (matrix, m) in [("query images", queries_img), ("query texts", queries_txt)] {
        if m.dim() != corpus.dim() {
            issues.push(ValidationIssue::DimensionMismatch {
                matrix,
                expected: corpus.dim(),
                actual: m.dim(),
            });
        }
    }

    let corpus_set: HashSet<&str> = manifest.corpus_ids.iter().map(String::as_str).collect();
    for id in &manifest.corpus_ids {
        if !corpus.contains(id) {
            issues.push(ValidationIssue::CorpusIdMissing { id: id.clone() });
        }
    }
    let in_corpus = |id: &str| corpus_set.contains(id) && corpus.contains(id);

    let mut seen = HashSet::new();
    for q in &manifest.queries {
        let qid = &q.query_id;
        if !seen.insert(qid.as_str()) {
            issues.push(ValidationIssue::DuplicateQueryId { query_id: qid.clone() });
        }
        if !in_corpus(&q.target_id) {
            issues.push(ValidationIssue::DanglingTarget {
                query_id: qid.clone(),
                id: q.target_id.clone(),
            });
        }
        if !queries_img.contains(&q.ref_image_id) {
            issues.push(ValidationIssue::DanglingReference {
                query_id: qid.clone(),
                id: q.ref_image_id.clone(),
            });
        }
        if !queries_txt.contains(&q.text_embed_id) {
            issues.push(ValidationIssue::DanglingText {
                query_id: qid.clone(),
                id: q.text_embed_id.clone(),
            });
        }
        if let Some(subset) = &q.subset_ids {
            if !subset.contains(&q.target_id) {
                issues.push(ValidationIssue::TargetOutsideSubset { query_id: qid.clone() });
            }
            for id in subset {
                if !in_corpus(id) {
                    issues.push(ValidationIssue::SubsetOutsideCorpus {
                        query_id: qid.clone(),
                        id: id.clone(),
                    });
                }
            }
        }
    }
    ValidationReport { issues }
}
