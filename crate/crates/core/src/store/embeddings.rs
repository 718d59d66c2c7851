//! Binary embedding container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "QURE"
//! 4       1     version (1)
//! 5       1     dtype code (1 = f32 embeddings, 2 = checkpoint)
//! 6       2     reserved, zero
//! 8       4     dim   (u32 LE)
//! 12      8     count (u64 LE)
//! 20      ...   count * dim f32 LE values, row-major
//! ...     ...   id table: per row, u16 LE byte length + UTF-8 bytes
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"QURE";
pub const FORMAT_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_CHECKPOINT: u8 = 2;
pub const HEADER_LEN: usize = 20;

/// Fixed 20-byte header shared by embedding files and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub dtype: u8,
    pub dim: u32,
    pub count: u64,
}

impl ContainerHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4] = FORMAT_VERSION;
        out[5] = self.dtype;
        out[8..12].copy_from_slice(&self.dim.to_le_bytes());
        out[12..20].copy_from_slice(&self.count.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corruption(format!(
                "header truncated: {} of {HEADER_LEN} bytes",
                bytes.len()
            )));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        if bytes[6] != 0 || bytes[7] != 0 {
            return Err(Error::Format("reserved header bytes are not zero".into()));
        }
        Ok(Self {
            dtype: bytes[5],
            dim: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            count: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
        })
    }
}

/// Dense row-major `count x dim` matrix of f32 features keyed by string ids.
///
/// Construction enforces the invariants: unique non-empty ids, finite values,
/// `values.len() == ids.len() * dim`. Dense row indices are assigned here and
/// are never persisted.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    dim: usize,
    values: Vec<f32>,
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, ids: Vec<String>, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("embedding dim must be positive".into()));
        }
        if values.len() != ids.len() * dim {
            return Err(Error::Validation(format!(
                "{} values cannot form {} rows of dim {dim}",
                values.len(),
                ids.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if id.is_empty() {
                return Err(Error::Validation(format!("empty id at row {row}")));
            }
            if index.insert(id.clone(), row).is_some() {
                return Err(Error::Validation(format!("duplicate id `{id}`")));
            }
        }
        Ok(Self {
            dim,
            values,
            ids,
            index,
        })
    }

    /// Builds a matrix from `(id, row)` pairs.
    pub fn from_rows<I, S>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (id, row) in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            ids.push(id.into());
            values.extend_from_slice(&row);
        }
        Self::new(dim, ids, values)
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new(), Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn lookup(&self, id: &str) -> Result<usize> {
        self.index_of(id).ok_or_else(|| Error::UnknownId(id.to_owned()))
    }

    pub fn row_by_id(&self, id: &str) -> Result<&[f32]> {
        Ok(self.row(self.lookup(id)?))
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.values.chunks_exact(self.dim))
    }
}

/// Bit-exact equality: values are compared by their IEEE bit patterns.
impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.ids == other.ids
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn write_embeddings(matrix: &EmbeddingMatrix, destination: impl AsRef<Path>) -> Result<()> {
    let path = destination.as_ref();
    // All checks happen before the file is created.
    let dim = u32::try_from(matrix.dim())
        .map_err(|_| Error::Validation(format!("dim {} exceeds u32", matrix.dim())))?;
    for id in matrix.ids() {
        if id.len() > u16::MAX as usize {
            return Err(Error::Validation(format!(
                "id of {} bytes exceeds the u16 length field",
                id.len()
            )));
        }
    }
    if let Some(pos) = matrix.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: pos / matrix.dim(),
            col: pos % matrix.dim(),
        });
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = ContainerHeader {
        dtype: DTYPE_F32,
        dim,
        count: matrix.count() as u64,
    };
    let io = |e| Error::io(path, e);
    out.write_all(&header.encode()).map_err(io)?;
    for v in matrix.values() {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for id in matrix.ids() {
        out.write_all(&(id.len() as u16).to_le_bytes()).map_err(io)?;
        out.write_all(id.as_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(())
}

pub fn load_embeddings(source: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = source.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes).map_err(|e| e.context(format!("loading {}", path.display())))
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let header = ContainerHeader::decode(bytes)?;
    if header.dtype != DTYPE_F32 {
        return Err(Error::Format(format!(
            "dtype code {} is not an f32 embedding file",
            header.dtype
        )));
    }
    let dim = header.dim as usize;
    let count = usize::try_from(header.count)
        .map_err(|_| Error::Corruption(format!("count {} is not addressable", header.count)))?;
    let payload = &bytes[HEADER_LEN..];
    let value_bytes = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Corruption("declared count*dim overflows".into()))?;
    if value_bytes > payload.len() {
        return Err(Error::Corruption(format!(
            "declared {count}x{dim} values need {value_bytes} bytes, payload has {}",
            payload.len()
        )));
    }
    let values: Vec<f32> = payload[..value_bytes]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut rest = &payload[value_bytes..];
    let mut ids = Vec::with_capacity(count);
    for row in 0..count {
        if rest.len() < 2 {
            return Err(Error::Corruption(format!("id table truncated at row {row}")));
        }
        let len = u16::from_le_bytes([rest[0], rest[1]]) as usize;
        rest = &rest[2..];
        if rest.len() < len {
            return Err(Error::Corruption(format!("id table truncated at row {row}")));
        }
        let id = std::str::from_utf8(&rest[..len])
            .map_err(|_| Error::Corruption(format!("id at row {row} is not UTF-8")))?;
        ids.push(id.to_owned());
        rest = &rest[len..];
    }
    if !rest.is_empty() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after id table",
            rest.len()
        )));
    }
    EmbeddingMatrix::new(dim, ids, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(3, [("a", vec![1.0, 0.0, 0.0]), ("b", vec![0.0, 1.0, 0.0])])
            .unwrap()
    }

    fn encode(m: &EmbeddingMatrix) -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.qure");
        write_embeddings(m, &p).unwrap();
        std::fs::read(p).unwrap()
    }

    #[test]
    fn round_trip() {
        let m = small();
        let bytes = encode(&m);
        assert_eq!(&bytes[0..4], b"QURE");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 20 + 2 * 3 * 4 + 2 * (2 + 1));
        assert_eq!(decode_embeddings(&bytes).unwrap(), m);
    }

    #[test]
    fn empty_matrix_round_trips() {
        let m = EmbeddingMatrix::empty(8).unwrap();
        let bytes = encode(&m);
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = decode_embeddings(&bytes).unwrap();
        assert_eq!(back.count(), 0);
        assert_eq!(back.dim(), 8);
    }

    #[test]
    fn nan_rejected_at_construction() {
        let err = EmbeddingMatrix::new(3, vec!["a".into()], vec![f32::NAN, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 0, col: 0 }));
        assert!(err.to_string().contains("non-finite value"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = EmbeddingMatrix::new(1, vec!["a".into(), "a".into()], vec![1.0, 2.0]);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn oversized_id_rejected_before_writing() {
        let long = "x".repeat(70_000);
        let m = EmbeddingMatrix::new(1, vec![long], vec![1.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.qure");
        assert!(write_embeddings(&m, &p).is_err());
        assert!(!p.exists());
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode(&small());
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_version_is_format_error() {
        let mut bytes = encode(&small());
        bytes[4] = 2;
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn missing_row_is_corruption() {
        let ids: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
        let m = EmbeddingMatrix::new(2, ids, (0..20).map(|v| v as f32).collect()).unwrap();
        let bytes = encode(&m);
        // keep header + 9 rows of payload only
        let truncated = &bytes[..HEADER_LEN + 9 * 2 * 4];
        assert!(matches!(decode_embeddings(truncated), Err(Error::Corruption(_))));
        // drop one row from the middle of a complete file: everything shifts
        let mut spliced = bytes[..HEADER_LEN + 9 * 2 * 4].to_vec();
        spliced.extend_from_slice(&bytes[HEADER_LEN + 10 * 2 * 4..]);
        assert!(matches!(decode_embeddings(&spliced), Err(Error::Corruption(_))));
    }

    #[test]
    fn duplicate_id_on_disk_is_validation_error() {
        let mut bytes = encode(&small());
        let n = bytes.len();
        bytes[n - 1] = b'a';
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Validation(_))));
    }
}
