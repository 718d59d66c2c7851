//! Writes a small embedding container to disk and reads it back.
//!
//! cargo run --example embedding_roundtrip

use qure::store::{load_embeddings, write_embeddings, ContainerHeader, HEADER_LEN};
use qure::EmbeddingMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rows = (0..4).map(|i| (format!("img{i:03}"), vec![i as f32, 1.0, -0.5]));
    let matrix = EmbeddingMatrix::from_rows(3, rows)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("corpus.qure");
    write_embeddings(&matrix, &path)?;

    let bytes = std::fs::read(&path)?;
    let header = ContainerHeader::decode(&bytes[..HEADER_LEN])?;
    println!("header: {header:?}");
    println!("file size: {} bytes", bytes.len());

    let back = load_embeddings(&path)?;
    assert_eq!(back, matrix);
    for (id, row) in back.rows() {
        println!("{id} {row:?}");
    }
    Ok(())
}
