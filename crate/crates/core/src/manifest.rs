//! JSONL readers and writers for gallery, query and qrels manifests and for
//! every pipeline artifact.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retriever::{GalleryIndex, GalleryItem, QueryRecord};
use crate::tensor::EmbeddingVector;

pub type Tags = BTreeMap<String, String>;

/// Ground-truth relevance: query id to relevant gallery item ids.
pub type Qrels = BTreeMap<String, BTreeSet<String>>;

/// Reads a JSONL file, skipping blank lines. Errors carry 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push((idx + 1, value));
    }
    Ok(out)
}

/// Writes one compact JSON object per line.
pub fn write_jsonl<'a, T, I>(path: &Path, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("artifact records always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact records always serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GalleryLine {
    item_id: String,
    #[serde(default)]
    embedding: Option<Vec<f64>>,
    #[serde(default)]
    embedding_ref: Option<String>,
    image_ref: String,
    #[serde(default)]
    tags: Tags,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryLine {
    query_id: String,
    text: String,
    #[serde(default)]
    embedding: Option<Vec<f64>>,
    #[serde(default)]
    embedding_ref: Option<String>,
    #[serde(default)]
    tags: Tags,
}

#[derive(Deserialize)]
struct QrelsLine {
    query_id: String,
    relevant_item_ids: Vec<String>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a little-endian `f32` vector file.
pub fn read_f32_vector(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(parse_err(
            path,
            0,
            format!("{} bytes is not a whole number of f32 values", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn resolve_embedding(
    manifest: &Path,
    line: usize,
    inline: Option<Vec<f64>>,
    reference: Option<String>,
) -> Result<EmbeddingVector> {
    let values = match (inline, reference) {
        (Some(v), None) => v,
        (None, Some(r)) => {
            let mut p = PathBuf::from(&r);
            if p.is_relative() {
                if let Some(dir) = manifest.parent() {
                    p = dir.join(p);
                }
            }
            read_f32_vector(&p).map_err(|e| parse_err(manifest, line, format!("embedding_ref {r:?}: {e}")))?
        }
        (Some(_), Some(_)) => return Err(parse_err(manifest, line, "both embedding and embedding_ref given")),
        (None, None) => return Err(parse_err(manifest, line, "missing embedding or embedding_ref")),
    };
    EmbeddingVector::new(values).map_err(|e| parse_err(manifest, line, e.to_string()))
}

/// Loads a gallery manifest and builds the search index.
pub fn load_gallery(path: &Path) -> Result<GalleryIndex> {
    let mut items = Vec::new();
    for (line, raw) in read_jsonl::<GalleryLine>(path)? {
        let embedding = resolve_embedding(path, line, raw.embedding, raw.embedding_ref)?;
        items.push(GalleryItem {
            item_id: raw.item_id,
            embedding,
            image_ref: raw.image_ref,
            tags: raw.tags,
        });
    }
    GalleryIndex::build(items)
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    let mut seen = BTreeSet::new();
    let mut dim = None;
    let mut out = Vec::new();
    for (line, raw) in read_jsonl::<QueryLine>(path)? {
        if !seen.insert(raw.query_id.clone()) {
            return Err(Error::DuplicateId(raw.query_id));
        }
        let embedding = resolve_embedding(path, line, raw.embedding, raw.embedding_ref)?;
        let expected = *dim.get_or_insert(embedding.dim());
        if embedding.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: embedding.dim(),
            });
        }
        out.push(QueryRecord {
            query_id: raw.query_id,
            text: raw.text,
            embedding,
            tags: raw.tags,
        });
    }
    Ok(out)
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (_, raw) in read_jsonl::<QrelsLine>(path)? {
        if qrels.contains_key(&raw.query_id) {
            return Err(Error::DuplicateId(raw.query_id));
        }
        qrels.insert(raw.query_id, raw.relevant_item_ids.into_iter().collect());
    }
    Ok(qrels)
}
