//! JSON-lines corpora: one document per line with `id`, `text` and the
//! optional `lang`, `source`, `dup_count`, `quality` and `category` fields.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use desklab_core::pipeline::Document;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DocRecord {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lang: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dup_count: Option<u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    quality: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<u8>,
}

impl From<DocRecord> for Document {
    fn from(r: DocRecord) -> Self {
        Document {
            id: r.id,
            text: r.text,
            lang: r.lang,
            category: r.category,
            dup_count: r.dup_count.unwrap_or(1),
            quality: r.quality,
            source: r.source,
        }
    }
}

impl From<&Document> for DocRecord {
    fn from(d: &Document) -> Self {
        DocRecord {
            id: d.id.clone(),
            text: d.text.clone(),
            lang: d.lang.clone(),
            source: d.source.clone(),
            dup_count: Some(d.dup_count),
            quality: d.quality.clone(),
            category: d.category,
        }
    }
}

pub fn parse_corpus(reader: impl BufRead, name: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{name}:{}: {e}", i + 1)))?;
        let doc = Document::from(rec);
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(f), &path.display().to_string())
}

pub fn corpus_to_string(docs: &[Document]) -> String {
    let mut s = String::new();
    for d in docs {
        s.push_str(&serde_json::to_string(&DocRecord::from(d)).expect("documents serialize"));
        s.push('\n');
    }
    s
}

pub fn write_corpus(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(corpus_to_string(docs).as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
