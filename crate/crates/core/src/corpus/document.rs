use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Zh,
    En,
    Other,
    #[default]
    Unknown,
}

impl Lang {
    pub fn is_unknown(&self) -> bool {
        *self == Lang::Unknown
    }
}

/// One corpus record. Files hold one JSON object per line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Lang::is_unknown")]
    pub lang: Lang,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, source: impl Into<String>) -> Self {
        Document { id: id.into(), text: text.into(), source: source.into(), lang: Lang::Unknown }
    }

    pub fn with_text(&self, text: String) -> Self {
        Document { text, ..self.clone() }
    }
}

/// Parses newline-delimited JSON records; blank lines are skipped.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, reason: e.to_string() })?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Document>> {
    parse_jsonl(BufReader::new(File::open(path)?))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
