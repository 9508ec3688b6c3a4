//! Document-, paragraph- and character-level deduplication.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::{xxh3_64, xxh3_64_with_seed};

use super::document::Document;
use super::filter::split_sentences;
use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DedupConfig {
    /// Window sizes, in sentences, hashed for paragraph-level matching.
    pub windows: Vec<usize>,
    /// Runs of one character longer than this collapse to one character.
    pub max_run: usize,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig { windows: vec![1, 3, 10], max_run: 10 }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() || self.windows.iter().any(|&n| !(1..=99).contains(&n)) {
            bail!(Config, "paragraph windows must be a nonempty subset of 1..=99, got {:?}", self.windows);
        }
        if self.max_run == 0 {
            bail!(Config, "max_run must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupStats {
    pub docs_in: usize,
    pub docs_dropped: usize,
    pub sentences_dropped: usize,
    pub runs_collapsed: usize,
}

/// Collapses every run of a repeated character longer than `max_run`.
pub fn collapse_runs(text: &str, max_run: usize) -> (String, usize) {
    let mut out = String::with_capacity(text.len());
    let mut collapsed = 0;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        let mut run = 1;
        while chars.peek() == Some(&c) {
            chars.next();
            run += 1;
        }
        if run > max_run {
            out.push(c);
            collapsed += 1;
        } else {
            out.extend(std::iter::repeat_n(c, run));
        }
    }
    (out, collapsed)
}

fn window_hash(sentences: &[&str]) -> u64 {
    let joined = sentences.join("\u{1f}");
    xxh3_64_with_seed(joined.as_bytes(), sentences.len() as u64)
}

/// Streaming deduplicator; the first occurrence of anything wins.
#[derive(Debug)]
pub struct Deduper {
    cfg: DedupConfig,
    docs: HashSet<u64>,
    windows: HashSet<u64>,
    pub stats: DedupStats,
}

impl Deduper {
    pub fn new(cfg: DedupConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Deduper { cfg, docs: HashSet::new(), windows: HashSet::new(), stats: DedupStats::default() })
    }

    pub fn push(&mut self, doc: &Document) -> Option<Document> {
        self.stats.docs_in += 1;
        let (text, runs) = collapse_runs(&doc.text, self.cfg.max_run);
        self.stats.runs_collapsed += runs;
        if !self.docs.insert(xxh3_64(text.as_bytes())) {
            self.stats.docs_dropped += 1;
            return None;
        }
        let pieces = split_sentences(&text);
        // Sentence index of each non-blank piece.
        let slots: Vec<usize> = (0..pieces.len()).filter(|&i| !pieces[i].trim().is_empty()).collect();
        let trimmed: Vec<&str> = slots.iter().map(|&i| pieces[i].trim()).collect();
        let mut drop = vec![false; pieces.len()];
        for &n in &self.cfg.windows {
            for start in 0..trimmed.len().saturating_sub(n - 1) {
                if !self.windows.insert(window_hash(&trimmed[start..start + n])) {
                    slots[start..start + n].iter().for_each(|&i| drop[i] = true);
                }
            }
        }
        self.stats.sentences_dropped += drop.iter().filter(|&&d| d).count();
        let mut kept: String = pieces.iter().zip(&drop).filter(|(_, &d)| !d).map(|(p, _)| *p).collect();
        if drop.contains(&true) {
            // A dropped final sentence leaves its predecessor's separator behind.
            kept.truncate(kept.trim_end().len());
        }
        if kept.trim().is_empty() {
            self.stats.docs_dropped += 1;
            return None;
        }
        Some(doc.with_text(kept))
    }
}

pub fn dedup(docs: &[Document], cfg: &DedupConfig) -> Result<(Vec<Document>, DedupStats)> {
    let mut d = Deduper::new(cfg.clone())?;
    let out = docs.iter().filter_map(|doc| d.push(doc)).collect();
    Ok((out, d.stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_runs_collapse() {
        assert_eq!(collapse_runs("aaaaaaaaaaaa", 10).0, "a");
        assert_eq!(collapse_runs("aaaaaaaaaa", 10).0, "aaaaaaaaaa");
        assert_eq!(collapse_runs("book keeper!!!!!!!!!!!!!!", 10), ("book keeper!".to_string(), 1));
    }

    #[test]
    fn identical_documents_drop() {
        let a = Document::new("1", "Same text here. And more.", "t");
        let b = Document::new("2", "Same text here. And more.", "t");
        let (out, stats) = dedup(&[a.clone(), b], &DedupConfig::default()).unwrap();
        assert_eq!(out, vec![a]);
        assert_eq!(stats.docs_dropped, 1);
    }

    #[test]
    fn config_rejects_bad_windows() {
        assert!(Deduper::new(DedupConfig { windows: vec![0], max_run: 10 }).is_err());
        assert!(Deduper::new(DedupConfig { windows: vec![100], max_run: 10 }).is_err());
    }
}
