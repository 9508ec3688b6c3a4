//! Corpus preparation: privacy scrubbing, cleaning, language filtering,
//! deduplication, tokenizer training and token statistics.
//!
//! [`process`] runs the filters in their fixed order:
//! scrub, clean, classify and filter, then dedup.

mod dedup;
mod document;
mod filter;
mod frequency;
pub mod special;
pub mod synth;
mod tokenizer;

pub use dedup::{collapse_runs, dedup, DedupConfig, DedupStats, Deduper};
pub use document::{parse_jsonl, read_jsonl, write_jsonl, Document, Lang};
pub use filter::{
    classify_lang, classify_text, clean_internet, clean_text, has_private_data, is_cjk, scrub_privacy, scrub_text,
    split_sentences, word_count, CleanConfig, LangConfig, EMAIL_PATTERN, HTML_TAG_PATTERN, PHONE_PATTERN, URL_PATTERN,
};
pub use frequency::{count_frequencies, TokenFrequency};
pub use tokenizer::{train_tokenizer, Tokenizer, Vocab, WordVocab, BASE_SIZE};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub clean: CleanConfig,
    pub lang: LangConfig,
    pub dedup: DedupConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub docs_in: usize,
    pub docs_out: usize,
    pub dropped_clean: usize,
    pub dropped_lang: usize,
    pub lang_zh: usize,
    pub lang_en: usize,
    pub lang_other: usize,
    pub lang_unknown: usize,
    pub dedup: DedupStats,
}

/// Scrub and clean, keeping only Chinese or English documents.
pub fn clean_corpus(docs: &[Document], cfg: &CorpusConfig) -> (Vec<Document>, CorpusStats) {
    let mut stats = CorpusStats { docs_in: docs.len(), ..Default::default() };
    let mut kept = Vec::with_capacity(docs.len());
    for doc in docs {
        let Some(mut doc) = clean_internet(&scrub_privacy(doc), &cfg.clean) else {
            stats.dropped_clean += 1;
            continue;
        };
        doc.lang = classify_lang(&doc, &cfg.lang);
        match doc.lang {
            Lang::Zh => stats.lang_zh += 1,
            Lang::En => stats.lang_en += 1,
            Lang::Other => stats.lang_other += 1,
            Lang::Unknown => stats.lang_unknown += 1,
        }
        if matches!(doc.lang, Lang::Zh | Lang::En) {
            kept.push(doc);
        } else {
            stats.dropped_lang += 1;
        }
    }
    stats.docs_out = kept.len();
    (kept, stats)
}

/// Scrub, clean, keep only Chinese or English documents, then dedup.
pub fn process(docs: &[Document], cfg: &CorpusConfig) -> Result<(Vec<Document>, CorpusStats)> {
    let (kept, mut stats) = clean_corpus(docs, cfg);
    let (out, dedup_stats) = dedup(&kept, &cfg.dedup)?;
    stats.dedup = dedup_stats;
    stats.docs_out = out.len();
    Ok((out, stats))
}

/// Language and count summary of a corpus without modifying it.
pub fn summarize(docs: &[Document], cfg: &CorpusConfig) -> Result<CorpusStats> {
    let mut stats = CorpusStats { docs_in: docs.len(), docs_out: docs.len(), ..Default::default() };
    for d in docs {
        match classify_lang(d, &cfg.lang) {
            Lang::Zh => stats.lang_zh += 1,
            Lang::En => stats.lang_en += 1,
            Lang::Other => stats.lang_other += 1,
            Lang::Unknown => stats.lang_unknown += 1,
        }
    }
    let (_, dedup_stats) = dedup(docs, &cfg.dedup)?;
    stats.dedup = dedup_stats;
    Ok(stats)
}
