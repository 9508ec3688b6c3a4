use serde::{Deserialize, Serialize};

use super::document::Document;
use super::tokenizer::Tokenizer;

/// Occurrence count of every id over a tokenized corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFrequency {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl TokenFrequency {
    pub fn zeros(vocab_size: usize) -> Self {
        TokenFrequency { counts: vec![0; vocab_size], total: 0 }
    }

    pub fn add(&mut self, ids: &[u32]) {
        for &id in ids {
            self.counts[id as usize] += 1;
        }
        self.total += ids.len() as u64;
    }

    pub fn get(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }
}

pub fn count_frequencies<T: Tokenizer>(docs: &[Document], tokenizer: &T) -> TokenFrequency {
    let mut f = TokenFrequency::zeros(tokenizer.vocab_size());
    for d in docs {
        f.add(&tokenizer.encode(&d.text));
    }
    f
}
