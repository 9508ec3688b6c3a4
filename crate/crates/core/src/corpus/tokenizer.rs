//! Byte-fallback BPE with specials at the lowest ids.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::document::Document;
use super::special::{is_special, special_names, SPECIAL_COUNT, UNK};
use crate::error::{bail, Result};

const VOCAB_VERSION: u32 = 1;
const BYTE_BASE: u32 = SPECIAL_COUNT;
/// Ids below this are specials or raw bytes.
pub const BASE_SIZE: usize = SPECIAL_COUNT as usize + 256;

static PRETOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r" ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+").expect("valid pattern"));

/// Anything that maps text to ids in a vocabulary with the standard
/// special-token layout.
pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<u32>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    version: u32,
    specials: Vec<String>,
    merges: Vec<(u32, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    retained: Option<Vec<u32>>,
}

#[derive(Clone, Debug)]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    /// Byte string of every base-vocabulary id.
    bytes: Vec<Vec<u8>>,
    /// Sorted base ids kept by vocabulary pruning; `None` keeps all.
    retained: Option<Vec<u32>>,
    to_new: Option<HashMap<u32, u32>>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.retained == other.retained
    }
}

impl Vocab {
    fn from_merges(merges: Vec<(u32, u32)>, retained: Option<Vec<u32>>) -> Result<Self> {
        let mut bytes: Vec<Vec<u8>> = special_names().into_iter().map(String::into_bytes).collect();
        bytes.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let n = bytes.len() as u32;
            if a >= n || b >= n || is_special(a) || is_special(b) {
                bail!(Format, "merge {rank} refers to unknown or special ids ({a}, {b})");
            }
            let joined = [bytes[a as usize].as_slice(), bytes[b as usize].as_slice()].concat();
            bytes.push(joined);
            ranks.insert((a, b), rank as u32);
        }
        let to_new = match &retained {
            Some(r) => {
                if r.windows(2).any(|w| w[0] >= w[1]) || r.last().is_some_and(|&x| x as usize >= bytes.len()) {
                    bail!(Format, "retained ids must be sorted, unique and in range");
                }
                if (0..SPECIAL_COUNT).any(|s| r.get(s as usize) != Some(&s)) {
                    bail!(Format, "retained ids must include every special");
                }
                Some(r.iter().enumerate().map(|(new, &old)| (old, new as u32)).collect())
            }
            None => None,
        };
        Ok(Vocab { merges, ranks, bytes, retained, to_new })
    }

    /// Vocabulary size before any pruning.
    pub fn base_size(&self) -> usize {
        self.bytes.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn retained(&self) -> Option<&[u32]> {
        self.retained.as_deref()
    }

    /// Restricts the vocabulary to `retained` base ids (sorted, specials
    /// included); everything else encodes to UNK.
    pub fn pruned(&self, retained: Vec<u32>) -> Result<Vocab> {
        let base: Vec<u32> = match &self.retained {
            Some(prev) => retained.iter().map(|&i| prev.get(i as usize).copied().unwrap_or(u32::MAX)).collect(),
            None => retained,
        };
        Vocab::from_merges(self.merges.clone(), Some(base))
    }

    /// Base-vocabulary tokenization, ignoring any pruning.
    fn encode_base(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for m in PRETOKEN.find_iter(text) {
            let mut word: Vec<u32> = m.as_str().bytes().map(|b| BYTE_BASE + b as u32).collect();
            loop {
                let best = word
                    .windows(2)
                    .enumerate()
                    .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&r| (r, i)))
                    .min();
                let Some((rank, _)) = best else { break };
                let new_id = BASE_SIZE as u32 + rank;
                let pair = self.merges[rank as usize];
                let mut merged = Vec::with_capacity(word.len());
                let mut i = 0;
                while i < word.len() {
                    if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
                        merged.push(new_id);
                        i += 2;
                    } else {
                        merged.push(word[i]);
                        i += 1;
                    }
                }
                word = merged;
            }
            out.extend(word);
        }
        out
    }

    /// Bytes of a token in this vocabulary's id space.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        let base = match &self.retained {
            Some(r) => *r.get(id as usize)?,
            None => id,
        };
        self.bytes.get(base as usize).map(|b| b.as_slice())
    }

    /// Concatenated bytes of all non-special tokens, decoded lossily.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if is_special(id) {
                continue;
            }
            if let Some(b) = self.token_bytes(id) {
                bytes.extend_from_slice(b);
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            version: VOCAB_VERSION,
            specials: special_names(),
            merges: self.merges.clone(),
            retained: self.retained.clone(),
        };
        fs::write(path, serde_json::to_string(&file)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| crate::Error::Format(format!("vocab: {e}")))?;
        if file.version != VOCAB_VERSION {
            bail!(Format, "unsupported vocab version {}", file.version);
        }
        if file.specials != special_names() {
            bail!(Format, "vocab special-token layout differs from this build");
        }
        Vocab::from_merges(file.merges, file.retained)
    }
}

impl Tokenizer for Vocab {
    fn vocab_size(&self) -> usize {
        self.retained.as_ref().map_or(self.bytes.len(), Vec::len)
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        let ids = self.encode_base(text);
        match &self.to_new {
            Some(map) => ids.into_iter().map(|i| map.get(&i).copied().unwrap_or(UNK)).collect(),
            None => ids,
        }
    }
}

/// Greedy pair-merge training over pre-tokenized words. Ties between
/// equally frequent pairs go to the smallest pair of ids.
pub fn train_tokenizer(docs: &[Document], target_size: usize) -> Result<Vocab> {
    if target_size < BASE_SIZE {
        bail!(Config, "target size {target_size} is below the {BASE_SIZE} specials and bytes");
    }
    if docs.is_empty() {
        bail!(Input, "cannot train a tokenizer on an empty corpus");
    }
    let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
    for d in docs {
        for m in PRETOKEN.find_iter(&d.text) {
            *freq.entry(m.as_str()).or_default() += 1;
        }
    }
    let mut words: Vec<Vec<u32>> = Vec::with_capacity(freq.len());
    let mut counts: Vec<u64> = Vec::with_capacity(freq.len());
    for (w, c) in freq {
        words.push(w.bytes().map(|b| BYTE_BASE + b as u32).collect());
        counts.push(c);
    }

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += counts[wi];
            where_.entry((p[0], p[1])).or_default().insert(wi);
        }
    }
    let mut heap: BinaryHeap<(u64, Reverse<(u32, u32)>)> =
        pair_counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();

    let mut merges = Vec::with_capacity(target_size - BASE_SIZE);
    while merges.len() < target_size - BASE_SIZE {
        let Some((c, Reverse(pair))) = heap.pop() else { break };
        if pair_counts.get(&pair).copied().unwrap_or(0) != c || c == 0 {
            continue;
        }
        let new_id = (BASE_SIZE + merges.len()) as u32;
        merges.push(pair);
        let mut touched: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
        touched.sort_unstable();
        let mut changed: HashSet<(u32, u32)> = HashSet::new();
        for wi in touched {
            let w = &words[wi];
            for p in w.windows(2) {
                let key = (p[0], p[1]);
                if let Some(v) = pair_counts.get_mut(&key) {
                    *v -= counts[wi];
                }
                changed.insert(key);
            }
            let mut merged = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(w[i]);
                    i += 1;
                }
            }
            for p in merged.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.entry(key).or_default() += counts[wi];
                where_.entry(key).or_default().insert(wi);
                changed.insert(key);
            }
            words[wi] = merged;
        }
        pair_counts.remove(&pair);
        for key in changed {
            if let Some(&c) = pair_counts.get(&key) {
                if c > 0 {
                    heap.push((c, Reverse(key)));
                }
            }
        }
    }
    if merges.len() < target_size - BASE_SIZE {
        bail!(Input, "corpus supports only {} merges, {} needed", merges.len(), target_size - BASE_SIZE);
    }
    Vocab::from_merges(merges, None)
}

/// Whitespace word vocabulary: specials, then the given words in order.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVocab {
    ids: HashMap<String, u32>,
}

impl WordVocab {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let ids = words.iter().enumerate().map(|(i, w)| (w.as_ref().to_string(), SPECIAL_COUNT + i as u32)).collect();
        WordVocab { ids }
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }
}

impl Tokenizer for WordVocab {
    fn vocab_size(&self) -> usize {
        SPECIAL_COUNT as usize + self.ids.len()
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.ids.get(w).copied().unwrap_or(UNK)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs() -> Vec<Document> {
        ["the cat sat on the mat", "the dog sat on the log", "a cat and a dog", "日本語のテキスト"]
            .iter()
            .enumerate()
            .map(|(i, t)| Document::new(i.to_string(), *t, "t"))
            .collect()
    }

    #[test]
    fn size_and_roundtrip() {
        let v = train_tokenizer(&docs(), BASE_SIZE + 12).unwrap();
        assert_eq!(v.vocab_size(), BASE_SIZE + 12);
        for text in ["the cat sat", "never seen: ünïcödé ✓ 🚀", "日本"] {
            let ids = v.encode(text);
            assert_eq!(v.decode(&ids), text);
            assert_eq!(v.encode(&v.decode(&ids)), ids);
        }
        assert!(v.encode("the").len() < 3);
    }

    #[test]
    fn too_small_target() {
        assert!(matches!(train_tokenizer(&docs(), BASE_SIZE - 1), Err(crate::Error::Config(_))));
    }

    #[test]
    fn pruned_vocab_maps_missing_to_unk() {
        let v = train_tokenizer(&docs(), BASE_SIZE + 12).unwrap();
        let full = v.encode("the cat");
        let mut keep: Vec<u32> = (0..SPECIAL_COUNT).collect();
        keep.push(full[0]);
        let p = v.pruned(keep).unwrap();
        assert_eq!(p.vocab_size(), SPECIAL_COUNT as usize + 1);
        let ids = p.encode("the cat");
        assert_eq!(ids[0], SPECIAL_COUNT);
        assert!(ids[1..].iter().all(|&i| i == UNK));
    }
}
