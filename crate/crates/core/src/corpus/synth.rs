//! Deterministic synthetic corpus for fixtures and desk-scale runs.
//!
//! Text comes from two bigram Markov sources over Zipf-distributed
//! vocabularies (a Latin-script one and a CJK one), so a small model has
//! real structure to learn. A share of documents carries the noise the
//! filters exist for: contact details, markup, control characters, long
//! character runs, short fragments, encoded blobs and duplicated
//! documents or paragraphs.

use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;
use serde::{Deserialize, Serialize};

use super::document::Document;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub docs: usize,
    pub seed: u64,
    pub zh_fraction: f64,
    pub junk_fraction: f64,
    /// Share of documents that are exact copies of an earlier one.
    pub dup_fraction: f64,
    /// Share of documents that borrow a paragraph from an earlier one.
    pub paragraph_dup_fraction: f64,
    /// Share of documents with contact details embedded.
    pub pii_fraction: f64,
    /// Share of documents that are long (several times the usual length).
    pub long_fraction: f64,
}

impl SynthConfig {
    pub fn new(docs: usize, seed: u64) -> Self {
        SynthConfig {
            docs,
            seed,
            zh_fraction: 0.25,
            junk_fraction: 0.04,
            dup_fraction: 0.03,
            paragraph_dup_fraction: 0.05,
            pii_fraction: 0.08,
            long_fraction: 0.12,
        }
    }
}

const ONSETS: [&str; 18] = ["", "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr"];
const NUCLEI: [&str; 7] = ["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: [&str; 6] = ["", "n", "r", "s", "t", "l"];

struct Markov<T> {
    tokens: Vec<T>,
    zipf: Zipf<f64>,
    /// Preferred successors of every token.
    next: Vec<[usize; 4]>,
}

impl<T: Clone> Markov<T> {
    fn new(tokens: Vec<T>, rng: &mut ChaCha8Rng) -> Self {
        let n = tokens.len();
        let zipf = Zipf::new(n as f64, 1.1).expect("valid zipf");
        let next = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0..n))).collect();
        Markov { tokens, zipf, next }
    }

    fn walk(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
        let mut cur = self.zipf.sample(rng) as usize - 1;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.tokens[cur].clone());
            let r: f64 = rng.random();
            cur = match r {
                r if r < 0.40 => self.next[cur][0],
                r if r < 0.65 => self.next[cur][1],
                r if r < 0.80 => self.next[cur][2],
                r if r < 0.90 => self.next[cur][3],
                _ => self.zipf.sample(rng) as usize - 1,
            };
        }
        out
    }
}

struct Sources {
    en: Markov<String>,
    zh: Markov<char>,
}

impl Sources {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut words = std::collections::BTreeSet::new();
        let mut ordered = Vec::new();
        while ordered.len() < 3000 {
            let syllables = rng.random_range(1..=3);
            let w: String = (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}{}",
                        ONSETS.choose(rng).unwrap(),
                        NUCLEI.choose(rng).unwrap(),
                        CODAS.choose(rng).unwrap()
                    )
                })
                .collect();
            if words.insert(w.clone()) {
                ordered.push(w);
            }
        }
        let chars: Vec<char> = (0..900).map(|k| char::from_u32(0x4E00 + k * 7).unwrap()).collect();
        Sources { en: Markov::new(ordered, rng), zh: Markov::new(chars, rng) }
    }

    fn en_sentence(&self, rng: &mut ChaCha8Rng, short: bool) -> String {
        let len = if short { rng.random_range(3..7) } else { rng.random_range(10..26) };
        let mut words = self.en.walk(len, rng);
        let mut first = words[0].chars();
        let cap = first.next().map(|c| c.to_ascii_uppercase().to_string() + first.as_str()).unwrap_or_default();
        words[0] = cap;
        let mut s = words.join(" ");
        if len > 12 && rng.random_bool(0.3) {
            let at = s.find(' ').unwrap_or(0);
            s.insert(at, ',');
        }
        s.push(*['.', '.', '.', '!', '?'].choose(rng).unwrap());
        s
    }

    fn zh_sentence(&self, rng: &mut ChaCha8Rng, short: bool) -> String {
        let len = if short { rng.random_range(3..8) } else { rng.random_range(12..32) };
        let mut s: String = self.zh.walk(len, rng).into_iter().collect();
        if len > 16 && rng.random_bool(0.4) {
            let at = s.char_indices().nth(len / 2).map(|(i, _)| i).unwrap();
            s.insert(at, '，');
        }
        s.push(*['。', '。', '！', '？'].choose(rng).unwrap());
        s
    }
}

fn pii(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..3) {
        0 => format!("user{}@mail{}.com", rng.random_range(10..999), rng.random_range(1..9)),
        1 => format!("https://site{}.org/page/{}", rng.random_range(1..99), rng.random_range(1..999)),
        _ => format!("+1 {}-{}-{}", rng.random_range(200..999), rng.random_range(100..999), rng.random_range(1000..9999)),
    }
}

fn noisy(mut s: String, rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..4) {
        0 => format!("<p>{s}</p>"),
        1 => {
            s.insert(0, '\u{7}');
            s
        }
        2 => {
            let c = *['!', 'a', '-', '~'].choose(rng).unwrap();
            let run: String = std::iter::repeat_n(c, rng.random_range(11..20)).collect();
            format!("{s} {run}")
        }
        _ => format!("<a href=\"x\">{s}</a>"),
    }
}

fn junk(rng: &mut ChaCha8Rng) -> String {
    const B64: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let n = rng.random_range(40..400);
    (0..n).map(|_| *B64.choose(rng).unwrap() as char).collect()
}

pub fn generate(cfg: &SynthConfig) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let src = Sources::new(&mut rng);
    let mut docs: Vec<Document> = Vec::with_capacity(cfg.docs);
    // Borrowed paragraphs stay within their language: [en, zh].
    let mut paragraphs: [Vec<String>; 2] = Default::default();
    for i in 0..cfg.docs {
        let id = format!("doc-{i:06}");
        if !docs.is_empty() && rng.random_bool(cfg.dup_fraction) {
            let j = rng.random_range(0..docs.len());
            docs.push(Document::new(id, docs[j].text.clone(), docs[j].source.clone()));
            continue;
        }
        if rng.random_bool(cfg.junk_fraction) {
            docs.push(Document::new(id, junk(&mut rng), "web-junk"));
            continue;
        }
        let zh = rng.random_bool(cfg.zh_fraction);
        let n_sent = if rng.random_bool(cfg.long_fraction) { rng.random_range(60..140) } else { rng.random_range(3..24) };
        let mut sentences: Vec<String> = (0..n_sent)
            .map(|_| {
                let short = rng.random_bool(0.08);
                let s = if zh { src.zh_sentence(&mut rng, short) } else { src.en_sentence(&mut rng, short) };
                if rng.random_bool(0.03) {
                    noisy(s, &mut rng)
                } else {
                    s
                }
            })
            .collect();
        if rng.random_bool(cfg.pii_fraction) {
            let at = rng.random_range(0..sentences.len());
            let detail = pii(&mut rng);
            sentences[at] = if zh { format!("联系{detail} {}", sentences[at]) } else { format!("Contact {detail} or {}", sentences[at]) };
        }
        let pool = &mut paragraphs[usize::from(zh)];
        if !pool.is_empty() && rng.random_bool(cfg.paragraph_dup_fraction) {
            let p = pool.choose(&mut rng).unwrap().clone();
            let at = rng.random_range(0..=sentences.len());
            sentences.insert(at, p);
        }
        if sentences.len() >= 3 && rng.random_bool(0.2) {
            let s = rng.random_range(0..=sentences.len() - 3);
            pool.push(sentences[s..s + 3].join(if zh { "" } else { " " }));
        }
        let sep = if zh { "" } else { " " };
        let text = if sentences.len() > 6 && rng.random_bool(0.5) {
            let mid = sentences.len() / 2;
            format!("{}\n\n{}", sentences[..mid].join(sep), sentences[mid..].join(sep))
        } else {
            sentences.join(sep)
        };
        docs.push(Document::new(id, text, if zh { "web-zh" } else { "web-en" }));
    }
    docs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&SynthConfig::new(50, 3));
        let b = generate(&SynthConfig::new(50, 3));
        assert_eq!(a, b);
        assert_ne!(a, generate(&SynthConfig::new(50, 4)));
        assert_eq!(a.len(), 50);
    }
}
