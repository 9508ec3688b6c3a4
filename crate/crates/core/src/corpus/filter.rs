//! Per-document filters: privacy scrubbing, markup/noise cleaning and the
//! codepoint-ratio language heuristic.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::document::{Document, Lang};

pub const EMAIL_PATTERN: &str = r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}";
pub const URL_PATTERN: &str = r"https?://\S+|www\.\S+";
pub const PHONE_PATTERN: &str = r"(\+?\d[\d\s-]{7,}\d)";
pub const HTML_TAG_PATTERN: &str = r"<[^>]{1,128}>";

static PRIVACY: LazyLock<[Regex; 3]> = LazyLock::new(|| {
    [EMAIL_PATTERN, URL_PATTERN, PHONE_PATTERN].map(|p| Regex::new(p).expect("valid pattern"))
});
static HTML_TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(HTML_TAG_PATTERN).expect("valid pattern"));
static SPACE_RUN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[ \t]{2,}").expect("valid pattern"));

/// True if any privacy pattern matches `text`.
pub fn has_private_data(text: &str) -> bool {
    PRIVACY.iter().any(|re| re.is_match(text))
}

/// Replaces every email, URL and phone match with a single space.
///
/// Removing one match can join its neighbours into a new one, so
/// replacement repeats until nothing matches; that makes it idempotent.
pub fn scrub_text(text: &str) -> String {
    let mut out = text.to_string();
    while has_private_data(&out) {
        for re in PRIVACY.iter() {
            out = re.replace_all(&out, " ").into_owned();
        }
    }
    out
}

pub fn scrub_privacy(doc: &Document) -> Document {
    doc.with_text(scrub_text(&doc.text))
}

pub fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{3400}'..='\u{4DBF}'
        | '\u{4E00}'..='\u{9FFF}'
        | '\u{F900}'..='\u{FAFF}'
        | '\u{3000}'..='\u{303F}'
        | '\u{FF00}'..='\u{FFEF}'
        | '\u{20000}'..='\u{2A6DF}')
}

/// Splits after `.`, `!` or `?` followed by whitespace (or end of text),
/// and after `。`, `！` or `？` unconditionally. Each piece keeps its
/// terminator and the whitespace that follows, so the pieces concatenate
/// back to the input.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let next = chars.peek().map(|&(_, n)| n);
        let ends = match c {
            '。' | '！' | '？' => true,
            '.' | '!' | '?' => next.is_none_or(char::is_whitespace),
            _ => false,
        };
        if !ends {
            continue;
        }
        let mut end = i + c.len_utf8();
        while let Some(&(j, n)) = chars.peek() {
            if !n.is_whitespace() {
                break;
            }
            end = j + n.len_utf8();
            chars.next();
        }
        pieces.push(&text[start..end]);
        start = end;
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

/// CJK characters plus whitespace-separated tokens of everything else.
pub fn word_count(sentence: &str) -> usize {
    let cjk = sentence.chars().filter(|&c| is_cjk(c)).count();
    let rest: String = sentence.chars().map(|c| if is_cjk(c) { ' ' } else { c }).collect();
    cjk + rest.split_whitespace().count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleanConfig {
    pub min_words: usize,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig { min_words: 10 }
    }
}

/// Tag and control-character stripping, whitespace normalization and
/// short-sentence removal. Returns `None` when nothing survives.
pub fn clean_text(text: &str, cfg: &CleanConfig) -> Option<String> {
    let stripped = HTML_TAG.replace_all(text, " ");
    let stripped: String = stripped.chars().filter(|&c| !c.is_control() || c == '\n' || c == '\t').collect();
    let normalized: Vec<String> =
        stripped.lines().map(|l| SPACE_RUN.replace_all(l, " ").trim().to_string()).collect();
    let normalized = normalized.join("\n");
    let kept: String = split_sentences(&normalized).into_iter().filter(|s| word_count(s) >= cfg.min_words).collect();
    let kept = kept.trim();
    (!kept.is_empty()).then(|| kept.to_string())
}

pub fn clean_internet(doc: &Document, cfg: &CleanConfig) -> Option<Document> {
    clean_text(&doc.text, cfg).map(|t| doc.with_text(t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangConfig {
    pub zh_ratio: f64,
    pub en_ratio: f64,
    pub min_chars: usize,
    /// Longest mean whitespace-token length still read as prose.
    pub max_mean_word_len: f64,
}

impl Default for LangConfig {
    fn default() -> Self {
        LangConfig { zh_ratio: 0.3, en_ratio: 0.6, min_chars: 20, max_mean_word_len: 15.0 }
    }
}

/// Ratios are taken over non-whitespace codepoints.
pub fn classify_text(text: &str, cfg: &LangConfig) -> Lang {
    if text.chars().count() < cfg.min_chars {
        return Lang::Unknown;
    }
    let visible = text.chars().filter(|c| !c.is_whitespace()).count();
    if visible == 0 {
        return Lang::Other;
    }
    let cjk = text.chars().filter(|&c| is_cjk(c)).count();
    if cjk as f64 / visible as f64 >= cfg.zh_ratio {
        return Lang::Zh;
    }
    let letters = text.chars().filter(char::is_ascii_alphabetic).count();
    let words = text.split_whitespace().count().max(1);
    let mean_len = visible as f64 / words as f64;
    if letters as f64 / visible as f64 >= cfg.en_ratio && mean_len <= cfg.max_mean_word_len {
        Lang::En
    } else {
        Lang::Other
    }
}

pub fn classify_lang(doc: &Document, cfg: &LangConfig) -> Lang {
    classify_text(&doc.text, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn email_is_scrubbed() {
        assert_eq!(scrub_text("mail me at a@b.com now"), "mail me at   now");
        assert_eq!(scrub_text("nothing to see here"), "nothing to see here");
        assert_eq!(scrub_text("see https://x.org/a?b=1 or www.y.cn"), "see   or  ");
    }

    #[test]
    fn scrub_reaches_fixpoint() {
        let once = scrub_text("call 1234 a@b.com 5678 today");
        assert!(!has_private_data(&once));
        assert_eq!(scrub_text(&once), once);
    }

    #[test]
    fn splitter_keeps_decimal_points_and_splits_cjk() {
        let s = "Pi is 3.14 today. Next one! 你好。世界？ end";
        let parts = split_sentences(s);
        assert_eq!(parts, vec!["Pi is 3.14 today. ", "Next one! ", "你好。", "世界？ ", "end"]);
        assert_eq!(parts.concat(), s);
    }

    #[test]
    fn tags_alone_are_dropped() {
        assert_eq!(clean_text("<div>hello</div>", &CleanConfig::default()), None);
        let fifteen = "one two three four five six seven eight nine ten eleven twelve thirteen fourteen fifteen.";
        assert_eq!(clean_text(fifteen, &CleanConfig::default()).as_deref(), Some(fifteen));
    }

    #[test]
    fn cjk_words_are_characters() {
        assert_eq!(word_count("我们今天去公园散步吧。"), 11);
        assert_eq!(word_count("ok 好的"), 3);
    }

    #[test]
    fn language_heuristic() {
        let cfg = LangConfig::default();
        assert_eq!(classify_text("The quick brown fox jumps over the lazy dog again.", &cfg), Lang::En);
        assert_eq!(classify_text("今天天气很好我们一起去公园散步然后回家吃饭吧", &cfg), Lang::Zh);
        assert_eq!(classify_text("short", &cfg), Lang::Unknown);
        assert_eq!(classify_text("QUJDREVGR0hJSktMTU5PUFFSU1RVVldYWVo0NTY3ODkrLw==", &cfg), Lang::Other);
    }
}
