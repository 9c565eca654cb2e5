//! Lowercase word tokenizer and the closed vocabulary.

use std::collections::{BTreeSet, HashMap};

use crate::grammar;
use crate::scene::SceneGenConfig;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const IMG: &str = "<img>";
pub const USER: &str = "USER:";
pub const ASSISTANT: &str = "ASSISTANT:";
pub const SPECIALS: [&str; 6] = [UNK, BOS, EOS, IMG, USER, ASSISTANT];

const PUNCT: &[char] = &['[', ']', ',', '?', ':', ';', '.', '!', '(', ')'];

/// Splits text into tokens. Role markers are matched case-sensitively;
/// everything else is lowercased and punctuation becomes its own token,
/// except a `.` between two digits.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if word == USER || word == ASSISTANT {
            out.push(word.to_string());
            continue;
        }
        let chars: Vec<char> = word.to_lowercase().chars().collect();
        let mut cur = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let decimal_point = c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(char::is_ascii_digit);
            if PUNCT.contains(&c) && !decimal_point {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Inverse of [`tokenize`] for canonically formatted text: no spaces
/// inside brackets, and `, . ? : ; !` attach to the preceding token.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut bracket = 0usize;
    let mut prev_open = false;
    for tok in tokens {
        let t = tok.as_ref();
        let attach = prev_open
            || bracket > 0
            || matches!(t, "," | "." | "?" | ":" | ";" | "!" | "]" | ")");
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(t);
        match t {
            "[" | "(" => {
                bracket += usize::from(t == "[");
                prev_open = true;
            }
            "]" => {
                bracket = bracket.saturating_sub(1);
                prev_open = false;
            }
            _ => prev_open = false,
        }
    }
    out
}

/// Two-decimal coordinates `0.00..=1.00` as they appear in region references.
pub fn coordinate_tokens() -> impl Iterator<Item = String> {
    (0..=100).map(|i| format!("{:.2}", i as f64 / 100.0))
}

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every word reachable from the templates and
    /// the scene configuration, in sorted order.
    pub fn from_config(config: &SceneGenConfig) -> Self {
        let mut words = BTreeSet::new();
        for t in grammar::ALL_TEMPLATES {
            words.extend(tokenize(&grammar::literal_text(t)));
        }
        for w in grammar::RANGE_WORDS.iter().chain(grammar::EXTRA_WORDS) {
            words.insert(w.to_string());
        }
        words.extend(config.scene_vocab.iter().cloned());
        words.extend(config.object_vocab.iter().cloned());
        words.extend(coordinate_tokens());
        for p in PUNCT {
            words.insert(p.to_string());
        }
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).chain(words).collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of a special token that every vocabulary built here contains.
    pub fn special(&self, token: &str) -> usize {
        self.id(token).unwrap_or_else(|| panic!("vocabulary lacks special {token}"))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let unk = self.id(UNK).unwrap_or(0);
        tokenize(text).iter().map(|t| self.id(t).unwrap_or(unk)).collect()
    }

    /// Joins non-special tokens back into text.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .map(|&i| self.token(i))
            .filter(|t| !matches!(*t, UNK | BOS | EOS | IMG))
            .collect();
        detokenize(&toks)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_reference_tokens() {
        let toks = tokenize("Chair region [0.10,0.25,0.50,1.00]?");
        assert_eq!(
            toks,
            ["chair", "region", "[", "0.10", ",", "0.25", ",", "0.50", ",", "1.00", "]", "?"]
        );
        assert_eq!(detokenize(&toks), "chair region [0.10,0.25,0.50,1.00]?");
    }

    #[test]
    fn sentences_round_trip() {
        for s in [
            "this is a depth map of a kitchen. it contains a chair, a lamp and a desk. from near to far: lamp, chair, desk.",
            "which is farther: sofa region [0.00,0.00,0.50,0.50] or bed region [0.50,0.50,1.00,1.00]?",
            "USER: what object is in region [0.12,0.34,0.56,0.78]? ASSISTANT: a chair.",
        ] {
            assert_eq!(detokenize(&tokenize(s)), s);
        }
    }

    #[test]
    fn templates_are_closed_under_the_vocab() {
        let cfg = SceneGenConfig::default();
        let v = Vocab::from_config(&cfg);
        let unk = v.special(UNK);
        let text = "which is farther: chair region [0.00,0.13,0.47,1.00] or lounge? a depth map of a kitchen";
        assert!(v.encode(text).iter().all(|&i| i != unk));
        assert_eq!(v.decode(&v.encode(text)), text);
        assert_eq!(v.encode("zebra"), vec![unk]);
    }

    #[test]
    fn vocab_size_is_modest() {
        let v = Vocab::from_config(&SceneGenConfig::default());
        assert!(v.len() < 200, "{}", v.len());
    }
}
