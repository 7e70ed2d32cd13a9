//! Fixed word-level tokenizer for the student model.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const SEP: u32 = 3;
pub const EOS: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<sep>", "<eos>"];

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<and>|[a-z0-9]+(?:'[a-z]+)?|\S").expect("valid regex"))
}

/// Lower-cases and splits into words, `<and>` separators and single
/// punctuation marks.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    token_regex()
        .find_iter(&lower)
        .map(|m| m.as_str().to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Specials followed by every distinct token of `texts`, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(tokenize(t));
        }
        for s in SPECIALS {
            words.remove(s);
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or("<unk>")
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with spaces, attaching punctuation to the previous word
    /// and dropping specials.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id <= EOS {
                continue;
            }
            let t = self.token(id);
            let attach = matches!(t, "." | "," | "!" | "?" | ";" | ":");
            if !out.is_empty() && !attach {
                out.push(' ');
            }
            out.push_str(t);
        }
        out
    }

    /// `<bos> prompt <sep>`, the decoding context.
    pub fn encode_prompt(&self, prompt: &str) -> Vec<u32> {
        let mut v = vec![BOS];
        v.extend(self.encode(prompt));
        v.push(SEP);
        v
    }

    /// Full training sequence with targets `target <eos>`.
    pub fn encode_example(&self, image: &[u32], prompt: &str, target: &str) -> Example {
        let mut text = self.encode_prompt(prompt);
        let target_start = text.len();
        text.extend(self.encode(target));
        text.push(EOS);
        Example {
            image: image.to_vec(),
            text,
            target_start,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&self.tokens)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let tokens: Vec<String> = serde_json::from_slice(&std::fs::read(path)?)?;
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Checkpoint("vocabulary lacks the special tokens".into()));
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// One tokenized sequence. `text[target_start..]` are the supervised
/// positions; each is predicted from the position before it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub image: Vec<u32>,
    pub text: Vec<u32>,
    pub target_start: usize,
}

impl Example {
    pub fn n_targets(&self) -> usize {
        self.text.len().saturating_sub(self.target_start)
    }

    pub fn len(&self) -> usize {
        self.image.len() + self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_keeps_separator_and_punctuation() {
        assert_eq!(
            tokenize("Separated by '<and>'. I'll go, Yes!"),
            ["separated", "by", "'", "<and>", "'", ".", "i'll", "go", ",", "yes", "!"]
        );
    }

    #[test]
    fn decode_reattaches_punctuation() {
        let v = Vocab::build(["yes, the image is rightly used. fine"]);
        let ids = v.encode("yes, the image is rightly used. fine");
        assert_eq!(v.decode(&ids), "yes, the image is rightly used. fine");
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::build(["alpha beta"]);
        assert_eq!(v.encode("alpha gamma"), vec![v.id("alpha"), UNK]);
    }

    #[test]
    fn example_layout() {
        let v = Vocab::build(["a b c"]);
        let ex = v.encode_example(&[7, 8], "a b", "c");
        assert_eq!(ex.text, vec![BOS, v.id("a"), v.id("b"), SEP, v.id("c"), EOS]);
        assert_eq!(ex.target_start, 4);
        assert_eq!(ex.n_targets(), 2);
        assert_eq!(ex.len(), 8);
    }
}
