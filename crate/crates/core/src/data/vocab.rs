use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "</s>";

pub fn bos_token(lang: &str) -> String {
    format!("<bos_{lang}>")
}

fn parse_bos(token: &str) -> Option<&str> {
    token.strip_prefix("<bos_")?.strip_suffix('>')
}

/// Token/ID mapping with reserved specials and one BOS token per language.
///
/// IDs are dense. New tokens and languages are only ever appended, so an
/// older vocabulary is always a prefix of a grown one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    languages: Vec<String>,
    bos: Vec<usize>,
}

impl Vocabulary {
    pub fn new(languages: &[&str]) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            languages: Vec::new(),
            bos: Vec::new(),
        };
        for t in [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN] {
            v.insert_raw(t.to_string());
        }
        for l in languages {
            v.add_language(l);
        }
        v
    }

    fn insert_raw(&mut self, t: String) -> usize {
        let id = self.tokens.len();
        self.index.insert(t.clone(), id);
        self.tokens.push(t);
        id
    }

    /// Register a language (and its BOS token); returns its language id.
    pub fn add_language(&mut self, code: &str) -> usize {
        if let Some(i) = self.language_id(code) {
            return i;
        }
        let id = self.insert_raw(bos_token(code));
        self.languages.push(code.to_string());
        self.bos.push(id);
        self.languages.len() - 1
    }

    /// ID of `token`, inserting it if new.
    pub fn add_token(&mut self, token: &str) -> Result<usize> {
        if let Some(&id) = self.index.get(token) {
            if self.is_special(id) {
                return Err(Error::Data(format!("reserved token `{token}` inside a sentence")));
            }
            return Ok(id);
        }
        if parse_bos(token).is_some() || token.is_empty() || token.contains(char::is_whitespace) {
            return Err(Error::Data(format!("invalid surface token `{token}`")));
        }
        Ok(self.insert_raw(token.to_string()))
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// ID of `token`, or UNK.
    pub fn id_or_unk(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&id) if !self.is_special(id) => id,
            _ => UNK,
        }
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn language_id(&self, code: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == code)
    }

    pub fn require_language(&self, code: &str) -> Result<usize> {
        self.language_id(code)
            .ok_or_else(|| Error::Data(format!("unknown language `{code}`")))
    }

    pub fn bos(&self, lang: usize) -> usize {
        self.bos[lang]
    }

    /// PAD, UNK, EOS and every BOS.
    pub fn is_special(&self, id: usize) -> bool {
        id <= EOS || self.bos.contains(&id)
    }

    pub fn encode(&self, words: &[&str]) -> Vec<usize> {
        words.iter().map(|w| self.id_or_unk(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// `true` when `self` is a prefix of `other` (IDs preserved).
    pub fn is_prefix_of(&self, other: &Vocabulary) -> bool {
        self.tokens.len() <= other.tokens.len()
            && self.tokens.iter().zip(&other.tokens).all(|(a, b)| a == b)
            && self.languages.iter().zip(&other.languages).all(|(a, b)| a == b)
    }

    /// One token per line; line number is the ID.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            languages: Vec::new(),
            bos: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || v.index.contains_key(line) {
                return Err(Error::Parse {
                    path: "<vocab>".into(),
                    line: i + 1,
                    msg: format!("empty or duplicate token `{line}`"),
                });
            }
            let id = v.insert_raw(line.to_string());
            if let Some(code) = parse_bos(line) {
                v.languages.push(code.to_string());
                v.bos.push(id);
            }
        }
        let specials_ok = v.tokens.len() >= 3
            && v.tokens[PAD] == PAD_TOKEN
            && v.tokens[UNK] == UNK_TOKEN
            && v.tokens[EOS] == EOS_TOKEN;
        if !specials_ok {
            return Err(Error::Data("vocabulary must start with <pad>, <unk>, </s>".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        for line in BufReader::new(std::fs::File::open(path)?).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_layout_and_roundtrip() {
        let mut v = Vocabulary::new(&["en", "de"]);
        assert_eq!(v.id(PAD_TOKEN), Some(PAD));
        assert_eq!(v.bos(0), 3);
        assert_eq!(v.bos(1), 4);
        let a = v.add_token("haus").unwrap();
        assert_eq!(a, 5);
        assert_eq!(v.add_token("haus").unwrap(), 5);
        assert!(v.add_token("<bos_en>").is_err());
        assert!(v.add_token("<bos_fr>").is_err());
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert_eq!(v.id_or_unk("nope"), UNK);
        assert_eq!(v.id_or_unk("<bos_en>"), UNK);
    }

    #[test]
    fn growth_preserves_prefix() {
        let mut v = Vocabulary::new(&["en"]);
        v.add_token("a").unwrap();
        let old = v.clone();
        v.add_language("xx");
        v.add_token("b").unwrap();
        assert!(old.is_prefix_of(&v));
        assert!(!v.is_prefix_of(&old));
        assert_eq!(v.language_id("xx"), Some(1));
        assert_eq!(v.bos(1), 5);
    }

    #[test]
    fn malformed_vocab_rejected() {
        assert!(Vocabulary::from_text("a\nb\n").is_err());
        assert!(Vocabulary::from_text("<pad>\n<unk>\n</s>\nx\nx\n").is_err());
    }
}
