//! Vocabulary and tokenization.
//!
//! The vocabulary defines the term space shared by the first stage, the
//! expansion projection and every query/document representation. Ids are
//! dense `0..len`, with the three special markers pinned to ids 0, 1 and 2.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TermId = u32;

pub const CLS: &str = "[CLS]";
pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";

pub const CLS_ID: TermId = 0;
pub const UNK_ID: TermId = 1;
pub const PAD_ID: TermId = 2;

/// Largest vocabulary the 16-bit pruned index format can address.
pub const MAX_VOCAB: usize = 1 << 16;

const SPECIALS: [&str; 3] = [CLS, UNK, PAD];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    ids: HashMap<String, TermId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<TermId>,
    pub surface: Vec<String>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercases and splits `text` into word tokens.
///
/// A token is a maximal run of alphanumeric characters. A single `-` or `'`
/// between two alphanumerics is kept inside the token ("zzz-unknown",
/// "don't"); every other non-alphanumeric character separates tokens and is
/// dropped.
pub fn normalize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let joiner = (c == '-' || c == '\'')
            && !current.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if c.is_alphanumeric() || joiner {
            current.push(c);
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

impl Vocabulary {
    /// Builds a vocabulary from the `max_terms - 3` most frequent tokens of
    /// `corpus`. Frequency ties are broken by ascending term.
    pub fn build<I, S>(corpus: I, max_terms: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_terms < SPECIALS.len() + 1 {
            return Err(Error::InvalidConfig(format!(
                "max_terms must be at least 4, got {max_terms}"
            )));
        }
        if max_terms > MAX_VOCAB {
            return Err(Error::VocabularyTooLarge(max_terms));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut docs = 0usize;
        for doc in corpus {
            docs += 1;
            for token in normalize(doc.as_ref()) {
                *counts.entry(token).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_terms - SPECIALS.len());

        let terms = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_terms(terms)
    }

    /// Wraps an explicit term list, validating the special-marker layout.
    pub fn from_terms(terms: Vec<String>) -> Result<Self> {
        if terms.len() > MAX_VOCAB {
            return Err(Error::VocabularyTooLarge(terms.len()));
        }
        for (i, special) in SPECIALS.iter().enumerate() {
            if terms.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::InvalidVocabulary(format!(
                    "line {i} must be {special}"
                )));
            }
        }
        let mut ids = HashMap::with_capacity(terms.len());
        for (i, term) in terms.iter().enumerate() {
            if term.is_empty() || term.contains(char::is_whitespace) {
                return Err(Error::InvalidVocabulary(format!(
                    "term on line {i} is empty or contains whitespace"
                )));
            }
            if ids.insert(term.clone(), i as TermId).is_some() {
                return Err(Error::InvalidVocabulary(format!(
                    "duplicate term {term:?} on line {i}"
                )));
            }
        }
        Ok(Self { terms, ids })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn id(&self, term: &str) -> Option<TermId> {
        self.ids.get(term).copied()
    }

    pub fn term(&self, id: TermId) -> &str {
        &self.terms[id as usize]
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn tokenize(&self, text: &str) -> TokenizedText {
        let surface = normalize(text);
        let ids = surface
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect();
        TokenizedText { ids, surface }
    }

    /// One term per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.terms.iter().map(|t| t.len() + 1).sum());
        for term in &self.terms {
            out.push_str(term);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_terms(text.lines().map(str::to_owned).collect())
    }

    /// First eight bytes of the SHA-256 of the file form, little-endian.
    pub fn checksum(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frequency_order() {
        let vocab = Vocabulary::build(["cat cat dog"], 5).unwrap();
        assert_eq!(vocab.terms(), &[CLS, UNK, PAD, "cat", "dog"]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let vocab = Vocabulary::build(["b a"], 4).unwrap();
        assert_eq!(vocab.len(), 4);
        assert_eq!(vocab.term(3), "a");
        assert_eq!(vocab.id("b"), None);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(Vocabulary::build(empty, 10), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn size_limits() {
        assert!(matches!(
            Vocabulary::build(["a"], MAX_VOCAB + 1),
            Err(Error::VocabularyTooLarge(_))
        ));
        assert!(Vocabulary::build(["a"], 3).is_err());
        assert!(Vocabulary::build(["a"], MAX_VOCAB).is_ok());
    }

    #[test]
    fn tokenize_lowercases_and_drops_punctuation() {
        let vocab = Vocabulary::build(["how far does aaa tow"], 10).unwrap();
        let toks = vocab.tokenize("How far, does AAA tow");
        assert_eq!(toks.surface, ["how", "far", "does", "aaa", "tow"]);
        assert!(toks.ids.iter().all(|&id| id > PAD_ID));
    }

    #[test]
    fn tokenize_empty_and_unknown() {
        let vocab = Vocabulary::build(["cat"], 10).unwrap();
        assert!(vocab.tokenize("").is_empty());
        assert!(vocab.tokenize("  ,.;  ").is_empty());
        let toks = vocab.tokenize("zzz-unknown");
        assert_eq!(toks.ids, [UNK_ID]);
        assert_eq!(toks.surface, ["zzz-unknown"]);
    }

    #[test]
    fn trailing_and_doubled_joiners_split() {
        assert_eq!(normalize("a--b c- -d it's"), ["a", "b", "c", "d", "it's"]);
    }

    #[test]
    fn file_round_trip() {
        let vocab = Vocabulary::build(["x y z y"], 6).unwrap();
        let back = Vocabulary::from_text(&vocab.to_text()).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.checksum(), vocab.checksum());
    }

    #[test]
    fn specials_required() {
        assert!(Vocabulary::from_text("[UNK]\n[CLS]\n[PAD]\n").is_err());
        assert!(Vocabulary::from_text("[CLS]\n[UNK]\n[PAD]\na\na\n").is_err());
    }

    proptest! {
        #[test]
        fn tokenize_idempotent(text in "[a-zA-Z0-9 ,.!?'-]{0,60}") {
            let vocab = Vocabulary::build([text.as_str(), "a"], 50).unwrap();
            let first = vocab.tokenize(&text);
            let again = vocab.tokenize(&first.surface.join(" "));
            prop_assert_eq!(&first, &again);
            prop_assert_eq!(first.ids.len(), first.surface.len());
        }

        #[test]
        fn corpus_tokens_never_pad(docs in proptest::collection::vec("[a-z ]{1,30}", 1..5), max in 4usize..20) {
            let vocab = Vocabulary::build(&docs, max).unwrap();
            for doc in &docs {
                prop_assert!(vocab.tokenize(doc).ids.iter().all(|&id| id != PAD_ID && (id as usize) < vocab.len()));
            }
        }
    }
}
