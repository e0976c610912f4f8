//! Token vocabularies with reserved special ids.

use std::collections::HashMap;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;

pub const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

/// Word list whose first four entries are the reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by `words`, skipping duplicates.
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in SPECIALS.iter().copied().map(str::to_owned).chain(words.into_iter().map(|w| w.as_ref().to_owned())) {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Unknown words map to [`UNK`].
    pub fn encode(&self, words: &[impl AsRef<str>]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref()).unwrap_or(UNK)).collect()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.word(i).unwrap_or(SPECIALS[UNK]).to_owned()).collect()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}
