//! Whitespace tokenizer over the caption-grammar vocabulary.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const PRIMITIVES: [&str; 4] = ["sphere", "cube", "cone", "torus"];

const RESERVED: [&str; 3] = ["<pad>", "<bos>", "<eos>"];
const FUNCTION_WORDS: [&str; 13] =
    ["a", "photo", "of", "point", "cloud", "and", "above", "below", "to", "the", "left", "right", "next"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// The vocabulary of the synthetic caption grammar.
    pub fn grammar() -> Self {
        let words = RESERVED
            .iter()
            .chain(FUNCTION_WORDS.iter())
            .chain(COLORS.iter())
            .chain(SHAPES.iter())
            .chain(PRIMITIVES.iter())
            .map(|s| s.to_string())
            .collect();
        Self::from_tokens(words).expect("grammar vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[..3] != RESERVED.map(String::from) {
            return Err(Error::Invalid(format!("vocabulary must start with {RESERVED:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Invalid(format!("bad vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Newline-separated tokens; line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index.get(token).copied().ok_or_else(|| Error::OutOfVocabulary(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Content ids without framing.
    pub fn encode_words(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(&w.to_lowercase())).collect()
    }

    /// `[BOS, content..., EOS]`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        ids.extend(self.encode_words(text)?);
        ids.push(EOS);
        Ok(ids)
    }

    /// Joins content tokens; framing and padding ids are dropped and
    /// decoding stops at the first EOS.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => {}
                _ => words.extend(self.token(id)),
            }
        }
        words.join(" ")
    }
}
