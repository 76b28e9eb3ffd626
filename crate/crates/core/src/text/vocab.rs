//! Closed word-level vocabulary and tokenizer.
//!
//! Words are split on whitespace; a trailing `.`, `,`, `:` or `;` becomes its
//! own token and is re-attached to the preceding word on detokenization.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{ModelError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<mask>"];

const ATTACHED_PUNCTUATION: [char; 4] = ['.', ',', ':', ';'];

/// Bijection between token strings and ids; ids 0–3 are reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in order, skipping duplicates.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|s| s.as_ref().to_string()))
        {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.tokens.len());
                v.tokens.push(w);
            }
        }
        v
    }

    /// Every word any prompt or answer template can produce, sorted.
    pub fn synthetic() -> Self {
        let mut words: Vec<String> = Vec::new();
        for text in super::prompt::template_corpus() {
            for piece in split_words(&text) {
                words.push(piece.to_string());
            }
        }
        words.sort();
        words.dedup();
        words.retain(|w| !RESERVED.contains(&w.as_str()));
        Vocabulary::new(words)
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

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[BOS, ids…, EOS]`; unknown words are a lexical error naming the word.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        for w in split_words(text) {
            ids.push(
                self.id(w)
                    .ok_or_else(|| ModelError::Lexical(w.to_string()))?,
            );
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Inverse of [`tokenize`](Self::tokenize); PAD, BOS and EOS are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let tok = self
                .token(id)
                .ok_or_else(|| ModelError::Lexical(format!("<id {id}>")))?;
            let attach = tok.len() == 1 && tok.starts_with(ATTACHED_PUNCTUATION);
            if !out.is_empty() && !attach {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }

    /// One token per line; line number is the id.
    pub fn to_file_contents(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_contents(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(ModelError::Data(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let v = Vocabulary::new(tokens.iter().skip(RESERVED.len()));
        if v.len() != tokens.len() {
            return Err(ModelError::Data(
                "vocabulary contains duplicate tokens".into(),
            ));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_file_contents())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Data(format!("{}: {e}", path.display())))?;
        Vocabulary::from_file_contents(&text)
    }
}

fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(|w| {
        let last = w.chars().last().expect("non-empty word");
        if w.len() > 1 && ATTACHED_PUNCTUATION.contains(&last) {
            let cut = w.len() - last.len_utf8();
            [Some(&w[..cut]), Some(&w[cut..])]
        } else {
            [Some(w), None]
        }
        .into_iter()
        .flatten()
    })
}
