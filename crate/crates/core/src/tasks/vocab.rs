use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;

/// Every character either generator or prompt scaffold can emit.
const ALPHABET: &str = "Question: Output the parity of this sequence.\nInput: Answer:\
                        Evaluate this expression modulo 10.0123456789+-*()= ";

/// Character-level vocabulary with reserved padding and end-of-sequence ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

impl Vocab {
    /// The vocabulary shared by both tasks: the reserved ids, then the sorted
    /// character set.
    pub fn standard() -> Self {
        let mut chars: Vec<char> = ALPHABET.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        let ids = chars.iter().enumerate().map(|(i, &c)| (c, i + 2)).collect();
        Vocab { chars, ids }
    }

    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.ids.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.char_indices()
            .map(|(offset, ch)| self.id(ch).ok_or(Error::Tokenize { ch, offset }))
            .collect()
    }

    /// Inverse of [`Vocab::encode`]. Reserved ids are rejected.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                id.checked_sub(2)
                    .and_then(|i| self.chars.get(i).copied())
                    .ok_or_else(|| Error::param(format!("token id {id} has no text")))
            })
            .collect()
    }

    /// Ids of the ten digit characters, in digit order.
    pub fn digit_ids(&self) -> Result<[usize; 10]> {
        let mut out = [0; 10];
        for (d, slot) in out.iter_mut().enumerate() {
            let c = char::from(b'0' + d as u8);
            *slot = self
                .id(c)
                .ok_or_else(|| Error::Config(format!("digit {c} is missing from the vocabulary")))?;
        }
        Ok(out)
    }
}
