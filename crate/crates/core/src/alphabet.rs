//! The 37-symbol output alphabet: `A`–`Z`, `0`–`9`, then PAD.

use crate::{Error, Result};

pub const ALPHABET_SIZE: usize = 37;
pub const PAD_INDEX: usize = 36;

const SYMBOLS: &[u8; 36] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Alphabet;

impl Alphabet {
    pub fn size(self) -> usize {
        ALPHABET_SIZE
    }

    pub fn index_of(self, c: char) -> Result<usize> {
        match c {
            'A'..='Z' => Ok(c as usize - 'A' as usize),
            '0'..='9' => Ok(26 + c as usize - '0' as usize),
            _ => Err(Error::Alphabet(c)),
        }
    }

    /// `None` for PAD.
    pub fn symbol(self, index: usize) -> Option<char> {
        SYMBOLS.get(index).map(|&b| b as char)
    }

    pub fn contains(self, c: char) -> bool {
        self.index_of(c).is_ok()
    }

    /// Characters that a label may contain (everything except PAD).
    pub fn characters(self) -> impl Iterator<Item = char> {
        SYMBOLS.iter().map(|&b| b as char)
    }

    pub fn validate(self, word: &str) -> Result<()> {
        word.chars().try_for_each(|c| self.index_of(c).map(|_| ()))
    }

    /// Label indices padded with PAD up to `len`.
    pub fn encode_padded(self, word: &str, len: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(len);
        for c in word.chars() {
            out.push(self.index_of(c)?);
        }
        if out.len() > len {
            return Err(Error::Contract(format!(
                "label {word:?} longer than {len} positions"
            )));
        }
        out.resize(len, PAD_INDEX);
        Ok(out)
    }
}
