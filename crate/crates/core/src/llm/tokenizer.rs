//! Character-level tokenizer with reserved special tokens.
//!
//! The vocabulary file is a UTF-8 list, one symbol per line, line number =
//! id.  Multi-character lines (the specials and the chat turn markers) are
//! matched greedily, longest first; every other symbol is a single
//! character.

use std::collections::HashMap;

use crate::prompting::{ChatExample, AUDIO_TOKEN};
use crate::{Error, Result};

pub const PAD_TOKEN: &str = "<|pad|>";
pub const BOS_TOKEN: &str = "<|bos|>";
pub const EOS_TOKEN: &str = "<|eos|>";
pub const SYSTEM_MARKER: &str = "<system>";
pub const USER_MARKER: &str = "<user>";
pub const ASSISTANT_MARKER: &str = "<assistant>";

#[derive(Debug, Clone)]
pub struct Tokenizer {
    symbols: Vec<String>,
    lookup: HashMap<String, usize>,
    /// Multi-char symbol ids, sorted by descending symbol length.
    multi: Vec<usize>,
    pub pad_id: usize,
    pub bos_id: usize,
    pub eos_id: usize,
    pub audio_id: usize,
    pub system_id: usize,
    pub user_id: usize,
    pub assistant_id: usize,
}

impl Tokenizer {
    /// The vocabulary shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_lines(include_str!("../../resources/vocab.txt")).expect("builtin vocab is valid")
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let raw = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Input(format!("cannot read {}: {}", path.as_ref().display(), e)))?;
        Self::from_lines(&raw)
    }

    pub fn from_lines(raw: &str) -> Result<Self> {
        let symbols: Vec<String> = raw
            .split('\n')
            .filter(|l| !l.is_empty())
            .map(|l| l.to_string())
            .collect();
        let mut lookup = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if lookup.insert(s.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary symbol {:?}", s)));
            }
        }
        let mut multi: Vec<usize> = symbols
            .iter()
            .enumerate()
            .filter(|(_, s)| s.chars().count() > 1)
            .map(|(i, _)| i)
            .collect();
        multi.sort_by_key(|&i| std::cmp::Reverse(symbols[i].len()));
        let find = |name: &str| -> Result<usize> {
            lookup
                .get(name)
                .copied()
                .ok_or_else(|| Error::Data(format!("vocabulary missing special {:?}", name)))
        };
        Ok(Self {
            pad_id: find(PAD_TOKEN)?,
            bos_id: find(BOS_TOKEN)?,
            eos_id: find(EOS_TOKEN)?,
            audio_id: find(AUDIO_TOKEN)?,
            system_id: find(SYSTEM_MARKER)?,
            user_id: find(USER_MARKER)?,
            assistant_id: find(ASSISTANT_MARKER)?,
            symbols,
            lookup,
            multi,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(|s| s.as_str())
    }

    fn is_special(&self, id: usize) -> bool {
        self.symbols[id].chars().count() > 1
    }

    /// Greedy longest-match encoding; unknown characters are data errors.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut rest = text;
        'outer: while !rest.is_empty() {
            for &id in &self.multi {
                if rest.starts_with(self.symbols[id].as_str()) {
                    out.push(id);
                    rest = &rest[self.symbols[id].len()..];
                    continue 'outer;
                }
            }
            let c = rest.chars().next().unwrap();
            let key = c.to_string();
            match self.lookup.get(&key) {
                Some(&id) => out.push(id),
                None => return Err(Error::Data(format!("character {:?} not in vocabulary", c))),
            }
            rest = &rest[c.len_utf8()..];
        }
        Ok(out)
    }

    /// Decode ids to text; `skip_specials` drops every multi-char symbol.
    pub fn decode(&self, ids: &[usize], skip_specials: bool) -> String {
        ids.iter()
            .filter_map(|&id| {
                let s = self.symbols.get(id)?;
                if skip_specials && self.is_special(id) {
                    None
                } else {
                    Some(s.as_str())
                }
            })
            .collect()
    }
}

/// A chat example rendered to token ids with turn markers:
/// `<|bos|> <system> ... <user> ... <assistant> response <|eos|>`.
#[derive(Debug, Clone)]
pub struct EncodedChat {
    pub tokens: Vec<usize>,
    /// Number of leading tokens that form the prompt (everything through
    /// the `<assistant>` marker).
    pub prompt_len: usize,
}

impl EncodedChat {
    /// Loss mask over token positions: true for response tokens and the
    /// closing eos, false for the prompt.
    pub fn loss_mask(&self) -> Vec<bool> {
        (0..self.tokens.len()).map(|i| i >= self.prompt_len).collect()
    }
}

pub fn encode_chat(tok: &Tokenizer, example: &ChatExample) -> Result<EncodedChat> {
    let mut tokens = vec![tok.bos_id, tok.system_id];
    tokens.extend(tok.encode(&example.system)?);
    tokens.push(tok.user_id);
    tokens.extend(tok.encode(&example.user)?);
    tokens.push(tok.assistant_id);
    let prompt_len = tokens.len();
    tokens.extend(tok.encode(&example.response)?);
    tokens.push(tok.eos_id);
    Ok(EncodedChat { tokens, prompt_len })
}
