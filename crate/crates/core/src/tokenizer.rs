//! Lowercasing byte-level BPE tokenizer producing fixed-length sequences.
//!
//! Text is whitespace-collapsed and lowercased, split into words, and each
//! word is mapped through the reversible byte-to-unicode table before merges
//! are applied. The last symbol of a word carries the `</w>` end-of-word
//! marker. Every byte has a base token, so any string tokenizes.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

pub const SOT_TOKEN: &str = "<|startoftext|>";
pub const EOT_TOKEN: &str = "<|endoftext|>";
pub const END_OF_WORD: &str = "</w>";
pub const PAD_ID: u32 = 0;
pub const DEFAULT_CONTEXT_LENGTH: usize = 77;

/// Reversible byte → printable character table.
pub fn byte_to_unicode() -> &'static [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = ['\0'; 256];
        let printable = |b: u32| (33..=126).contains(&b) || (161..=172).contains(&b) || (174..=255).contains(&b);
        let mut extra = 0;
        for b in 0..256u32 {
            table[b as usize] = if printable(b) {
                char::from_u32(b).unwrap()
            } else {
                extra += 1;
                char::from_u32(255 + extra).unwrap()
            };
        }
        table
    })
}

fn unicode_to_byte() -> &'static HashMap<char, u8> {
    static TABLE: OnceLock<HashMap<char, u8>> = OnceLock::new();
    TABLE.get_or_init(|| {
        byte_to_unicode()
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect()
    })
}

fn word_pattern() -> &'static Regex {
    static PAT: OnceLock<Regex> = OnceLock::new();
    PAT.get_or_init(|| {
        Regex::new(r"<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+")
            .unwrap()
    })
}

fn whitespace() -> &'static Regex {
    static WS: OnceLock<Regex> = OnceLock::new();
    WS.get_or_init(|| Regex::new(r"\s+").unwrap())
}

/// The 512 byte-level base units: each byte alone and with the end-of-word marker.
pub fn base_units() -> impl Iterator<Item = String> {
    let table = byte_to_unicode();
    table
        .iter()
        .map(|c| c.to_string())
        .chain(table.iter().map(|c| format!("{c}{END_OF_WORD}")))
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), usize>,
    sot_id: u32,
    eot_id: u32,
    context_length: usize,
}

impl Vocabulary {
    pub fn new(token_to_id: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        let size = token_to_id.len();
        let mut id_to_token = vec![None; size];
        for (token, &id) in &token_to_id {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| Error::Vocab(format!("id {id} of {token:?} outside [0, {size})")))?;
            if let Some(prev) = slot.replace(token.clone()) {
                return Err(Error::Vocab(format!("id {id} used by both {prev:?} and {token:?}")));
            }
        }
        // `size` slots each filled at most once by `size` tokens: all filled
        let id_to_token: Vec<String> = id_to_token.into_iter().map(Option::unwrap).collect();

        let lookup = |t: &str| {
            token_to_id
                .get(t)
                .copied()
                .ok_or_else(|| Error::Vocab(format!("missing special token {t:?}")))
        };
        let sot_id = lookup(SOT_TOKEN)?;
        let eot_id = lookup(EOT_TOKEN)?;
        if let Some(unit) = base_units().find(|u| !token_to_id.contains_key(u)) {
            return Err(Error::Vocab(format!("missing byte-level base unit {unit:?}")));
        }

        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            for part in [a.as_str(), b.as_str(), &format!("{a}{b}")] {
                if !token_to_id.contains_key(part) {
                    return Err(Error::Vocab(format!(
                        "merge {} ({a:?} {b:?}) references unknown token {part:?}",
                        rank + 1
                    )));
                }
            }
            merge_ranks.entry((a.clone(), b.clone())).or_insert(rank);
        }

        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            merges,
            merge_ranks,
            sot_id,
            eot_id,
            context_length: DEFAULT_CONTEXT_LENGTH,
        })
    }

    pub fn with_context_length(mut self, context_length: usize) -> Result<Self> {
        if context_length < 2 {
            return Err(Error::Vocab(format!(
                "context length {context_length} cannot hold start and end tokens"
            )));
        }
        self.context_length = context_length;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn sot_id(&self) -> u32 {
        self.sot_id
    }

    pub fn eot_id(&self) -> u32 {
        self.eot_id
    }

    pub fn context_length(&self) -> usize {
        self.context_length
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// `vocab.json` content, keys sorted.
    pub fn vocab_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = self
            .token_to_id
            .iter()
            .map(|(k, v)| (k.clone(), (*v).into()))
            .collect();
        serde_json::to_string(&map).expect("string map serializes")
    }

    /// `merges.txt` content with the conventional version header.
    pub fn merges_txt(&self) -> String {
        let mut out = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            out.push_str(a);
            out.push(' ');
            out.push_str(b);
            out.push('\n');
        }
        out
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut symbols: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = symbols.last_mut() {
            last.push_str(END_OF_WORD);
        }
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            let Some((first, second)) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == first && symbols[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// BPE ids of `text` without start/end tokens or truncation.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let cleaned = normalize(text);
        let table = byte_to_unicode();
        let mut ids = Vec::new();
        for piece in word_pattern().find_iter(&cleaned) {
            let piece = piece.as_str();
            if piece == SOT_TOKEN {
                ids.push(self.sot_id);
                continue;
            }
            if piece == EOT_TOKEN {
                ids.push(self.eot_id);
                continue;
            }
            let mapped: String = piece.bytes().map(|b| table[b as usize]).collect();
            // every symbol produced by bpe is a base unit or a merge result, both validated
            ids.extend(self.bpe(&mapped).iter().map(|s| self.token_to_id[s]));
        }
        ids
    }

    /// Inverse of [`Vocabulary::encode`] up to whitespace normalization.
    /// A leading start token is skipped and decoding stops at the end token.
    pub fn decode(&self, ids: &[u32]) -> String {
        let reverse = unicode_to_byte();
        let ids = ids.strip_prefix(&[self.sot_id]).unwrap_or(ids);
        let mut bytes = Vec::new();
        for token in ids.iter().take_while(|&&id| id != self.eot_id).filter_map(|&id| self.token(id)) {
            let (body, end) = match token.strip_suffix(END_OF_WORD) {
                Some(body) => (body, true),
                None => (token, false),
            };
            bytes.extend(body.chars().filter_map(|c| reverse.get(&c).copied()));
            if end {
                bytes.push(b' ');
            }
        }
        String::from_utf8_lossy(&bytes).trim().to_string()
    }
}

/// Whitespace runs collapse to one space, ends are trimmed, then lowercase.
pub fn normalize(text: &str) -> String {
    whitespace().replace_all(text, " ").trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    content_len: usize,
}

impl TokenSequence {
    /// Builds a sequence from explicit ids, checking the layout invariants.
    pub fn from_ids(ids: Vec<u32>, sot_id: u32, eot_id: u32) -> Result<Self> {
        let content_len = ids
            .iter()
            .position(|&id| id == eot_id)
            .map(|p| p + 1)
            .ok_or_else(|| Error::InvalidArgument("sequence has no end token".into()))?;
        if ids.first() != Some(&sot_id) {
            return Err(Error::InvalidArgument("sequence does not start with the start token".into()));
        }
        if ids[content_len..].iter().any(|&id| id != PAD_ID) {
            return Err(Error::InvalidArgument("non-pad id after the end token".into()));
        }
        Ok(TokenSequence { ids, content_len })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Occupied slots, start and end tokens included.
    pub fn content_len(&self) -> usize {
        self.content_len
    }

    pub fn context_length(&self) -> usize {
        self.ids.len()
    }

    /// BPE ids between the start and end tokens.
    pub fn content(&self) -> &[u32] {
        &self.ids[1..self.content_len - 1]
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut content = vocab.encode(text);
    content.truncate(vocab.context_length - 2);
    let mut ids = Vec::with_capacity(vocab.context_length);
    ids.push(vocab.sot_id);
    ids.extend_from_slice(&content);
    ids.push(vocab.eot_id);
    let content_len = ids.len();
    ids.resize(vocab.context_length, PAD_ID);
    TokenSequence { ids, content_len }
}

fn parse_merges(text: &str) -> Result<Vec<(String, String)>> {
    let mut merges = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.starts_with("#version") || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                merges.push((a.to_string(), b.to_string()));
            }
            _ => {
                return Err(Error::Vocab(format!(
                    "malformed merge on line {}: {line:?}",
                    index + 1
                )))
            }
        }
    }
    Ok(merges)
}

/// Loads `vocab.json` (token → id) and `merges.txt` (one merge per line, rank order).
pub fn load_vocab(vocab_path: &Path, merges_path: &Path) -> Result<Vocabulary> {
    let read = |p: &Path| {
        std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))
    };
    let token_to_id: HashMap<String, u32> = serde_json::from_str(&read(vocab_path)?)
        .map_err(|e| Error::Vocab(format!("{}: {e}", vocab_path.display())))?;
    let merges = parse_merges(&read(merges_path)?)?;
    Vocabulary::new(token_to_id, merges)
}
