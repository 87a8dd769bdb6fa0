// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE tokenizer (GPT-2 vocabulary format) and clean/corrupted
//! token alignment.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read};
use std::ops::Range;
use std::sync::OnceLock;

use fancy_regex::Regex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("malformed vocab: {0}")]
    MalformedVocab(String),
    #[error("malformed merges: {0}")]
    MalformedMerges(String),
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("byte {0:#04x} has no vocabulary entry")]
    Unencodable(u8),
    #[error("clean and corrupted sequences share no prefix")]
    NoSharedPrefix,
    #[error("clean sequence ({clean_len}) is longer than corrupted sequence ({corrupted_len})")]
    UnsupportedAsymmetry { clean_len: usize, corrupted_len: usize },
    #[error("anchor position {anchor} is not inside the shared prefix (divergence at {divergence_index})")]
    AnchorOutsidePrefix { anchor: usize, divergence_index: usize },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

fn pre_tokenizer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(GPT2_PATTERN).expect("valid pre-tokenizer pattern"))
}

/// GPT-2's reversible byte -> printable char table.
fn byte_table() -> &'static ([char; 256], HashMap<char, u8>) {
    static TABLE: OnceLock<([char; 256], HashMap<char, u8>)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut forward = ['\0'; 256];
        let printable = |b: u8| {
            (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b)
        };
        let mut extra = 0u32;
        for b in 0..=255u8 {
            forward[b as usize] = if printable(b) {
                char::from(b)
            } else {
                let c = char::from_u32(256 + extra).expect("valid code point");
                extra += 1;
                c
            };
        }
        let inverse = forward.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        (forward, inverse)
    })
}

/// The printable symbol GPT-2 uses for a raw byte.
pub fn byte_symbol(b: u8) -> char {
    byte_table().0[b as usize]
}

#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl Vocab {
    /// Builds a vocabulary from an id map and rank-ordered merges.
    pub fn new(entries: BTreeMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        let n = entries.len();
        let mut id_to_token: Vec<Option<String>> = vec![None; n];
        for (tok, &id) in &entries {
            let slot = id_to_token.get_mut(id as usize).ok_or_else(|| {
                TokenizerError::MalformedVocab(format!(
                    "id {id} for {tok:?} outside contiguous range 0..{n}"
                ))
            })?;
            if let Some(prev) = slot {
                return Err(TokenizerError::MalformedVocab(format!(
                    "duplicate id {id} for {prev:?} and {tok:?}"
                )));
            }
            *slot = Some(tok.clone());
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(|t| t.unwrap_or_default()).collect();
        let token_to_id: HashMap<String, u32> = entries.into_iter().collect();

        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            for part in [a, b] {
                if !token_to_id.contains_key(part) {
                    return Err(TokenizerError::MalformedMerges(format!(
                        "merge {rank} ({a} {b}) references unknown symbol {part:?}"
                    )));
                }
            }
            if ranks.insert((a.clone(), b.clone()), rank).is_some() {
                return Err(TokenizerError::MalformedMerges(format!(
                    "merge {rank} ({a} {b}) repeats an earlier rule"
                )));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token,
            merges,
            ranks,
        })
    }

    /// Reads `vocab.json` and `merges.txt`.
    pub fn load(vocab_file: impl Read, merges_file: impl Read) -> Result<Self> {
        let raw: serde_json::Map<String, serde_json::Value> = serde_json::from_reader(vocab_file)
            .map_err(|e| TokenizerError::MalformedVocab(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for (tok, v) in raw {
            let id = v
                .as_u64()
                .and_then(|id| u32::try_from(id).ok())
                .ok_or_else(|| TokenizerError::MalformedVocab(format!("{tok:?} has non-integer id {v}")))?;
            entries.insert(tok, id);
        }

        let mut merges = Vec::new();
        for (lineno, line) in BufReader::new(merges_file).lines().enumerate() {
            let line = line?;
            if lineno == 0 && line.starts_with("#version") {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_owned(), b.to_owned()))
                }
                _ => {
                    return Err(TokenizerError::MalformedMerges(format!(
                        "line {}: expected two space-separated symbols, got {line:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Self::new(entries, merges)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// `vocab.json` contents, keys in id order.
    pub fn vocab_json(&self) -> String {
        let mut out = String::from("{");
        for (id, tok) in self.id_to_token.iter().enumerate() {
            if id > 0 {
                out.push(',');
            }
            out.push_str(&serde_json::to_string(tok).expect("string serializes"));
            out.push(':');
            out.push_str(&id.to_string());
        }
        out.push('}');
        out
    }

    /// `merges.txt` contents with a version header.
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

    /// Apply merges to one pre-token's byte symbols, lowest rank first.
    fn bpe(&self, mut symbols: Vec<String>) -> Vec<String> {
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == a && &symbols[i + 1] == b {
                    merged.push(format!("{a}{b}"));
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

    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::new();
        let mut offsets = Vec::new();
        for m in pre_tokenizer().find_iter(text) {
            let m = m.expect("pre-tokenizer pattern does not backtrack-overflow");
            let bytes = &text.as_bytes()[m.start()..m.end()];
            let symbols = bytes.iter().map(|&b| byte_symbol(b).to_string()).collect();
            let mut pos = m.start();
            for piece in self.bpe(symbols) {
                let width = piece.chars().count();
                if let Some(id) = self.token_id(&piece) {
                    ids.push(id);
                    offsets.push(pos..pos + width);
                } else {
                    // Merge product missing from the vocab: fall back to bytes.
                    for (k, c) in piece.chars().enumerate() {
                        let id = self
                            .token_id(c.encode_utf8(&mut [0; 4]))
                            .ok_or_else(|| TokenizerError::Unencodable(text.as_bytes()[pos + k]))?;
                        ids.push(id);
                        offsets.push(pos + k..pos + k + 1);
                    }
                }
                pos += width;
            }
        }
        Ok(TokenSeq { ids, offsets })
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let inverse = &byte_table().1;
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or(TokenizerError::UnknownToken(id))?;
            for c in tok.chars() {
                match inverse.get(&c) {
                    Some(&b) => bytes.push(b),
                    None => bytes.extend_from_slice(c.encode_utf8(&mut [0; 4]).as_bytes()),
                }
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Human-readable text of a single token.
    pub fn token_text(&self, id: u32) -> Result<String> {
        self.decode(&[id])
    }

    /// A byte-complete vocabulary whose merges spell each word as one token.
    ///
    /// Every word's pre-tokens (e.g. `" located"`) are built by left-to-right
    /// merge chains on top of the 256 byte symbols.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut next = 0u32;
        for b in 0..=255u8 {
            entries.insert(byte_symbol(b).to_string(), next);
            next += 1;
        }
        let mut merges = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for word in words {
            for m in pre_tokenizer().find_iter(word) {
                let m = m.expect("pre-tokenizer pattern does not backtrack-overflow");
                let symbols: Vec<String> = word.as_bytes()[m.start()..m.end()]
                    .iter()
                    .map(|&b| byte_symbol(b).to_string())
                    .collect();
                let mut acc = symbols[0].clone();
                for s in &symbols[1..] {
                    let pair = (acc.clone(), s.clone());
                    acc.push_str(s);
                    if seen.insert(pair.clone()) {
                        merges.push(pair);
                    }
                    if !entries.contains_key(&acc) {
                        entries.insert(acc.clone(), next);
                        next += 1;
                    }
                }
            }
        }
        Self::new(entries, merges)
    }
}

/// Token ids with the byte span each one covers in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub offsets: Vec<Range<usize>>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Absolute-position correspondence between a clean and a corrupted prompt.
///
/// Corrupted position `p` is patched from clean position `p`. The reporting
/// range starts at `anchor` (the last shared-prefix token) and runs to the
/// end of the clean sequence; `anchor` itself is never different between the
/// two runs, so patching it is a no-op.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenAlignment {
    pub divergence_index: usize,
    pub patchable_positions: Vec<usize>,
    pub clean_len: usize,
    pub corrupted_len: usize,
    pub anchor: usize,
}

impl TokenAlignment {
    /// Absolute positions reported, one per token offset from the anchor.
    pub fn report_positions(&self) -> std::ops::Range<usize> {
        self.anchor..self.clean_len
    }

    pub fn report_width(&self) -> usize {
        self.clean_len - self.anchor
    }

    /// Absolute position for a token offset, if a clean source exists.
    pub fn position_of(&self, offset: usize) -> Option<usize> {
        let p = self.anchor + offset;
        (p < self.clean_len && p < self.corrupted_len).then_some(p)
    }
}

/// Aligns two sequences anchored at the last token before they diverge.
pub fn align(clean: &TokenSeq, corrupted: &TokenSeq) -> Result<TokenAlignment> {
    let divergence = divergence_index(clean, corrupted)?;
    align_at(clean, corrupted, divergence - 1)
}

/// Aligns two sequences with an explicit anchor inside their shared prefix.
pub fn align_at(clean: &TokenSeq, corrupted: &TokenSeq, anchor: usize) -> Result<TokenAlignment> {
    let divergence_index = divergence_index(clean, corrupted)?;
    let (clean_len, corrupted_len) = (clean.len(), corrupted.len());
    if clean_len > corrupted_len {
        return Err(TokenizerError::UnsupportedAsymmetry {
            clean_len,
            corrupted_len,
        });
    }
    if anchor >= divergence_index {
        return Err(TokenizerError::AnchorOutsidePrefix {
            anchor,
            divergence_index,
        });
    }
    Ok(TokenAlignment {
        divergence_index,
        patchable_positions: (divergence_index..clean_len).collect(),
        clean_len,
        corrupted_len,
        anchor,
    })
}

fn divergence_index(clean: &TokenSeq, corrupted: &TokenSeq) -> Result<usize> {
    let shared = clean
        .ids
        .iter()
        .zip(&corrupted.ids)
        .take_while(|(a, b)| a == b)
        .count();
    if shared == 0 {
        return Err(TokenizerError::NoSharedPrefix);
    }
    Ok(shared)
}
