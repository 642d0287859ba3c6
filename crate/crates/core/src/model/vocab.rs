//! Vocabulary and the deterministic tokenizer.
//!
//! The tokenizer is a fixed-vocab greedy longest-match over UTF-8 bytes with
//! a 256-entry byte-fallback range, so every string tokenizes and every token
//! sequence detokenizes — no learned merges, no failure modes. The on-disk
//! format is one `id<TAB>token` line per entry (see `docs/FORMATS.md`), with
//! backslash escapes for tab, newline, carriage return, and backslash inside
//! token strings.
//!
//! Standard id layout (used by every generated vocabulary): ids `0..=255` are
//! the byte-fallback tokens (displayed `<0xNN>`), then `<bos>`, `<eos>`,
//! `<pad>`, then the regular tokens. Loaders accept any layout as long as the
//! manifest names the special ids.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Index into a [`Vocab`]. Values are always dense in `[0, vocab_size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn as_usize(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A tokenized string. `ids` always refer to the vocab that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub source_text: String,
}

/// Reserved token ids. `byte_fallback_start` begins a block of 256 consecutive
/// ids covering every byte value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    pub byte_fallback_start: TokenId,
}

#[derive(thiserror::Error, Debug)]
pub enum VocabError {
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("vocab line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate token id {0}")]
    DuplicateId(u32),
    #[error("duplicate token string {0:?}")]
    DuplicateToken(String),
    #[error("token ids are not dense: expected {expected} entries, highest id {highest}")]
    NotDense { expected: usize, highest: u32 },
    #[error("invalid special tokens: {0}")]
    BadSpecial(String),
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    specials: SpecialTokens,
    /// Regular (matchable) token ids bucketed by first byte, longest string
    /// first; ties cannot occur because duplicate strings are rejected.
    match_index: HashMap<u8, Vec<TokenId>>,
}

impl Vocab {
    /// Build a vocab in the standard layout from regular token strings.
    pub fn standard(regular: Vec<String>) -> Result<Self, VocabError> {
        let mut tokens: Vec<String> = (0u16..256).map(|b| format!("<0x{b:02X}>")).collect();
        tokens.push("<bos>".to_string());
        tokens.push("<eos>".to_string());
        tokens.push("<pad>".to_string());
        tokens.extend(regular);
        let specials = SpecialTokens {
            bos: TokenId(256),
            eos: TokenId(257),
            pad: TokenId(258),
            byte_fallback_start: TokenId(0),
        };
        Self::from_tokens(tokens, specials)
    }

    /// Build from a dense id→string table plus special ids, validating all
    /// vocabulary invariants.
    pub fn from_tokens(tokens: Vec<String>, specials: SpecialTokens) -> Result<Self, VocabError> {
        let n = tokens.len();
        let in_range = |id: TokenId| id.as_usize() < n;
        if !(in_range(specials.bos) && in_range(specials.eos) && in_range(specials.pad)) {
            return Err(VocabError::BadSpecial("special id out of range".into()));
        }
        if specials.bos == specials.eos
            || specials.bos == specials.pad
            || specials.eos == specials.pad
        {
            return Err(VocabError::BadSpecial("bos/eos/pad must be distinct".into()));
        }
        let fb = specials.byte_fallback_start.as_usize();
        if fb + 256 > n {
            return Err(VocabError::BadSpecial(format!(
                "byte fallback range {fb}..{} exceeds vocab size {n}",
                fb + 256
            )));
        }
        for b in 0..256usize {
            let expect = format!("<0x{b:02X}>");
            if tokens[fb + b] != expect {
                return Err(VocabError::BadSpecial(format!(
                    "byte token {} must be {expect:?}, found {:?}",
                    fb + b,
                    tokens[fb + b]
                )));
            }
        }
        for sp in [specials.bos, specials.eos, specials.pad] {
            if (fb..fb + 256).contains(&sp.as_usize()) {
                return Err(VocabError::BadSpecial(
                    "bos/eos/pad overlap the byte fallback range".into(),
                ));
            }
        }
        let mut seen = HashMap::with_capacity(n);
        for (id, tok) in tokens.iter().enumerate() {
            if let Some(_prev) = seen.insert(tok.clone(), id) {
                return Err(VocabError::DuplicateToken(tok.clone()));
            }
        }
        let mut vocab = Self {
            tokens,
            specials,
            match_index: HashMap::new(),
        };
        vocab.build_match_index();
        Ok(vocab)
    }

    fn build_match_index(&mut self) {
        let mut index: HashMap<u8, Vec<TokenId>> = HashMap::new();
        for id in 0..self.tokens.len() {
            let tid = TokenId(id as u32);
            if !self.is_regular(tid) {
                continue;
            }
            let bytes = self.tokens[id].as_bytes();
            if let Some(&first) = bytes.first() {
                index.entry(first).or_default().push(tid);
            }
        }
        for bucket in index.values_mut() {
            bucket.sort_by(|a, b| {
                let la = self.tokens[a.as_usize()].len();
                let lb = self.tokens[b.as_usize()].len();
                lb.cmp(&la).then(a.cmp(b))
            });
        }
        self.match_index = index;
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialTokens {
        self.specials
    }

    pub fn token_str(&self, id: TokenId) -> &str {
        &self.tokens[id.as_usize()]
    }

    pub fn lookup(&self, token: &str) -> Option<TokenId> {
        // Linear scan is fine at this scale and keeps no second index in sync.
        self.tokens
            .iter()
            .position(|t| t == token)
            .map(|i| TokenId(i as u32))
    }

    fn byte_token(&self, b: u8) -> TokenId {
        TokenId(self.specials.byte_fallback_start.0 + b as u32)
    }

    fn as_byte(&self, id: TokenId) -> Option<u8> {
        let fb = self.specials.byte_fallback_start.0;
        if (fb..fb + 256).contains(&id.0) {
            Some((id.0 - fb) as u8)
        } else {
            None
        }
    }

    fn is_regular(&self, id: TokenId) -> bool {
        self.as_byte(id).is_none()
            && id != self.specials.bos
            && id != self.specials.eos
            && id != self.specials.pad
    }

    /// Greedy longest-match tokenization with byte fallback.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let bytes = text.as_bytes();
        let mut ids = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let rest = &bytes[i..];
            let matched = self
                .match_index
                .get(&bytes[i])
                .and_then(|bucket| {
                    bucket
                        .iter()
                        .find(|id| rest.starts_with(self.tokens[id.as_usize()].as_bytes()))
                })
                .copied();
            match matched {
                Some(id) => {
                    ids.push(id);
                    i += self.tokens[id.as_usize()].len();
                }
                None => {
                    ids.push(self.byte_token(bytes[i]));
                    i += 1;
                }
            }
        }
        TokenSequence {
            ids,
            source_text: text.to_string(),
        }
    }

    /// Concatenate token strings; byte-fallback ids contribute their raw byte.
    /// Total over any id list: invalid UTF-8 from hand-built byte sequences is
    /// replaced rather than rejected.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            match self.as_byte(id) {
                Some(b) => bytes.push(b),
                None => bytes.extend_from_slice(self.tokens[id.as_usize()].as_bytes()),
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Write as `id<TAB>token` lines with escaped control characters.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut out = String::new();
        for (id, tok) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{id}\t{}\n", escape(tok)));
        }
        std::fs::write(path, out).map_err(|source| VocabError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Load from `id<TAB>token` lines. Ids may appear in any order but must be
    /// dense; `specials` comes from the model manifest.
    pub fn load(path: &Path, specials: SpecialTokens) -> Result<Self, VocabError> {
        let raw = std::fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries: Vec<(u32, String)> = Vec::new();
        for (lineno, line) in raw.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id_part, tok_part) = line.split_once('\t').ok_or_else(|| VocabError::Parse {
                line: lineno + 1,
                reason: "expected id<TAB>token".into(),
            })?;
            let id: u32 = id_part.parse().map_err(|_| VocabError::Parse {
                line: lineno + 1,
                reason: format!("bad token id {id_part:?}"),
            })?;
            let tok = unescape(tok_part).map_err(|reason| VocabError::Parse {
                line: lineno + 1,
                reason,
            })?;
            entries.push((id, tok));
        }
        let n = entries.len();
        let mut tokens = vec![None; n];
        for (id, tok) in entries {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or(VocabError::NotDense { expected: n, highest: id })?;
            if slot.is_some() {
                return Err(VocabError::DuplicateId(id));
            }
            *slot = Some(tok);
        }
        let tokens: Vec<String> = tokens
            .into_iter()
            .map(|t| t.expect("dense by construction: len checked, duplicates rejected"))
            .collect();
        Self::from_tokens(tokens, specials)
    }
}

fn escape(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for c in token.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            other => out.push(other),
        }
    }
    out
}

fn unescape(escaped: &str) -> Result<String, String> {
    let mut out = String::with_capacity(escaped.len());
    let mut chars = escaped.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => return Err(format!("unknown escape \\{other}")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}
