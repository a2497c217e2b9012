//! Token and sememe vocabularies and the sememe lexicon.
//!
//! Lexicon files are UTF-8, one entry per line:
//!
//! ```text
//! # comment
//! 好	good,desired
//! ```
//!
//! Tokens and sememe names may not contain TAB or comma. Tokens missing from
//! the lexicon carry the empty sememe set.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::path::Path;

pub const BLANK: &str = "<blank>";
pub const UNK: &str = "<unk>";
pub const SOS_EOS: &str = "<sos/eos>";

/// Dense token vocabulary with `blank = 0`, `unk = 1`, `sos/eos = V − 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    /// Builds a vocabulary around the reserved symbols from the ordinary tokens.
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let mut all = Vec::with_capacity(tokens.len() + 3);
        all.push(BLANK.to_string());
        all.push(UNK.to_string());
        all.extend(tokens.iter().map(|t| t.as_ref().to_string()));
        all.push(SOS_EOS.to_string());
        Self::from_list(all)
    }

    fn from_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 {
            return Err(Error::arg(format!(
                "vocabulary needs at least 4 entries, got {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\t') || t.contains(',') || t.contains(char::is_whitespace)
            {
                return Err(Error::arg(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::arg(format!("duplicate token {t:?}")));
            }
        }
        let v = tokens.len();
        if tokens[0] != BLANK || tokens[1] != UNK || tokens[v - 1] != SOS_EOS {
            return Err(Error::arg("reserved tokens must sit at ids 0, 1 and V-1"));
        }
        Ok(Self { tokens, index })
    }

    /// Parses a units file: one `token id` pair per line with dense ids.
    pub fn from_units(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(tok), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: "expected `token id`".into(),
                });
            };
            let id: usize = id.parse().map_err(|_| Error::Parse {
                line: n + 1,
                msg: format!("bad id {id:?}"),
            })?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        if entries.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(Error::Parse {
                line: 0,
                msg: "token ids must be dense and start at 0".into(),
            });
        }
        Self::from_list(entries.into_iter().map(|(_, t)| t).collect())
    }

    pub fn to_units(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t} {i}\n"))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank(&self) -> usize {
        0
    }

    pub fn unk(&self) -> usize {
        1
    }

    pub fn sos(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn eos(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id <= 1 || id == self.tokens.len() - 1
    }

    /// Ids of the ordinary (non-reserved) tokens, ascending.
    pub fn ordinary_ids(&self) -> std::ops::Range<usize> {
        2..self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Splits a space-free transcript into single-character tokens; unknown
    /// characters map to `unk`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut buf = [0u8; 4];
        text.chars()
            .map(|c| self.id(c.encode_utf8(&mut buf)).unwrap_or(self.unk()))
            .collect()
    }

    /// Concatenates token strings, dropping reserved ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !self.is_reserved(i))
            .map(|&i| self.tokens[i].as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SememeVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl SememeVocab {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut v = Self::default();
        for n in names {
            let n = n.as_ref();
            if v.id(n).is_some() {
                return Err(Error::arg(format!("duplicate sememe {n:?}")));
            }
            v.intern(n);
        }
        Ok(v)
    }

    fn intern(&mut self, name: &str) -> usize {
        if let Some(i) = self.index.get(name) {
            return *i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }
}

/// Where sememe ids come from while parsing.
#[derive(Debug, Clone, Copy)]
pub enum SememeSource<'a> {
    /// Ids are fixed; unknown sememe names are parse errors.
    Fixed(&'a SememeVocab),
    /// Ids are assigned in order of first appearance in the document.
    Build,
}

/// Token id → ascending sememe ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SememeLexicon {
    entries: Vec<Vec<usize>>,
    sememe_count: usize,
    skipped: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub covered_fraction: f64,
    pub mean_sememes_per_covered: f64,
    pub max_sememes: usize,
}

impl SememeLexicon {
    /// A lexicon where every token has the empty set.
    pub fn empty(vocab_size: usize, sememe_count: usize) -> Self {
        Self {
            entries: vec![Vec::new(); vocab_size],
            sememe_count,
            skipped: Vec::new(),
        }
    }

    /// Builds a lexicon from explicit `(token id, sememe ids)` pairs.
    pub fn from_entries(
        vocab: &TokenVocab,
        sememe_count: usize,
        entries: impl IntoIterator<Item = (usize, Vec<usize>)>,
    ) -> Result<Self> {
        let mut lex = Self::empty(vocab.len(), sememe_count);
        for (tok, mut set) in entries {
            if tok >= vocab.len() {
                return Err(Error::arg(format!("token id {tok} out of range")));
            }
            if vocab.is_reserved(tok) && !set.is_empty() {
                return Err(Error::arg(format!(
                    "reserved token {} cannot carry sememes",
                    vocab.token(tok)
                )));
            }
            set.sort_unstable();
            let before = set.len();
            set.dedup();
            if set.len() != before {
                return Err(Error::arg(format!("duplicate sememe for token {tok}")));
            }
            if set.iter().any(|&s| s >= sememe_count) {
                return Err(Error::arg(format!("sememe id out of range for token {tok}")));
            }
            lex.entries[tok] = set;
        }
        Ok(lex)
    }

    pub fn vocab_size(&self) -> usize {
        self.entries.len()
    }

    pub fn sememe_count(&self) -> usize {
        self.sememe_count
    }

    /// Lexicon tokens that were not in the token vocabulary.
    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    /// `S(t)`; empty for out-of-range ids.
    pub fn sememes(&self, token: usize) -> &[usize] {
        self.entries.get(token).map_or(&[], Vec::as_slice)
    }

    pub fn count(&self, token: usize) -> usize {
        self.sememes(token).len()
    }

    /// Sememe sets for a token sequence, in order.
    pub fn bags(&self, tokens: &[usize]) -> Vec<Vec<usize>> {
        tokens.iter().map(|&t| self.sememes(t).to_vec()).collect()
    }

    /// Binary vector of length `S` marking `S(token)`.
    pub fn multihot(&self, token: usize) -> Result<Vec<f64>> {
        if token >= self.entries.len() {
            return Err(Error::arg(format!(
                "token id {token} out of range {}",
                self.entries.len()
            )));
        }
        let mut v = vec![0.0; self.sememe_count];
        for &s in &self.entries[token] {
            v[s] = 1.0;
        }
        Ok(v)
    }

    pub fn coverage_stats(&self, vocab: &TokenVocab) -> CoverageStats {
        let ordinary = vocab.ordinary_ids();
        let total = ordinary.len();
        let counts: Vec<usize> = ordinary
            .map(|t| self.count(t))
            .filter(|&n| n > 0)
            .collect();
        let covered = counts.len();
        CoverageStats {
            covered_fraction: if total == 0 {
                0.0
            } else {
                covered as f64 / total as f64
            },
            mean_sememes_per_covered: if covered == 0 {
                0.0
            } else {
                counts.iter().sum::<usize>() as f64 / covered as f64
            },
            max_sememes: counts.into_iter().max().unwrap_or(0),
        }
    }

    /// Writes the lexicon back in file form, tokens in id order.
    pub fn serialize(&self, vocab: &TokenVocab, sememes: &SememeVocab) -> String {
        let mut out = String::new();
        for (tok, set) in self.entries.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            out.push_str(vocab.token(tok));
            out.push('\t');
            let names: Vec<&str> = set.iter().map(|&s| sememes.name(s)).collect();
            out.push_str(&names.join(","));
            out.push('\n');
        }
        out
    }
}

/// Parses a lexicon document.
pub fn parse_lexicon(
    text: &str,
    vocab: &TokenVocab,
    source: SememeSource<'_>,
) -> Result<(SememeLexicon, SememeVocab)> {
    let mut sememes = match source {
        SememeSource::Fixed(v) => v.clone(),
        SememeSource::Build => SememeVocab::default(),
    };
    let mut entries: Vec<Vec<usize>> = vec![Vec::new(); vocab.len()];
    let mut seen_tokens = HashSet::new();
    let mut skipped = Vec::new();
    for (n, raw) in text.split('\n').enumerate() {
        let line_no = n + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: line_no, msg };
        let Some((token, field)) = line.split_once('\t') else {
            return Err(perr("expected `token<TAB>sememes`".into()));
        };
        if token.is_empty() {
            return Err(perr("empty token".into()));
        }
        if field.trim().is_empty() {
            return Err(perr(format!("empty sememe field for {token:?}")));
        }
        if !seen_tokens.insert(token.to_string()) {
            return Err(perr(format!("duplicate entry for token {token:?}")));
        }
        let mut names = HashSet::new();
        let mut ids = Vec::new();
        for name in field.split(',') {
            let name = name.trim();
            if name.is_empty() || name.contains('\t') {
                return Err(perr(format!("malformed sememe list {field:?}")));
            }
            if !names.insert(name) {
                return Err(perr(format!("duplicate sememe {name:?} for {token:?}")));
            }
            let id = match source {
                SememeSource::Fixed(_) => sememes
                    .id(name)
                    .ok_or_else(|| perr(format!("unknown sememe {name:?}")))?,
                SememeSource::Build => sememes.intern(name),
            };
            ids.push(id);
        }
        match vocab.id(token) {
            Some(tid) if vocab.is_reserved(tid) => {
                return Err(perr(format!("reserved token {token} cannot carry sememes")));
            }
            Some(tid) => {
                ids.sort_unstable();
                entries[tid] = ids;
            }
            None => skipped.push(token.to_string()),
        }
    }
    if sememes.is_empty() {
        // An empty document still needs a non-empty sememe inventory downstream.
        sememes.intern("<none>");
    }
    let lex = SememeLexicon {
        entries,
        sememe_count: sememes.len(),
        skipped,
    };
    Ok((lex, sememes))
}

/// Parses raw bytes; invalid UTF-8 surfaces as an I/O error.
pub fn parse_lexicon_bytes(
    bytes: &[u8],
    vocab: &TokenVocab,
    source: SememeSource<'_>,
) -> Result<(SememeLexicon, SememeVocab)> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    parse_lexicon(text, vocab, source)
}

pub fn read_lexicon(
    path: &Path,
    vocab: &TokenVocab,
    source: SememeSource<'_>,
) -> Result<(SememeLexicon, SememeVocab)> {
    parse_lexicon_bytes(&std::fs::read(path)?, vocab, source)
}
