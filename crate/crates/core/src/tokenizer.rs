//! Byte-level BPE with digit splitting, whitespace pieces, character
//! coverage and merging of a general and a domain tokenizer.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rules {
    pub no_normalization: bool,
    pub keep_whitespace_pieces: bool,
    pub split_digits: bool,
    pub char_coverage: f64,
}

impl Default for Rules {
    fn default() -> Self {
        Rules { no_normalization: true, keep_whitespace_pieces: true, split_digits: true, char_coverage: 0.9999 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Space,
    Digit,
    Latin,
    Cjk,
    Alpha,
    Other,
}

fn class_of(c: char) -> Class {
    if c.is_whitespace() {
        Class::Space
    } else if c.is_numeric() {
        Class::Digit
    } else if c.is_alphabetic() {
        match c as u32 {
            0..=0x24F => Class::Latin,
            0x2E80..=0x9FFF | 0xAC00..=0xD7AF | 0xF900..=0xFAFF | 0x20000..=0x2FA1F => Class::Cjk,
            _ => Class::Alpha,
        }
    } else {
        Class::Other
    }
}

/// Split `text` into runs of one character class. Numeric characters are
/// always pieces of their own and whitespace runs are kept as pieces.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut prev: Option<Class> = None;
    for (i, c) in text.char_indices() {
        let cls = class_of(c);
        if let Some(p) = prev {
            if p != cls || cls == Class::Digit {
                pieces.push(&text[start..i]);
                start = i;
            }
        }
        prev = Some(cls);
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    pub rules: Rules,
    vocab: Vec<Vec<u8>>,
    index: BTreeMap<Vec<u8>, u32>,
    merges: Vec<(u32, u32)>,
    /// Pair → (rank, merged id).
    ranks: BTreeMap<(u32, u32), (u32, u32)>,
}

impl TokenizerModel {
    /// The 256 single-byte tokens and no merges.
    pub fn byte_fallback(rules: Rules) -> Self {
        let vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        Self::from_parts(rules, vocab, Vec::new()).expect("byte vocabulary is valid")
    }

    /// Assemble a model from an id-ordered vocabulary and ranked merges.
    /// Ids 0..256 must be the single bytes in order.
    pub fn from_parts(rules: Rules, vocab: Vec<Vec<u8>>, merges: Vec<(u32, u32)>) -> Result<Self> {
        if vocab.len() < 256 || (0..256).any(|b| vocab[b] != [b as u8]) {
            return Err(Error::Data("vocabulary must start with the 256 byte tokens".into()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in vocab.iter().enumerate() {
            if t.is_empty() || index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("token {i} is empty or repeated")));
            }
        }
        let mut ranks = BTreeMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let (Some(left), Some(right)) = (vocab.get(a as usize), vocab.get(b as usize)) else {
                return Err(Error::Data(format!("merge {rank} refers to an unknown id")));
            };
            let joined = [left.as_slice(), right.as_slice()].concat();
            let Some(&id) = index.get(&joined) else {
                return Err(Error::Data(format!("merge {rank} produces a token outside the vocabulary")));
            };
            if ranks.insert((a, b), (rank as u32, id)).is_some() {
                return Err(Error::Data(format!("merge {rank} repeats an earlier pair")));
            }
        }
        Ok(TokenizerModel { rules, vocab, index, merges, ranks })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[Vec<u8>] {
        &self.vocab
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.index.get(bytes).copied()
    }

    /// Initial symbols of a piece: a character's own token when the
    /// vocabulary has one, its bytes otherwise.
    fn symbols(&self, piece: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(piece.len());
        let mut buf = [0u8; 4];
        for c in piece.chars() {
            let bytes = c.encode_utf8(&mut buf).as_bytes();
            match self.index.get(bytes) {
                Some(&id) => out.push(id),
                None => out.extend(bytes.iter().map(|&b| b as u32)),
            }
        }
        out
    }

    fn apply_merges(&self, mut syms: Vec<u32>) -> Vec<u32> {
        loop {
            let mut best: Option<(u32, u32, u32, u32)> = None;
            for w in syms.windows(2) {
                if let Some(&(rank, id)) = self.ranks.get(&(w[0], w[1])) {
                    if best.is_none_or(|b| rank < b.0) {
                        best = Some((rank, w[0], w[1], id));
                    }
                }
            }
            let Some((_, a, b, id)) = best else { return syms };
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(id);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            syms = out;
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pretokenize(text) {
            out.extend(self.apply_merges(self.symbols(piece)));
        }
        out
    }

    /// Encode arbitrary bytes: valid UTF-8 runs as text, every other byte
    /// as its fallback token.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in bytes.utf8_chunks() {
            out.extend(self.encode(chunk.valid()));
            out.extend(chunk.invalid().iter().map(|&b| b as u32));
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let t = self
                .token_bytes(id)
                .ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary of {}", self.vocab.len())))?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    /// Decoded text, with invalid UTF-8 replaced by U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Text model file: `key=value` rules, the vocabulary one escaped token
    /// per line in id order, then the merges as escaped `left right` pairs.
    pub fn to_text(&self) -> String {
        let mut s = String::from("desklab-tokenizer 1\n");
        let r = &self.rules;
        let _ = writeln!(s, "no_normalization={}", r.no_normalization);
        let _ = writeln!(s, "keep_whitespace_pieces={}", r.keep_whitespace_pieces);
        let _ = writeln!(s, "split_digits={}", r.split_digits);
        let _ = writeln!(s, "char_coverage={}", r.char_coverage);
        let _ = writeln!(s, "vocab {}", self.vocab.len());
        for t in &self.vocab {
            s.push_str(&escape(t));
            s.push('\n');
        }
        let _ = writeln!(s, "merges {}", self.merges.len());
        for &(a, b) in &self.merges {
            let _ = writeln!(s, "{} {}", escape(&self.vocab[a as usize]), escape(&self.vocab[b as usize]));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |msg: &str| Error::Data(format!("tokenizer file: {msg}"));
        if lines.next() != Some("desklab-tokenizer 1") {
            return Err(bad("missing header"));
        }
        let mut rules = Rules::default();
        let vocab_len = loop {
            let line = lines.next().ok_or_else(|| bad("missing vocab section"))?;
            if let Some(n) = line.strip_prefix("vocab ") {
                break n.parse::<usize>().map_err(|_| bad("bad vocab count"))?;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let flag = || v.parse::<bool>().map_err(|_| bad("expected true or false"));
            match k {
                "no_normalization" => rules.no_normalization = flag()?,
                "keep_whitespace_pieces" => rules.keep_whitespace_pieces = flag()?,
                "split_digits" => rules.split_digits = flag()?,
                "char_coverage" => rules.char_coverage = v.parse().map_err(|_| bad("bad char_coverage"))?,
                _ => return Err(bad("unknown rule")),
            }
        };
        let mut vocab = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            vocab.push(unescape(lines.next().ok_or_else(|| bad("vocab truncated"))?)?);
        }
        let n_merges: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("merges "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing merges section"))?;
        let index: BTreeMap<&[u8], u32> = vocab.iter().enumerate().map(|(i, t)| (t.as_slice(), i as u32)).collect();
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = lines.next().ok_or_else(|| bad("merges truncated"))?;
            let (l, r) = line.split_once(' ').ok_or_else(|| bad("merge needs two tokens"))?;
            let id = |t: &str| -> Result<u32> {
                let bytes = unescape(t)?;
                index.get(bytes.as_slice()).copied().ok_or_else(|| bad("merge names an unknown token"))
            };
            merges.push((id(l)?, id(r)?));
        }
        Self::from_parts(rules, vocab, merges)
    }
}

/// Printable ASCII other than space and backslash as is, everything else as
/// `\xHH`.
pub fn escape(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        if b.is_ascii_graphic() && b != b'\\' {
            s.push(b as char);
        } else {
            let _ = write!(s, "\\x{b:02x}");
        }
    }
    s
}

pub fn unescape(s: &str) -> Result<Vec<u8>> {
    let b = s.as_bytes();
    let mut out = Vec::with_capacity(b.len());
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'\\' {
            let hex = s
                .get(i + 2..i + 4)
                .filter(|_| b.get(i + 1) == Some(&b'x'))
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or_else(|| Error::Data(format!("bad escape in {s:?}")))?;
            out.push(hex);
            i += 4;
        } else {
            out.push(b[i]);
            i += 1;
        }
    }
    Ok(out)
}

/// Characters making up the `coverage` share of all character occurrences,
/// most frequent first (ties by code point).
fn covered_chars(freq: &BTreeMap<char, u64>, coverage: f64) -> Vec<char> {
    let total: u64 = freq.values().sum();
    let mut by_freq: Vec<(char, u64)> = freq.iter().map(|(&c, &n)| (c, n)).collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = Vec::new();
    let mut acc = 0u64;
    for (c, n) in by_freq {
        if total > 0 && acc as f64 >= coverage * total as f64 {
            break;
        }
        acc += n;
        out.push(c);
    }
    out
}

fn has_digit(bytes: &[u8]) -> bool {
    core::str::from_utf8(bytes).is_ok_and(|s| s.chars().any(char::is_numeric)) || bytes.iter().any(u8::is_ascii_digit)
}

/// Learn merges on `docs` until the vocabulary holds `vocab_size` tokens or
/// no adjacent pair occurs twice. Pairs are chosen by count, ties by the
/// smaller (left bytes, right bytes).
pub fn train_bpe<'a>(docs: impl IntoIterator<Item = &'a str>, vocab_size: usize, rules: Rules) -> Result<TokenizerModel> {
    if vocab_size < 256 {
        return Err(Error::Parameter(format!("vocabulary of {vocab_size} cannot hold the 256 byte tokens")));
    }
    if !(rules.char_coverage > 0.0 && rules.char_coverage <= 1.0) {
        return Err(Error::Parameter(format!("character coverage {} outside (0, 1]", rules.char_coverage)));
    }
    let mut piece_freq: BTreeMap<&str, u64> = BTreeMap::new();
    let mut char_freq: BTreeMap<char, u64> = BTreeMap::new();
    for doc in docs {
        for p in pretokenize(doc) {
            *piece_freq.entry(p).or_default() += 1;
        }
        for c in doc.chars() {
            *char_freq.entry(c).or_default() += 1;
        }
    }
    let covered = covered_chars(&char_freq, rules.char_coverage);
    let mut model = TokenizerModel::byte_fallback(rules);
    let mut vocab = core::mem::take(&mut model.vocab);
    let mut index = core::mem::take(&mut model.index);
    for c in &covered {
        if vocab.len() >= vocab_size {
            break;
        }
        let mut buf = [0u8; 4];
        let bytes = c.encode_utf8(&mut buf).as_bytes();
        if bytes.len() > 1 {
            index.insert(bytes.to_vec(), vocab.len() as u32);
            vocab.push(bytes.to_vec());
        }
    }
    let is_covered: BTreeMap<char, ()> = covered.iter().map(|&c| (c, ())).collect();

    // Words are runs of covered characters; uncovered characters stay as
    // fallback bytes and never take part in a merge.
    let mut words: Vec<(Vec<u32>, u64)> = Vec::new();
    for (piece, &n) in &piece_freq {
        let mut cur: Vec<u32> = Vec::new();
        let mut buf = [0u8; 4];
        for c in piece.chars() {
            let bytes = c.encode_utf8(&mut buf).as_bytes();
            match index.get(bytes) {
                Some(&id) if is_covered.contains_key(&c) => cur.push(id),
                _ => {
                    if cur.len() > 1 {
                        words.push((core::mem::take(&mut cur), n));
                    }
                    cur.clear();
                }
            }
        }
        if cur.len() > 1 {
            words.push((cur, n));
        }
    }

    let mut pair_counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (w, n) in &words {
        for p in w.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += n;
        }
    }
    let mut merges: Vec<(u32, u32)> = Vec::new();
    while vocab.len() < vocab_size {
        let mut best: Option<((u32, u32), u64)> = None;
        for (&pair, &count) in &pair_counts {
            if count < 2 || has_digit(&vocab[pair.0 as usize]) || has_digit(&vocab[pair.1 as usize]) {
                continue;
            }
            let better = match best {
                None => true,
                Some((bp, bc)) => {
                    count > bc
                        || (count == bc
                            && (&vocab[pair.0 as usize], &vocab[pair.1 as usize])
                                < (&vocab[bp.0 as usize], &vocab[bp.1 as usize]))
                }
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some(((a, b), _)) = best else { break };
        let joined = [vocab[a as usize].as_slice(), vocab[b as usize].as_slice()].concat();
        let id = match index.get(&joined) {
            Some(&id) => id,
            None => {
                let id = vocab.len() as u32;
                index.insert(joined.clone(), id);
                vocab.push(joined);
                id
            }
        };
        merges.push((a, b));
        for (w, n) in words.iter_mut() {
            if !w.windows(2).any(|p| p[0] == a && p[1] == b) {
                continue;
            }
            for p in w.windows(2) {
                let c = pair_counts.get_mut(&(p[0], p[1])).expect("counted pair");
                *c -= *n;
            }
            let mut merged = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                    merged.push(id);
                    i += 2;
                } else {
                    merged.push(w[i]);
                    i += 1;
                }
            }
            for p in merged.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += *n;
            }
            *w = merged;
        }
        pair_counts.remove(&(a, b));
        pair_counts.retain(|_, c| *c > 0);
    }
    TokenizerModel::from_parts(rules, vocab, merges)
}

/// Union of two tokenizers: general ids unchanged, new domain tokens appended
/// in domain id order, general merges first, then the domain merges not
/// already present.
pub fn merge_tokenizers(general: &TokenizerModel, domain: &TokenizerModel) -> Result<TokenizerModel> {
    if general.rules != domain.rules {
        return Err(Error::Config(format!(
            "rule blocks differ: {:?} vs {:?}",
            general.rules, domain.rules
        )));
    }
    let mut vocab = general.vocab.clone();
    let mut index = general.index.clone();
    for t in &domain.vocab {
        if !index.contains_key(t) {
            index.insert(t.clone(), vocab.len() as u32);
            vocab.push(t.clone());
        }
    }
    let mut merges = general.merges.clone();
    let mut seen: BTreeMap<(u32, u32), ()> = merges.iter().map(|&m| (m, ())).collect();
    for &(a, b) in &domain.merges {
        let map = |id: u32| index[&domain.vocab[id as usize]];
        let pair = (map(a), map(b));
        if seen.insert(pair, ()).is_none() {
            merges.push(pair);
        }
    }
    TokenizerModel::from_parts(general.rules, vocab, merges)
}

/// Mean tokens per input byte over `docs`.
pub fn tokens_per_byte<'a>(model: &TokenizerModel, docs: impl IntoIterator<Item = &'a str>) -> f64 {
    let (mut tokens, mut bytes) = (0usize, 0usize);
    for d in docs {
        tokens += model.encode(d).len();
        bytes += d.len();
    }
    if bytes == 0 {
        0.0
    } else {
        tokens as f64 / bytes as f64
    }
}
