//! Corpus preparation: exact deduplication with duplication counts,
//! count- and quality-driven upsampling, category assignment, weighted
//! stream mixing and sequence packing.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;

pub const CATEGORY_COUNT: usize = 27;

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub lang: Option<String>,
    /// 1-based category, `None` until assigned.
    pub category: Option<u8>,
    pub dup_count: u32,
    pub quality: BTreeMap<String, f64>,
    pub source: Option<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            lang: None,
            category: None,
            dup_count: 1,
            quality: BTreeMap::new(),
            source: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dup_count == 0 {
            return Err(Error::Data(format!("document {} has dup_count 0", self.id)));
        }
        if let Some((k, v)) = self.quality.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("document {} has {k} score {v} outside [0, 1]", self.id)));
        }
        if let Some(c) = self.category {
            if c == 0 || c as usize > CATEGORY_COUNT {
                return Err(Error::Data(format!("document {} has category {c}", self.id)));
            }
        }
        Ok(())
    }
}

/// Text with leading/trailing whitespace removed and inner whitespace runs
/// collapsed to one space.
pub fn canonical_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Collapse documents whose canonical text is identical. The first
/// occurrence represents the group, keeps its position in the output and
/// carries the summed `dup_count` of the group, so re-running is a no-op.
pub fn dedup_global(docs: impl IntoIterator<Item = Document>) -> Result<Vec<Document>> {
    let mut out: Vec<Document> = Vec::new();
    let mut by_text: BTreeMap<String, usize> = BTreeMap::new();
    let mut ids: BTreeMap<String, ()> = BTreeMap::new();
    for doc in docs {
        if ids.insert(doc.id.clone(), ()).is_some() {
            return Err(Error::Data(format!("duplicate document id {}", doc.id)));
        }
        let key = canonical_text(&doc.text);
        match by_text.get(&key) {
            Some(&i) => out[i].dup_count += doc.dup_count,
            None => {
                by_text.insert(key, out.len());
                out.push(doc);
            }
        }
    }
    Ok(out)
}

/// How a duplication count becomes a repeat count.
#[derive(Debug, Clone, PartialEq)]
pub enum RepeatMap {
    /// `⌈log2 count⌉ + 1`
    Log2,
    Identity,
    /// Explicit `(count, repeats)` pairs; every observed count must be listed.
    Table(Vec<(u32, u32)>),
}

impl RepeatMap {
    fn validate(&self) -> Result<()> {
        if let RepeatMap::Table(pairs) = self {
            let mut sorted = pairs.clone();
            sorted.sort_unstable();
            for w in sorted.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::Policy(format!("count {} mapped twice", w[0].0)));
                }
                if w[1].1 < w[0].1 {
                    return Err(Error::Policy(format!(
                        "repeat map is not monotone: {}→{} but {}→{}",
                        w[0].0, w[0].1, w[1].0, w[1].1
                    )));
                }
            }
        }
        Ok(())
    }

    fn apply(&self, count: u32) -> Result<u32> {
        match self {
            RepeatMap::Log2 => Ok(ceil_log2(count) + 1),
            RepeatMap::Identity => Ok(count),
            RepeatMap::Table(pairs) => pairs
                .iter()
                .find(|(c, _)| *c == count)
                .map(|&(_, r)| r)
                .ok_or_else(|| Error::Policy(format!("repeat map has no entry for count {count}"))),
        }
    }
}

fn ceil_log2(n: u32) -> u32 {
    if n <= 1 {
        0
    } else {
        32 - (n - 1).leading_zeros()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleKind {
    ByDupCount,
    TopFraction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpsamplePolicy {
    pub kind: UpsampleKind,
    /// Share of documents counted as top quality (`TopFraction`).
    pub fraction: f64,
    /// Repeats of the top share (`TopFraction`).
    pub repeats: u32,
    pub max_repeats: u32,
    pub count_to_repeats: RepeatMap,
}

impl UpsamplePolicy {
    pub fn by_dup_count(map: RepeatMap) -> Self {
        UpsamplePolicy { kind: UpsampleKind::ByDupCount, fraction: 1.0, repeats: 1, max_repeats: 10, count_to_repeats: map }
    }

    pub fn top_fraction(fraction: f64, repeats: u32) -> Self {
        UpsamplePolicy {
            kind: UpsampleKind::TopFraction,
            fraction,
            repeats,
            max_repeats: 10,
            count_to_repeats: RepeatMap::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_repeats == 0 || self.repeats == 0 {
            return Err(Error::Policy("repeats and max_repeats must be positive".into()));
        }
        if self.repeats > self.max_repeats {
            return Err(Error::Policy(format!("repeats {} exceed the maximum {}", self.repeats, self.max_repeats)));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Policy(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        self.count_to_repeats.validate()
    }
}

/// Emit each document `clamp(map(dup_count), 1, max_repeats)` times, in
/// document order with copies adjacent.
pub fn upsample_by_dup_count(docs: &[Document], policy: &UpsamplePolicy) -> Result<Vec<Document>> {
    if policy.kind != UpsampleKind::ByDupCount {
        return Err(Error::Policy("expected a duplication-count policy".into()));
    }
    policy.validate()?;
    let mut out = Vec::new();
    for doc in docs {
        let r = policy.count_to_repeats.apply(doc.dup_count)?.clamp(1, policy.max_repeats);
        out.extend(core::iter::repeat_n(doc, r as usize).cloned());
    }
    Ok(out)
}

/// Rank by `dimension` (descending, ties by id), drop the bottom
/// `drop_bottom_fraction`, repeat the top `fraction` `repeats` times and emit
/// the rest once. Counts are `⌈fraction·n⌉` and `⌊drop·n⌋` of the input size.
pub fn bucket_upsample_by_quality(
    docs: &[Document],
    dimension: &str,
    policy: &UpsamplePolicy,
    drop_bottom_fraction: f64,
) -> Result<Vec<Document>> {
    if policy.kind != UpsampleKind::TopFraction {
        return Err(Error::Policy("expected a top-fraction policy".into()));
    }
    policy.validate()?;
    if !(0.0..1.0).contains(&drop_bottom_fraction) {
        return Err(Error::Policy(format!("drop fraction {drop_bottom_fraction} outside [0, 1)")));
    }
    let mut ranked: Vec<(&Document, f64)> = Vec::with_capacity(docs.len());
    for d in docs {
        let score = *d
            .quality
            .get(dimension)
            .ok_or_else(|| Error::Data(format!("document {} has no {dimension} score", d.id)))?;
        ranked.push((d, score));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
    let n = ranked.len();
    let dropped = libm::floor(drop_bottom_fraction * n as f64 + 1e-9) as usize;
    let kept = n - dropped.min(n);
    let top = (libm::ceil(policy.fraction * n as f64 - 1e-9) as usize).min(kept);
    let repeats = policy.repeats.min(policy.max_repeats) as usize;
    let mut out = Vec::new();
    for (i, (d, _)) in ranked[..kept].iter().enumerate() {
        let r = if i < top { repeats } else { 1 };
        out.extend(core::iter::repeat_n(*d, r).cloned());
    }
    Ok(out)
}

/// Shannon entropy of the byte histogram over 8 bits, in `[0, 1]`.
pub fn entropy_score(text: &str) -> f64 {
    if text.is_empty() {
        return 0.0;
    }
    let mut counts = [0usize; 256];
    for &b in text.as_bytes() {
        counts[b as usize] += 1;
    }
    let n = text.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * libm::log2(p)
        })
        .sum();
    (h / 8.0).clamp(0.0, 1.0)
}

/// Share of whitespace-separated words found in `keywords` (ASCII
/// case-insensitive, surrounding punctuation ignored).
pub fn keyword_density(text: &str, keywords: &[&str]) -> f64 {
    let mut words = 0usize;
    let mut hits = 0usize;
    for w in text.split_whitespace() {
        words += 1;
        let w = w.trim_matches(|c: char| !c.is_alphanumeric());
        if keywords.iter().any(|k| k.eq_ignore_ascii_case(w)) {
            hits += 1;
        }
    }
    if words == 0 {
        0.0
    } else {
        hits as f64 / words as f64
    }
}

/// Argmax over 27 classifier scores, lowest index on ties, as a 1-based
/// category.
pub fn assign_category(doc: &Document, classifier: &dyn Fn(&Document) -> Vec<f64>) -> Result<u8> {
    let scores = classifier(doc);
    if scores.len() != CATEGORY_COUNT {
        return Err(Error::Classifier(format!(
            "{} scores for document {}, expected {CATEGORY_COUNT}",
            scores.len(),
            doc.id
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Classifier(format!("score {bad} for document {}", doc.id)));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best as u8 + 1)
}

/// Names of the 27 categories used by the keyword classifier, with the cue
/// words each one counts.
pub const CATEGORY_KEYWORDS: [(&str, &[&str]); CATEGORY_COUNT] = [
    ("medicine", &["patient", "diagnosis", "clinical", "symptom", "therapy"]),
    ("biology", &["cell", "protein", "gene", "organism", "enzyme"]),
    ("chemistry", &["molecule", "reaction", "compound", "acid", "catalyst"]),
    ("physics", &["energy", "quantum", "particle", "force", "momentum"]),
    ("mathematics", &["theorem", "proof", "equation", "integral", "matrix"]),
    ("computing", &["algorithm", "compiler", "software", "function", "database"]),
    ("engineering", &["circuit", "design", "load", "sensor", "prototype"]),
    ("law", &["court", "statute", "contract", "plaintiff", "ruling"]),
    ("finance", &["market", "interest", "equity", "loan", "portfolio"]),
    ("economics", &["inflation", "demand", "supply", "tariff", "growth"]),
    ("politics", &["election", "parliament", "policy", "senate", "campaign"]),
    ("history", &["empire", "dynasty", "war", "century", "revolution"]),
    ("geography", &["river", "mountain", "climate", "continent", "region"]),
    ("literature", &["novel", "poem", "author", "chapter", "narrative"]),
    ("philosophy", &["ethics", "metaphysics", "reason", "virtue", "logic"]),
    ("religion", &["temple", "scripture", "prayer", "faith", "ritual"]),
    ("art", &["painting", "sculpture", "gallery", "canvas", "portrait"]),
    ("music", &["melody", "chord", "orchestra", "rhythm", "album"]),
    ("sports", &["match", "team", "score", "league", "tournament"]),
    ("education", &["student", "teacher", "school", "curriculum", "exam"]),
    ("technology", &["device", "smartphone", "network", "battery", "chip"]),
    ("environment", &["pollution", "forest", "carbon", "species", "recycling"]),
    ("agriculture", &["crop", "harvest", "soil", "farm", "livestock"]),
    ("food", &["recipe", "flavor", "cook", "ingredient", "bake"]),
    ("travel", &["hotel", "flight", "tourist", "journey", "passport"]),
    ("entertainment", &["film", "actor", "series", "celebrity", "show"]),
    ("news", &["reported", "announced", "official", "spokesperson", "yesterday"]),
];

/// Keyword-count scores for every category.
pub fn keyword_classifier(doc: &Document) -> Vec<f64> {
    CATEGORY_KEYWORDS.iter().map(|(_, kws)| keyword_density(&doc.text, kws)).collect()
}

/// Draw `n` documents by seeded weighted choice among the named streams.
/// Each stream is read in order and restarts when exhausted.
pub fn mix_streams(
    streams: &BTreeMap<String, Vec<Document>>,
    weights: &BTreeMap<String, f64>,
    n: usize,
    seed: u64,
) -> Result<Vec<Document>> {
    let mut active: Vec<(&String, f64)> = Vec::new();
    for (name, &w) in weights {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Config(format!("weight {w} for stream {name}")));
        }
        if w == 0.0 {
            continue;
        }
        match streams.get(name) {
            Some(s) if !s.is_empty() => active.push((name, w)),
            _ => return Err(Error::Config(format!("weight {w} for empty stream {name}"))),
        }
    }
    let total: f64 = active.iter().map(|(_, w)| w).sum();
    if active.is_empty() || total <= 0.0 {
        return Err(Error::Config("stream weights sum to zero".into()));
    }
    let mut rng = seeded(seed);
    let mut cursors = vec![0usize; active.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = active.len() - 1;
        for (i, (_, w)) in active.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let stream = &streams[active[pick].0];
        out.push(stream[cursors[pick] % stream.len()].clone());
        cursors[pick] += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PackStats {
    pub tokens_in: usize,
    pub tokens_packed: usize,
    /// Tokens of documents that had to be split across sequences.
    pub tokens_truncated: usize,
    /// Documents split into several chunks.
    pub split_docs: usize,
    /// Always zero: split chunks are kept.
    pub tokens_discarded: usize,
    pub tokens_padded: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub seq_len: usize,
    pub pad_id: u32,
    pub sequences: Vec<Vec<u32>>,
    /// Per position: 1-based index of the document piece within its
    /// sequence, 0 for padding.
    pub sample_ids: Vec<Vec<u16>>,
    pub stats: PackStats,
}

struct Piece<'a> {
    tokens: &'a [u32],
}

fn split_pieces<'a>(docs: &'a [Vec<u32>], seq_len: usize, stats: &mut PackStats) -> Vec<Piece<'a>> {
    let mut pieces = Vec::new();
    for d in docs {
        stats.tokens_in += d.len();
        if d.len() > seq_len {
            stats.split_docs += 1;
            stats.tokens_truncated += d.len();
        }
        pieces.extend(d.chunks(seq_len).map(|tokens| Piece { tokens }));
    }
    pieces
}

fn check_seq_len(seq_len: usize) -> Result<()> {
    if seq_len == 0 || seq_len > u16::MAX as usize {
        return Err(Error::Parameter(format!("sequence length {seq_len} outside [1, 65535]")));
    }
    Ok(())
}

fn emit(bins: Vec<Vec<Piece<'_>>>, seq_len: usize, pad_id: u32, mut stats: PackStats) -> PackedBatch {
    let mut sequences = Vec::with_capacity(bins.len());
    let mut sample_ids = Vec::with_capacity(bins.len());
    for bin in bins {
        let mut seq = Vec::with_capacity(seq_len);
        let mut ids = Vec::with_capacity(seq_len);
        for (i, p) in bin.iter().enumerate() {
            seq.extend_from_slice(p.tokens);
            ids.extend(core::iter::repeat_n(i as u16 + 1, p.tokens.len()));
        }
        stats.tokens_packed += seq.len();
        stats.tokens_padded += seq_len - seq.len();
        seq.resize(seq_len, pad_id);
        ids.resize(seq_len, 0);
        sequences.push(seq);
        sample_ids.push(ids);
    }
    PackedBatch { seq_len, pad_id, sequences, sample_ids, stats }
}

/// First-fit-decreasing packing of whole documents into `seq_len` rows.
/// Documents longer than a row are cut into `⌈len/seq_len⌉` chunks first.
pub fn pack_sequences(docs: &[Vec<u32>], seq_len: usize, pad_id: u32) -> Result<PackedBatch> {
    check_seq_len(seq_len)?;
    let mut stats = PackStats::default();
    let mut pieces = split_pieces(docs, seq_len, &mut stats);
    pieces.sort_by_key(|p| core::cmp::Reverse(p.tokens.len()));
    let mut bins: Vec<Vec<Piece<'_>>> = Vec::new();
    let mut free: Vec<usize> = Vec::new();
    for p in pieces {
        match free.iter().position(|&f| f >= p.tokens.len()) {
            Some(i) => {
                free[i] -= p.tokens.len();
                bins[i].push(p);
            }
            None => {
                free.push(seq_len - p.tokens.len());
                bins.push(vec![p]);
            }
        }
    }
    Ok(emit(bins, seq_len, pad_id, stats))
}

/// Documents placed in input order, starting a new row whenever the next one
/// does not fit.
pub fn pack_sequential(docs: &[Vec<u32>], seq_len: usize, pad_id: u32) -> Result<PackedBatch> {
    check_seq_len(seq_len)?;
    let mut stats = PackStats::default();
    let pieces = split_pieces(docs, seq_len, &mut stats);
    let mut bins: Vec<Vec<Piece<'_>>> = Vec::new();
    let mut used = seq_len;
    for p in pieces {
        if used + p.tokens.len() > seq_len {
            bins.push(Vec::new());
            used = 0;
        }
        used += p.tokens.len();
        bins.last_mut().expect("a row was opened").push(p);
    }
    Ok(emit(bins, seq_len, pad_id, stats))
}

impl PackedBatch {
    /// Sample ids widened for the model, with padding mapped to its own
    /// id so no real token attends to it.
    pub fn model_sample_ids(&self, row: usize) -> Vec<u32> {
        self.sample_ids[row].iter().map(|&s| s as u32).collect()
    }

    pub fn summary(&self) -> String {
        let s = &self.stats;
        format!(
            "{} rows of {}: {} tokens packed, {} padded, {} split across rows",
            self.sequences.len(),
            self.seq_len,
            s.tokens_packed,
            s.tokens_padded,
            s.tokens_truncated
        )
    }
}
