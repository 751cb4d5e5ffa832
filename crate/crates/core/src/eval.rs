//! Synthetic needle-in-a-haystack retrieval and perplexity.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{bind_params, model_forward_graph, KvCache, ModelConfig, ModelParams};
use crate::rng::seeded;
use crate::tensor::Graph;

/// Token ranges used by retrieval cases. Filler, key and value alphabets are
/// disjoint so a key can only ever match the planted needle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NiahVocab {
    pub filler: core::ops::Range<u32>,
    pub keys: core::ops::Range<u32>,
    pub values: core::ops::Range<u32>,
    pub key_len: usize,
    pub value_len: usize,
}

impl NiahVocab {
    /// `[0, filler)` filler, then `keys` key tokens, then `values` value tokens.
    pub fn split(filler: u32, keys: u32, values: u32) -> Self {
        NiahVocab {
            filler: 0..filler,
            keys: filler..filler + keys,
            values: filler + keys..filler + keys + values,
            key_len: 1,
            value_len: 1,
        }
    }

    pub fn size(&self) -> usize {
        self.filler.end.max(self.keys.end).max(self.values.end) as usize
    }

    pub fn needle_len(&self) -> usize {
        self.key_len + self.value_len
    }

    pub fn validate(&self) -> Result<()> {
        let overlap = |a: &core::ops::Range<u32>, b: &core::ops::Range<u32>| a.start < b.end && b.start < a.end;
        if self.filler.is_empty() || self.keys.is_empty() || self.values.is_empty() {
            return Err(Error::Parameter("empty filler, key or value alphabet".into()));
        }
        if overlap(&self.filler, &self.keys) || overlap(&self.filler, &self.values) || overlap(&self.keys, &self.values) {
            return Err(Error::Parameter("filler, key and value alphabets must be disjoint".into()));
        }
        if self.key_len == 0 || self.value_len == 0 {
            return Err(Error::Parameter("keys and values need at least one token".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiahCase {
    /// Filler with the needle (key then value) planted once.
    pub haystack: Vec<u32>,
    pub needle_pos: usize,
    pub key: Vec<u32>,
    pub expected: Vec<u32>,
    pub depth: f64,
}

impl NiahCase {
    /// Haystack followed by the query key.
    pub fn prompt(&self) -> Vec<u32> {
        let mut p = self.haystack.clone();
        p.extend_from_slice(&self.key);
        p
    }

    pub fn prompt_len(&self) -> usize {
        self.haystack.len() + self.key.len()
    }

    /// Distance from the last query token back to the first value token.
    pub fn distance(&self) -> usize {
        self.prompt_len() - 1 - (self.needle_pos + self.key.len())
    }
}

fn sample_from(rng: &mut impl Rng, r: &core::ops::Range<u32>, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(r.clone())).collect()
}

/// A case whose prompt (haystack plus query) is `len` tokens, with the needle
/// at `⌊depth·(haystack_len − needle_len)⌋`.
pub fn gen_niah_case(len: usize, depth: f64, vocab: &NiahVocab, seed: u64) -> Result<NiahCase> {
    vocab.validate()?;
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::Parameter(format!("depth {depth} outside [0, 1]")));
    }
    if len < vocab.needle_len() + vocab.key_len {
        return Err(Error::Parameter(format!(
            "length {len} cannot hold a {}-token needle and a {}-token query",
            vocab.needle_len(),
            vocab.key_len
        )));
    }
    let mut rng = seeded(seed);
    let hay_len = len - vocab.key_len;
    let mut haystack = sample_from(&mut rng, &vocab.filler, hay_len);
    let key = sample_from(&mut rng, &vocab.keys, vocab.key_len);
    let expected = sample_from(&mut rng, &vocab.values, vocab.value_len);
    let needle_pos = libm::floor(depth * (hay_len - vocab.needle_len()) as f64) as usize;
    haystack[needle_pos..needle_pos + vocab.key_len].copy_from_slice(&key);
    haystack[needle_pos + vocab.key_len..needle_pos + vocab.needle_len()].copy_from_slice(&expected);
    Ok(NiahCase { haystack, needle_pos, key, expected, depth })
}

/// Greedy continuation of `prompt` for `n` tokens through the KV cache.
pub fn greedy_decode(params: &ModelParams, config: &ModelConfig, prompt: &[u32], n: usize) -> Result<Vec<u32>> {
    let mut cache = KvCache::new(config);
    let mut out = Vec::with_capacity(n);
    let mut input = prompt.to_vec();
    for _ in 0..n {
        let mut g = Graph::new();
        let bound = bind_params(&mut g, params, false);
        let logits = model_forward_graph(&mut g, &bound, config, &input, None, Some(&mut cache))?;
        let last = g.value(logits).row(input.len() - 1);
        let next = argmax(last) as u32;
        out.push(next);
        input = vec![next];
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DepthBucket {
    pub cases: usize,
    pub correct: usize,
}

impl DepthBucket {
    pub fn accuracy(&self) -> Option<f64> {
        (self.cases > 0).then(|| self.correct as f64 / self.cases as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiahReport {
    pub accuracy: f64,
    pub evaluated: usize,
    pub correct: usize,
    pub skipped: usize,
    /// Decile `i` holds depths in `[i/10, (i+1)/10)`, depth 1 in the last.
    pub per_depth: [DepthBucket; 10],
    /// Exact-match result per case, `None` for skipped cases.
    pub outcomes: Vec<Option<bool>>,
}

pub fn depth_decile(depth: f64) -> usize {
    (libm::floor(depth * 10.0) as usize).min(9)
}

/// Exact-match retrieval accuracy. Cases whose prompt plus decoded tokens do
/// not fit in `context_len` are skipped and tallied.
pub fn eval_niah(params: &ModelParams, config: &ModelConfig, cases: &[NiahCase], context_len: usize) -> Result<NiahReport> {
    let mut per_depth = [DepthBucket::default(); 10];
    let mut outcomes = Vec::with_capacity(cases.len());
    let (mut correct, mut evaluated, mut skipped) = (0, 0, 0);
    for case in cases {
        if case.prompt_len() + case.expected.len() - 1 > context_len {
            skipped += 1;
            outcomes.push(None);
            continue;
        }
        let got = greedy_decode(params, config, &case.prompt(), case.expected.len())?;
        let hit = got == case.expected;
        let bucket = &mut per_depth[depth_decile(case.depth)];
        bucket.cases += 1;
        evaluated += 1;
        if hit {
            bucket.correct += 1;
            correct += 1;
        }
        outcomes.push(Some(hit));
    }
    let accuracy = if evaluated == 0 { 0.0 } else { correct as f64 / evaluated as f64 };
    Ok(NiahReport { accuracy, evaluated, correct, skipped, per_depth, outcomes })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub mean_cross_entropy: f64,
    pub tokens: usize,
}

/// `exp` of the mean next-token cross entropy, each document run on its own
/// so no prediction conditions on another document.
pub fn eval_perplexity(params: &ModelParams, config: &ModelConfig, docs: &[Vec<u32>]) -> Result<PerplexityReport> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for doc in docs.iter().filter(|d| d.len() >= 2) {
        let mut g = Graph::new();
        let bound = bind_params(&mut g, params, false);
        let input = &doc[..doc.len() - 1];
        let logits = model_forward_graph(&mut g, &bound, config, input, None, None)?;
        let targets: Vec<usize> = doc[1..].iter().map(|&t| t as usize).collect();
        let ce = g.cross_entropy(logits, &targets)?;
        total += g.value(ce).data()[0] * targets.len() as f64;
        tokens += targets.len();
    }
    if tokens == 0 {
        return Err(Error::Data("corpus has no predictable tokens".into()));
    }
    let mean = total / tokens as f64;
    Ok(PerplexityReport { perplexity: libm::exp(mean), mean_cross_entropy: mean, tokens })
}
