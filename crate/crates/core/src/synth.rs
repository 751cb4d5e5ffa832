//! Seeded synthetic corpora for desk experiments.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::NiahVocab;
use crate::rng::DeskRng;
use crate::trainer::TrainSequence;

/// A sparse first-order Markov source: every token has `branching` possible
/// successors with geometric weights, so its entropy rate sits well below
/// `ln(vocab)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    pub vocab: usize,
    successors: Vec<Vec<u32>>,
    weights: Vec<f64>,
}

impl MarkovSource {
    pub fn new(vocab: usize, branching: usize, rng: &mut DeskRng) -> Result<Self> {
        if vocab < 2 || branching == 0 || branching > vocab {
            return Err(Error::Parameter("need vocab >= 2 and 1 <= branching <= vocab".into()));
        }
        let all: Vec<u32> = (0..vocab as u32).collect();
        let successors = (0..vocab)
            .map(|_| all.choose_multiple(rng, branching).copied().collect())
            .collect();
        let raw: Vec<f64> = (0..branching).map(|i| libm::pow(0.5, i as f64)).collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        Ok(MarkovSource { vocab, successors, weights })
    }

    /// Entropy rate in nats per token.
    pub fn entropy(&self) -> f64 {
        -self.weights.iter().map(|&w| w * libm::log(w)).sum::<f64>()
    }

    pub fn sample(&self, len: usize, rng: &mut DeskRng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut cur = rng.random_range(0..self.vocab as u32);
        for _ in 0..len {
            out.push(cur);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.weights.len() - 1;
            for (i, &w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            cur = self.successors[cur as usize][pick];
        }
        out
    }
}

/// Associative-recall training row of length `len`: filler with `pairs`
/// distinct key/value needles, each key repeated at least `min_gap` positions
/// later. Only the positions holding a repeated key are scored, with that
/// key's value as the target.
pub fn retrieval_sequence(
    vocab: &NiahVocab,
    len: usize,
    pairs: usize,
    min_gap: usize,
    rng: &mut DeskRng,
) -> Result<TrainSequence> {
    vocab.validate()?;
    if vocab.key_len != 1 || vocab.value_len != 1 {
        return Err(Error::Parameter("retrieval rows use single-token keys and values".into()));
    }
    // Needles and queries occupy two-token cells.
    let cells = len / 2;
    let gap_cells = min_gap.div_ceil(2).max(1);
    if pairs == 0 || pairs > vocab.keys.len() || 2 * pairs > cells.saturating_sub(gap_cells) {
        return Err(Error::Parameter(format!(
            "{pairs} pairs with gap {min_gap} do not fit a row of {len} over {} keys",
            vocab.keys.len()
        )));
    }
    let mut tokens: Vec<u32> = (0..len).map(|_| rng.random_range(vocab.filler.clone())).collect();
    let mut targets = vec![None; len];
    let all_keys: Vec<u32> = vocab.keys.clone().collect();
    let keys: Vec<u32> = all_keys.choose_multiple(rng, pairs).copied().collect();
    let mut used = vec![false; cells];
    for &key in &keys {
        let (needle, query) = loop {
            let a = rng.random_range(0..cells - gap_cells);
            let b = rng.random_range(a + gap_cells..cells);
            if !used[a] && !used[b] {
                break (a, b);
            }
        };
        used[needle] = true;
        used[query] = true;
        let value = rng.random_range(vocab.values.clone());
        tokens[2 * needle] = key;
        tokens[2 * needle + 1] = value;
        tokens[2 * query] = key;
        tokens[2 * query + 1] = value;
        targets[2 * query] = Some(value);
    }
    Ok(TrainSequence { tokens, targets, sample_ids: None })
}
