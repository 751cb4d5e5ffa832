//! Exploratory log-likelihood objective on enumerable chain-of-thought tasks
//! with a tabular softmax policy.
//!
//! CoT sequences are indexed `0..alphabet^cot_length` in base-`alphabet`
//! order. The policy holds one logit per CoT for `π(CoT|Q)` and, per CoT, one
//! logit row per answer position for `π(A|Q,CoT)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{normal, seeded, DeskRng};

pub const MAX_COTS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct EloTask {
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    pub cot_alphabet: usize,
    pub cot_length: usize,
    pub answer_alphabet: usize,
}

impl EloTask {
    pub fn validate(&self) -> Result<()> {
        if self.cot_alphabet == 0 || self.answer_alphabet == 0 {
            return Err(Error::Parameter("alphabets must be non-empty".into()));
        }
        if self.answer.is_empty() {
            return Err(Error::Parameter("answer must have at least one token".into()));
        }
        if let Some(&t) = self.answer.iter().find(|&&t| t as usize >= self.answer_alphabet) {
            return Err(Error::Index(format!("answer token {t} outside alphabet of {}", self.answer_alphabet)));
        }
        self.num_cots().map(|_| ())
    }

    /// `alphabet^cot_length`, refused above the enumeration limit.
    pub fn num_cots(&self) -> Result<usize> {
        let mut n = 1usize;
        for _ in 0..self.cot_length {
            n = n.saturating_mul(self.cot_alphabet);
            if n > MAX_COTS {
                return Err(Error::Parameter(format!(
                    "{}^{} CoTs exceed the enumeration limit of {MAX_COTS}",
                    self.cot_alphabet, self.cot_length
                )));
            }
        }
        Ok(n)
    }

    /// Tokens of CoT number `k`.
    pub fn cot_tokens(&self, mut k: usize) -> Vec<u32> {
        let mut out = vec![0; self.cot_length];
        for slot in out.iter_mut().rev() {
            *slot = (k % self.cot_alphabet) as u32;
            k /= self.cot_alphabet;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EloPolicy {
    pub cot_logits: Vec<f64>,
    /// `answer_logits[k][pos]` is a row over the answer alphabet.
    pub answer_logits: Vec<Vec<Vec<f64>>>,
}

impl EloPolicy {
    pub fn uniform(task: &EloTask) -> Result<Self> {
        task.validate()?;
        let k = task.num_cots()?;
        Ok(EloPolicy {
            cot_logits: vec![0.0; k],
            answer_logits: vec![vec![vec![0.0; task.answer_alphabet]; task.answer.len()]; k],
        })
    }

    /// Gaussian logits with standard deviation `scale`.
    pub fn random(task: &EloTask, scale: f64, rng: &mut DeskRng) -> Result<Self> {
        let mut p = Self::uniform(task)?;
        p.cot_logits.iter_mut().for_each(|x| *x = normal(rng, scale));
        for row in p.answer_logits.iter_mut().flatten().flatten() {
            *row = normal(rng, scale);
        }
        Ok(p)
    }

    pub fn check(&self, task: &EloTask) -> Result<()> {
        task.validate()?;
        let k = task.num_cots()?;
        let shape_ok = self.cot_logits.len() == k
            && self.answer_logits.len() == k
            && self.answer_logits.iter().all(|pos| {
                pos.len() == task.answer.len() && pos.iter().all(|r| r.len() == task.answer_alphabet)
            });
        if !shape_ok {
            return Err(Error::Dimension("policy tables do not match the task".into()));
        }
        Ok(())
    }

    /// `log π(CoT|Q)` for every CoT.
    pub fn cot_log_probs(&self) -> Vec<f64> {
        log_softmax(&self.cot_logits)
    }

    /// `log π(A|Q,CoT_k)`.
    pub fn answer_log_prob(&self, task: &EloTask, k: usize) -> f64 {
        self.answer_logits[k]
            .iter()
            .zip(&task.answer)
            .map(|(row, &a)| log_softmax(row)[a as usize])
            .sum()
    }
}

/// Log-softmax tolerating `-inf` logits.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![f64::NEG_INFINITY; xs.len()];
    }
    let lse = m + libm::log(xs.iter().map(|&x| libm::exp(x - m)).sum::<f64>());
    xs.iter().map(|&x| x - lse).collect()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(xs.map(|x| libm::exp(x - m)).sum::<f64>())
}

/// `−log Σ π(CoT|Q)·π(A|Q,CoT)`; `+∞` when the answer is unreachable.
pub fn elo_loss_exact(policy: &EloPolicy, task: &EloTask) -> Result<f64> {
    policy.check(task)?;
    let lp = policy.cot_log_probs();
    let terms: Vec<f64> = (0..lp.len()).map(|k| lp[k] + policy.answer_log_prob(task, k)).collect();
    Ok(-log_sum_exp(terms.iter().copied()))
}

/// `−Σ π(CoT|Q)·log π(A|Q,CoT)`; `+∞` when a reachable CoT gives the answer
/// zero probability.
pub fn upper_bound_exact(policy: &EloPolicy, task: &EloTask) -> Result<f64> {
    policy.check(task)?;
    let lp = policy.cot_log_probs();
    let mut total = 0.0;
    for (k, &l) in lp.iter().enumerate() {
        if l == f64::NEG_INFINITY {
            continue;
        }
        let s = policy.answer_log_prob(task, k);
        if s == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        total -= libm::exp(l) * s;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaselineSpec {
    Zero,
    BatchMean,
    #[default]
    LeaveOneOut,
}

impl BaselineSpec {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zero" => Ok(BaselineSpec::Zero),
            "batch_mean" => Ok(BaselineSpec::BatchMean),
            "leave_one_out" => Ok(BaselineSpec::LeaveOneOut),
            _ => Err(Error::Parameter(format!("unknown baseline {s:?}"))),
        }
    }
}

pub fn baseline_compute(scores: &[f64], spec: BaselineSpec) -> Result<Vec<f64>> {
    let n = scores.len();
    let sum: f64 = scores.iter().sum();
    match spec {
        BaselineSpec::Zero => Ok(vec![0.0; n]),
        BaselineSpec::BatchMean => {
            if n == 0 {
                return Ok(Vec::new());
            }
            Ok(vec![sum / n as f64; n])
        }
        BaselineSpec::LeaveOneOut => {
            if n < 2 {
                return Err(Error::Parameter(format!("leave-one-out baseline needs at least 2 samples, got {n}")));
            }
            Ok(scores.iter().map(|s| (sum - s) / (n - 1) as f64).collect())
        }
    }
}

/// Which parameters the estimator differentiates: only the CoT distribution,
/// or also the answer conditional through `log π(A|Q,CoT)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    #[default]
    CotOnly,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EloGradient {
    pub cot: Vec<f64>,
    pub answer: Vec<Vec<Vec<f64>>>,
}

impl EloGradient {
    fn zeros(policy: &EloPolicy) -> Self {
        EloGradient {
            cot: vec![0.0; policy.cot_logits.len()],
            answer: policy
                .answer_logits
                .iter()
                .map(|pos| pos.iter().map(|r| vec![0.0; r.len()]).collect())
                .collect(),
        }
    }

    /// Add `w·∇log π(CoT_k|Q)` to the CoT part.
    fn add_cot_score(&mut self, probs: &[f64], k: usize, w: f64) {
        for (j, g) in self.cot.iter_mut().enumerate() {
            *g += w * ((j == k) as u8 as f64 - probs[j]);
        }
    }

    /// Add `w·∇log π(A|Q,CoT_k)` to the answer part.
    fn add_answer_score(&mut self, policy: &EloPolicy, task: &EloTask, k: usize, w: f64) {
        for (pos, row) in policy.answer_logits[k].iter().enumerate() {
            let p: Vec<f64> = log_softmax(row).into_iter().map(libm::exp).collect();
            for (j, g) in self.answer[k][pos].iter_mut().enumerate() {
                *g += w * ((j == task.answer[pos] as usize) as u8 as f64 - p[j]);
            }
        }
    }

    pub fn max_abs_diff(&self, other: &EloGradient) -> f64 {
        let a = self.cot.iter().zip(&other.cot);
        let b = self.answer.iter().flatten().flatten().zip(other.answer.iter().flatten().flatten());
        a.chain(b).map(|(x, y)| libm::fabs(x - y)).fold(0.0, f64::max)
    }
}

/// Analytic gradient of the upper bound:
/// `∂/∂θ_k = −π(k)·(ℓ(k) − Σ_j π(j)ℓ(j))` with `ℓ = log π(A|Q,CoT)`, plus the
/// answer-logit part in full mode.
pub fn upper_bound_gradient(policy: &EloPolicy, task: &EloTask, mode: GradMode) -> Result<EloGradient> {
    policy.check(task)?;
    let probs: Vec<f64> = policy.cot_log_probs().into_iter().map(libm::exp).collect();
    let scores: Vec<f64> = (0..probs.len()).map(|k| policy.answer_log_prob(task, k)).collect();
    if let Some(k) = (0..probs.len()).find(|&k| probs[k] > 0.0 && scores[k] == f64::NEG_INFINITY) {
        return Err(Error::Numeric(format!("CoT {k} is reachable but gives the answer zero probability")));
    }
    let mean: f64 = (0..probs.len()).filter(|&k| probs[k] > 0.0).map(|k| probs[k] * scores[k]).sum();
    let mut g = EloGradient::zeros(policy);
    for k in 0..probs.len() {
        g.cot[k] = if probs[k] > 0.0 { -probs[k] * (scores[k] - mean) } else { 0.0 };
        if mode == GradMode::Full && probs[k] > 0.0 {
            g.add_answer_score(policy, task, k, -probs[k]);
        }
    }
    Ok(g)
}

/// The score-function estimator with every CoT weighted by its probability
/// instead of sampled, using a constant baseline `b`.
pub fn elo_gradient_enumerated(policy: &EloPolicy, task: &EloTask, b: f64, mode: GradMode) -> Result<EloGradient> {
    policy.check(task)?;
    let probs: Vec<f64> = policy.cot_log_probs().into_iter().map(libm::exp).collect();
    let mut g = EloGradient::zeros(policy);
    for k in (0..probs.len()).filter(|&k| probs[k] > 0.0) {
        let s = policy.answer_log_prob(task, k);
        if s == f64::NEG_INFINITY {
            return Err(Error::Numeric(format!("CoT {k} is reachable but gives the answer zero probability")));
        }
        g.add_cot_score(&probs, k, -probs[k] * (s - b));
        if mode == GradMode::Full {
            g.add_answer_score(policy, task, k, -probs[k]);
        }
    }
    Ok(g)
}

/// Estimator for a given batch of sampled CoT indices.
pub fn elo_gradient_from_samples(
    policy: &EloPolicy,
    task: &EloTask,
    samples: &[usize],
    baseline: BaselineSpec,
    mode: GradMode,
) -> Result<EloGradient> {
    policy.check(task)?;
    let probs: Vec<f64> = policy.cot_log_probs().into_iter().map(libm::exp).collect();
    let mut scores = Vec::with_capacity(samples.len());
    for &k in samples {
        if k >= probs.len() {
            return Err(Error::Index(format!("CoT {k} outside {} CoTs", probs.len())));
        }
        let s = policy.answer_log_prob(task, k);
        if s == f64::NEG_INFINITY {
            return Err(Error::Numeric(format!("sampled CoT {k} gives the answer zero probability")));
        }
        scores.push(s);
    }
    let b = baseline_compute(&scores, baseline)?;
    let n = samples.len() as f64;
    let mut g = EloGradient::zeros(policy);
    for (i, &k) in samples.iter().enumerate() {
        g.add_cot_score(&probs, k, -(scores[i] - b[i]) / n);
        if mode == GradMode::Full {
            g.add_answer_score(policy, task, k, -1.0 / n);
        }
    }
    Ok(g)
}

/// Sample `n` CoTs from `π(CoT|Q)` and return the estimator.
pub fn elo_gradient_estimate(
    policy: &EloPolicy,
    task: &EloTask,
    n: usize,
    baseline: BaselineSpec,
    mode: GradMode,
    seed: u64,
) -> Result<EloGradient> {
    if n == 0 {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    policy.check(task)?;
    let mut rng = seeded(seed);
    let samples = sample_cots(policy, n, &mut rng);
    elo_gradient_from_samples(policy, task, &samples, baseline, mode)
}

pub fn sample_cots(policy: &EloPolicy, n: usize, rng: &mut DeskRng) -> Vec<usize> {
    let probs: Vec<f64> = policy.cot_log_probs().into_iter().map(libm::exp).collect();
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return k;
                }
            }
            last
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EloStep {
    pub step: usize,
    pub l_elo: f64,
    pub l_upper: f64,
    /// `π(A|Q) = exp(−L_ELO)`.
    pub p_answer: f64,
}

/// Gradient descent on the upper bound with the enumerated estimator. Returns
/// one row per step, the first before any update, stopping early once
/// `π(A|Q)` exceeds `target`.
pub fn train_elo(
    policy: &mut EloPolicy,
    task: &EloTask,
    steps: usize,
    lr: f64,
    mode: GradMode,
    target: f64,
) -> Result<Vec<EloStep>> {
    let mut log = Vec::new();
    for step in 0..=steps {
        let l_elo = elo_loss_exact(policy, task)?;
        let l_upper = upper_bound_exact(policy, task)?;
        let p_answer = libm::exp(-l_elo);
        log.push(EloStep { step, l_elo, l_upper, p_answer });
        if p_answer > target || step == steps {
            break;
        }
        let g = elo_gradient_enumerated(policy, task, 0.0, mode)?;
        for (x, d) in policy.cot_logits.iter_mut().zip(&g.cot) {
            *x -= lr * d;
        }
        if mode == GradMode::Full {
            let params = policy.answer_logits.iter_mut().flatten().flatten();
            for (x, d) in params.zip(g.answer.iter().flatten().flatten()) {
                *x -= lr * d;
            }
        }
    }
    Ok(log)
}

/// A task with a single correct CoT: the answer logits give the answer
/// probability `hit` on CoT `good` and `miss` elsewhere.
pub fn toy_task(cot_alphabet: usize, cot_length: usize, good: usize, hit: f64, miss: f64) -> Result<(EloTask, EloPolicy)> {
    let task = EloTask { question: vec![0], answer: vec![0], cot_alphabet, cot_length, answer_alphabet: 2 };
    let mut policy = EloPolicy::uniform(&task)?;
    if good >= policy.cot_logits.len() || !(0.0 < miss && miss < 1.0 && 0.0 < hit && hit < 1.0) {
        return Err(Error::Parameter("good CoT out of range or probabilities outside (0, 1)".into()));
    }
    for (k, pos) in policy.answer_logits.iter_mut().enumerate() {
        let p = if k == good { hit } else { miss };
        pos[0] = vec![libm::log(p), libm::log(1.0 - p)];
    }
    Ok((task, policy))
}

#[cfg(test)]
mod tests;
