//! AdamW, adaptive gradient clipping, the warmup-stable-decay schedule and
//! the staged curriculum driver.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::{batch_loss_and_grad, ModelConfig, ModelParams, SequenceExample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: u64,
    pub stable_steps: u64,
    pub decay_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub batch_tokens: usize,
    /// Gate updates through [`AgcState`]; off means every step updates.
    pub agc: bool,
}

impl TrainConfig {
    /// Full-scale pre-training constants with a desk batch size.
    pub fn reference(stable_steps: u64, decay_steps: u64) -> Self {
        TrainConfig {
            peak_lr: 4e-4,
            floor_lr: 2e-5,
            warmup_steps: 2000,
            stable_steps,
            decay_steps,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            batch_tokens: 16_384,
            agc: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.floor_lr > 0.0 && self.floor_lr <= self.peak_lr) {
            return Err(Error::Config(format!(
                "need 0 < floor_lr <= peak_lr, got floor {} peak {}",
                self.floor_lr, self.peak_lr
            )));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("betas ({}, {}) outside [0, 1)", self.beta1, self.beta2)));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 || self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("eps and grad_clip_norm must be positive, weight_decay non-negative".into()));
        }
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear from 0 over the warmup, flat at the peak,
/// cosine down to the floor over the decay, then the floor.
pub fn wsd_lr(step: u64, c: &TrainConfig) -> f64 {
    wsd_lr_at(step as f64, c)
}

/// [`wsd_lr`] over continuous time.
pub fn wsd_lr_at(t: f64, c: &TrainConfig) -> f64 {
    let warmup = c.warmup_steps as f64;
    let stable_end = warmup + c.stable_steps as f64;
    let decay = c.decay_steps as f64;
    if t < warmup {
        c.peak_lr * t.max(0.0) / warmup
    } else if t < stable_end {
        c.peak_lr
    } else if t < stable_end + decay {
        let progress = (t - stable_end) / decay;
        c.floor_lr + 0.5 * (c.peak_lr - c.floor_lr) * (1.0 + libm::cos(PI * progress))
    } else {
        c.floor_lr
    }
}

pub const AGC_HISTORY: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgcDecision {
    Update,
    Skip,
}

/// Gradient-norm history and skip counter of the adaptive clipping gate.
#[derive(Debug, Clone, PartialEq)]
pub struct AgcState {
    history: VecDeque<f64>,
    skip_counter: u32,
    max_skip: u32,
}

impl Default for AgcState {
    fn default() -> Self {
        AgcState { history: VecDeque::with_capacity(AGC_HISTORY + 1), skip_counter: 0, max_skip: 1 }
    }
}

impl AgcState {
    pub fn history(&self) -> impl Iterator<Item = f64> + '_ {
        self.history.iter().copied()
    }

    pub fn skip_counter(&self) -> u32 {
        self.skip_counter
    }

    pub fn max_skip(&self) -> u32 {
        self.max_skip
    }

    /// Decide whether the step with gradient norm `norm` may update.
    ///
    /// A spike is a norm above `1.2·avg + 0.1` once 100 norms are stored. One
    /// spike is skipped; a second in a row is forced through. Only norms of
    /// updating steps enter the history. A non-finite norm returns a numeric
    /// error and leaves the state untouched; callers skip that step.
    pub fn gate(&mut self, norm: f64) -> Result<AgcDecision> {
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm {norm}")));
        }
        if self.history.len() >= AGC_HISTORY {
            let avg = self.history.iter().sum::<f64>() / AGC_HISTORY as f64;
            if norm > 1.2 * avg + 0.1 {
                if self.skip_counter < self.max_skip {
                    self.skip_counter += 1;
                    return Ok(AgcDecision::Skip);
                }
                self.skip_counter = 0;
            }
        }
        self.history.push_back(norm);
        if self.history.len() > AGC_HISTORY {
            self.history.pop_front();
        }
        self.skip_counter = 0;
        Ok(AgcDecision::Update)
    }
}

pub fn agc_gate(norm: f64, state: &mut AgcState) -> Result<AgcDecision> {
    state.gate(norm)
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    libm::sqrt(grads.iter().map(Tensor::sq_norm).sum())
}

/// One AdamW update. Gradients are first rescaled to global norm at most
/// `grad_clip_norm`; weight decay is decoupled (`p -= lr·wd·p`). `step`
/// counts updates from 1 and drives bias correction. Returns the
/// pre-clipping gradient norm.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    step: u64,
    lr: f64,
    c: &TrainConfig,
) -> Result<f64> {
    if step == 0 {
        return Err(Error::State("optimizer steps count from 1".into()));
    }
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::State(format!(
            "{} params, {} grads, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::State(format!(
                "parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    let norm = global_norm(grads);
    let clip = if norm > c.grad_clip_norm { c.grad_clip_norm / norm } else { 1.0 };
    let bc1 = 1.0 - libm::pow(c.beta1, step as f64);
    let bc2 = 1.0 - libm::pow(c.beta2, step as f64);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj * clip;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            let gc = gj * clip;
            *vj = c.beta2 * *vj + (1.0 - c.beta2) * gc * gc;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, &mj), &vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pj -= lr * c.weight_decay * *pj;
            *pj -= lr * (mj / bc1) / (libm::sqrt(vj / bc2) + c.eps);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub token_budget: u64,
    pub context_len: usize,
    pub rope_base: f64,
    /// Name of the data policy set the stage draws from.
    pub data_policy: alloc::string::String,
}

/// Stage change reported when the token counter crosses a budget boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTransition {
    pub stage: usize,
    pub at_tokens: u64,
    pub context_len: usize,
    pub rope_base: f64,
}

/// Index of the stage active after `tokens` tokens: the first stage whose
/// cumulative budget exceeds the counter, or the last stage once all budgets
/// are spent.
pub fn curriculum_schedule(stages: &[StageSpec], tokens: u64) -> Result<usize> {
    if stages.is_empty() {
        return Err(Error::Config("curriculum has no stages".into()));
    }
    let mut end = 0u64;
    for (i, s) in stages.iter().enumerate() {
        end += s.token_budget;
        if tokens < end {
            return Ok(i);
        }
    }
    Ok(stages.len() - 1)
}

/// Every stage boundary with the settings the next stage switches to.
pub fn curriculum_transitions(stages: &[StageSpec]) -> Vec<StageTransition> {
    let mut out = Vec::new();
    let mut end = 0u64;
    for (i, pair) in stages.windows(2).enumerate() {
        end += pair[0].token_budget;
        out.push(StageTransition {
            stage: i + 1,
            at_tokens: end,
            context_len: pair[1].context_len,
            rope_base: pair[1].rope_base,
        });
    }
    out
}

/// One training sequence with explicit next-token targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub tokens: Vec<u32>,
    pub targets: Vec<Option<u32>>,
    pub sample_ids: Option<Vec<u32>>,
}

impl TrainSequence {
    /// Language-model targets for a packed row: each position predicts the
    /// next token of the same sample. Sample id 0 marks padding.
    pub fn from_packed(tokens: &[u32], sample_ids: &[u32]) -> Self {
        let n = tokens.len();
        let targets = (0..n)
            .map(|i| {
                (i + 1 < n && sample_ids[i] != 0 && sample_ids[i + 1] == sample_ids[i]).then(|| tokens[i + 1])
            })
            .collect();
        TrainSequence { tokens: tokens.to_vec(), targets, sample_ids: Some(sample_ids.to_vec()) }
    }

    pub fn as_example(&self) -> SequenceExample<'_> {
        SequenceExample { tokens: &self.tokens, targets: &self.targets, sample_ids: self.sample_ids.as_deref() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub sequences: Vec<TrainSequence>,
    /// Multiplier on the batch loss before differentiation; 1 for ordinary data.
    pub loss_scale: f64,
}

impl TrainBatch {
    pub fn new(sequences: Vec<TrainSequence>) -> Self {
        TrainBatch { sequences, loss_scale: 1.0 }
    }

    pub fn tokens(&self) -> u64 {
        self.sequences.iter().map(|s| s.tokens.len() as u64).sum()
    }
}

/// Everything that evolves across optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    /// Batches consumed, skipped or not.
    pub step: u64,
    /// Parameter updates applied.
    pub updates: u64,
    pub tokens: u64,
    pub agc: AgcState,
    pub stage: usize,
}

impl TrainState {
    pub fn new(params: &ModelParams) -> Self {
        TrainState {
            adam: AdamState::zeros_like(&params.tensors()),
            step: 0,
            updates: 0,
            tokens: 0,
            agc: AgcState::default(),
            stage: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub tokens: u64,
    /// Unscaled mean cross entropy of the batch.
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub skipped: bool,
    pub stage: usize,
}

/// Train on `batches` until the stage's token budget is consumed.
///
/// Each batch is one step: loss and gradient, the AGC gate when enabled, and
/// on update an AdamW step at the scheduled rate. Skipped batches still count
/// toward the budget. The stage's `rope_base` overrides the model config.
pub fn run_stage(
    params: &mut ModelParams,
    model_config: &ModelConfig,
    stage: &StageSpec,
    batches: &mut dyn Iterator<Item = TrainBatch>,
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<Vec<MetricRow>> {
    config.validate()?;
    if stage.token_budget == 0 {
        return Err(Error::Config("stage token budget must be positive".into()));
    }
    let mut mc = model_config.clone();
    mc.rope_base = stage.rope_base;
    let mut log = Vec::new();
    let mut consumed = 0u64;
    while consumed < stage.token_budget {
        let Some(batch) = batches.next() else {
            return Err(Error::Data(format!(
                "data exhausted after {consumed} of {} stage tokens",
                stage.token_budget
            )));
        };
        if let Some(bad) = batch.sequences.iter().find(|s| s.tokens.len() != stage.context_len) {
            return Err(Error::Data(format!(
                "sequence of length {} in a stage with context {}",
                bad.tokens.len(),
                stage.context_len
            )));
        }
        let examples: Vec<SequenceExample<'_>> = batch.sequences.iter().map(TrainSequence::as_example).collect();
        let LossAndGradScaled { loss, grads } = scaled_loss_and_grad(params, &mc, &examples, batch.loss_scale)?;
        let norm = global_norm(&grads);
        let lr = wsd_lr(state.step, config);
        let update = if config.agc {
            matches!(state.agc.gate(norm), Ok(AgcDecision::Update))
        } else {
            norm.is_finite()
        };
        if update {
            state.updates += 1;
            let mut tensors = params.tensors_mut();
            adamw_step(&mut tensors, &grads, &mut state.adam, state.updates, lr, config)?;
        }
        consumed += batch.tokens();
        state.tokens += batch.tokens();
        state.step += 1;
        log.push(MetricRow {
            step: state.step,
            tokens: state.tokens,
            loss,
            grad_norm: norm,
            lr,
            skipped: !update,
            stage: state.stage,
        });
    }
    Ok(log)
}

struct LossAndGradScaled {
    loss: f64,
    grads: Vec<Tensor>,
}

fn scaled_loss_and_grad(
    params: &ModelParams,
    config: &ModelConfig,
    examples: &[SequenceExample<'_>],
    scale: f64,
) -> Result<LossAndGradScaled> {
    let mut out = batch_loss_and_grad(params, config, examples)?;
    if scale != 1.0 {
        for g in &mut out.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(LossAndGradScaled { loss: out.loss, grads: out.grads })
}

/// Run every stage in order, logging transitions through the stage field of
/// the metric rows. `batches_for` supplies the data stream of a stage.
pub fn run_curriculum<I: Iterator<Item = TrainBatch>>(
    params: &mut ModelParams,
    model_config: &ModelConfig,
    stages: &[StageSpec],
    mut batches_for: impl FnMut(usize, &StageSpec) -> I,
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<Vec<MetricRow>> {
    if stages.is_empty() {
        return Err(Error::Config("curriculum has no stages".into()));
    }
    let mut log = Vec::new();
    for (i, stage) in stages.iter().enumerate() {
        state.stage = i;
        let mut data = batches_for(i, stage);
        log.extend(run_stage(params, model_config, stage, &mut data, config, state)?);
    }
    Ok(log)
}
