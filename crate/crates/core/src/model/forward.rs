use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use super::attention::{attention_forward, layer_mask, KvCache};
use super::config::{LayerKind, ModelConfig};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Graph handles for one layer's parameters.
#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub kind: LayerKind,
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub conv_k: Option<Var>,
    pub conv_v: Option<Var>,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

#[derive(Debug, Clone)]
pub struct BoundParams {
    pub embedding: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
    pub head: Var,
    /// Every handle in [`ModelParams::tensors`] order.
    pub all: Vec<Var>,
}

/// Put the parameters on the tape, as differentiation targets when
/// `trainable` and as constants otherwise.
pub fn bind_params(g: &mut Graph, params: &ModelParams, trainable: bool) -> BoundParams {
    bind_params_with(g, params, |g, t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
}

/// Bind parameters through a caller-supplied constructor, visited in
/// [`ModelParams::tensors`] order.
pub fn bind_params_with(
    g: &mut Graph,
    params: &ModelParams,
    mut make: impl FnMut(&mut Graph, &Tensor) -> Var,
) -> BoundParams {
    let mut all = Vec::new();
    let mut bind = |g: &mut Graph, t: &Tensor| {
        let v = make(g, t);
        all.push(v);
        v
    };
    let embedding = bind(g, &params.embedding);
    let layers = params
        .layers
        .iter()
        .map(|l| BoundLayer {
            kind: l.kind,
            attn_norm: bind(g, &l.attn_norm),
            wq: bind(g, &l.wq),
            wk: bind(g, &l.wk),
            wv: bind(g, &l.wv),
            conv_k: l.conv_k.as_ref().map(|c| bind(g, c)),
            conv_v: l.conv_v.as_ref().map(|c| bind(g, c)),
            wo: bind(g, &l.wo),
            ffn_norm: bind(g, &l.ffn_norm),
            w_gate: bind(g, &l.w_gate),
            w_up: bind(g, &l.w_up),
            w_down: bind(g, &l.w_down),
        })
        .collect();
    let final_norm = bind(g, &params.final_norm);
    let head = bind(g, &params.head);
    BoundParams { embedding, layers, final_norm, head, all }
}

/// Logits `[t, vocab_size]` for `tokens`.
///
/// With `sample_ids` (one per position, covering cached positions too) no
/// attention crosses a change of id. With a cache the tokens continue the
/// cached sequence and the cache is extended.
pub fn model_forward_graph(
    g: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    tokens: &[u32],
    sample_ids: Option<&[u32]>,
    mut cache: Option<&mut KvCache>,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Parameter("forward pass over zero tokens".into()));
    }
    if bound.layers.len() != config.n_layers {
        return Err(Error::Config(format!(
            "{} bound layers for a {}-layer config",
            bound.layers.len(),
            config.n_layers
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Index(format!("token {bad} outside vocabulary of {}", config.vocab_size)));
    }
    let t = tokens.len();
    let offset = cache.as_deref().map_or(0, KvCache::len);
    if let Some(c) = cache.as_deref() {
        if c.layers.len() != config.n_layers {
            return Err(Error::State(format!("cache has {} layers", c.layers.len())));
        }
    }
    let global_mask = Rc::new(layer_mask(LayerKind::Global, config.window_size, t, offset, sample_ids)?);
    let swa_mask = Rc::new(layer_mask(LayerKind::Swa, config.window_size, t, offset, sample_ids)?);

    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut h = g.embedding(bound.embedding, &ids)?;
    for (i, layer) in bound.layers.iter().enumerate() {
        let mask = match layer.kind {
            LayerKind::Global => global_mask.clone(),
            LayerKind::Swa => swa_mask.clone(),
        };
        let normed = g.rmsnorm(h, layer.attn_norm, config.norm_eps)?;
        let layer_cache = cache.as_deref_mut().map(|c| &mut c.layers[i]);
        let attn = attention_forward(g, normed, layer, config, mask, offset, sample_ids, layer_cache)?;
        h = g.add(h, attn)?;
        let normed = g.rmsnorm(h, layer.ffn_norm, config.norm_eps)?;
        let ffn = g.swiglu_ffn(normed, layer.w_gate, layer.w_up, layer.w_down)?;
        h = g.add(h, ffn)?;
    }
    let h = g.rmsnorm(h, bound.final_norm, config.norm_eps)?;
    g.matmul(h, bound.head)
}

/// Inference-only forward pass returning logits `[t, vocab_size]`.
pub fn model_forward(
    tokens: &[u32],
    params: &ModelParams,
    config: &ModelConfig,
    sample_ids: Option<&[u32]>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, false);
    let logits = model_forward_graph(&mut g, &bound, config, tokens, sample_ids, None)?;
    Ok(g.value(logits).clone())
}

/// One training sequence: inputs, per-position next-token targets (`None`
/// positions are not scored) and optional packing sample ids.
#[derive(Debug, Clone, Copy)]
pub struct SequenceExample<'a> {
    pub tokens: &'a [u32],
    pub targets: &'a [Option<u32>],
    pub sample_ids: Option<&'a [u32]>,
}

#[derive(Debug, Clone)]
pub struct LossAndGrad {
    /// Mean cross entropy over all scored positions of the batch.
    pub loss: f64,
    /// Gradients in [`ModelParams::tensors`] order.
    pub grads: Vec<Tensor>,
    pub scored: usize,
}

/// Token-weighted mean loss over a batch and its gradient. Each sequence gets
/// its own tape so peak memory is one sequence's activations.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[SequenceExample<'_>],
) -> Result<LossAndGrad> {
    let scored: usize = batch.iter().map(|ex| ex.targets.iter().flatten().count()).sum();
    if scored == 0 {
        return Err(Error::Data("batch has no scored positions".into()));
    }
    let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut loss = 0.0;
    for ex in batch {
        if ex.targets.len() != ex.tokens.len() {
            return Err(Error::Dimension(format!(
                "{} targets for {} tokens",
                ex.targets.len(),
                ex.tokens.len()
            )));
        }
        let count = ex.targets.iter().flatten().count();
        if count == 0 {
            continue;
        }
        let weight = count as f64 / scored as f64;
        let mut g = Graph::new();
        let bound = bind_params(&mut g, params, true);
        let logits = model_forward_graph(&mut g, &bound, config, ex.tokens, ex.sample_ids, None)?;
        let targets: Vec<Option<usize>> = ex.targets.iter().map(|t| t.map(|v| v as usize)).collect();
        let ce = g.cross_entropy_masked(logits, &targets)?;
        let weighted = g.scale(ce, weight);
        loss += g.value(weighted).data()[0];
        g.backward(weighted)?;
        for (acc, &v) in grads.iter_mut().zip(&bound.all) {
            if let Some(gv) = g.grad_data(v) {
                for (a, b) in acc.data_mut().iter_mut().zip(gv) {
                    *a += b;
                }
            }
        }
    }
    Ok(LossAndGrad { loss, grads, scored })
}
