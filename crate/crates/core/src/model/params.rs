use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::config::{LayerKind, ModelConfig};
use crate::error::Result;
use crate::rng::{normal, seeded, DeskRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub attn_norm: Tensor,
    /// `[d_model, heads·head_dim]`
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[conv_kernel_size, heads·head_dim]`, absent when the config disables KV convolution.
    pub conv_k: Option<Tensor>,
    pub conv_v: Option<Tensor>,
    /// `[heads·head_dim, d_model]`
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// All trainable tensors of a model.
///
/// [`ModelParams::tensors`] fixes the canonical order used by optimizers and
/// checkpoints: embedding, then per layer `attn_norm, wq, wk, wv, conv_k,
/// conv_v, wo, ffn_norm, w_gate, w_up, w_down` (conv kernels only when
/// present), then `final_norm` and `head`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl LayerParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::with_capacity(11);
        out.push(("attn_norm", &self.attn_norm));
        out.push(("wq", &self.wq));
        out.push(("wk", &self.wk));
        out.push(("wv", &self.wv));
        if let Some(c) = &self.conv_k {
            out.push(("conv_k", c));
        }
        if let Some(c) = &self.conv_v {
            out.push(("conv_v", c));
        }
        out.push(("wo", &self.wo));
        out.push(("ffn_norm", &self.ffn_norm));
        out.push(("w_gate", &self.w_gate));
        out.push(("w_up", &self.w_up));
        out.push(("w_down", &self.w_down));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(11);
        out.push(&mut self.attn_norm);
        out.push(&mut self.wq);
        out.push(&mut self.wk);
        out.push(&mut self.wv);
        if let Some(c) = &mut self.conv_k {
            out.push(c);
        }
        if let Some(c) = &mut self.conv_v {
            out.push(c);
        }
        out.push(&mut self.wo);
        out.push(&mut self.ffn_norm);
        out.push(&mut self.w_gate);
        out.push(&mut self.w_up);
        out.push(&mut self.w_down);
        out
    }
}

impl ModelParams {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push((String::from("embedding"), &self.embedding));
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push((String::from("final_norm"), &self.final_norm));
        out.push((String::from("head"), &self.head));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.embedding);
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// Closed-form parameter count:
///
/// ```text
/// V·d                                   embedding
/// + Σ_layers [ 2d                       two RMSNorm gains
///            + 3·d·w  + w·d             q, k, v, o   (w = heads·head_dim of the layer kind)
///            + 2·k·w                    key and value conv kernels (if enabled)
///            + 3·d·h ]                  SwiGLU gate, up, down
/// + d + d·V                             final norm and output head
/// ```
pub fn param_count(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let v = config.vocab_size;
    let h = config.ffn_hidden;
    let per_layer = |kind: LayerKind| {
        let w = config.attn_width(kind);
        let conv = if config.kv_conv { 2 * config.conv_kernel_size * w } else { 0 };
        2 * d + 4 * d * w + conv + 3 * d * h
    };
    v * d + config.layer_pattern.iter().map(|&k| per_layer(k)).sum::<usize>() + d + d * v
}

fn init(rng: &mut DeskRng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal(rng, std)).collect();
    Tensor::new(shape, data).expect("shape from validated config")
}

/// Conv kernels start as the identity filter (last tap one).
fn identity_conv(k: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[k, width]);
    t.data_mut()[(k - 1) * width..].iter_mut().for_each(|v| *v = 1.0);
    t
}

/// Initialize parameters from a seeded normal distribution: std 0.02 for the
/// embedding and projections, `0.02 / sqrt(2·n_layers)` for the two residual
/// output projections (`wo`, `w_down`), unit norm gains.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = seeded(seed);
    let d = config.d_model;
    let std = 0.02;
    let resid_std = std / libm::sqrt(2.0 * config.n_layers as f64);
    let embedding = init(&mut rng, &[config.vocab_size, d], std);
    let layers = config
        .layer_pattern
        .iter()
        .map(|&kind| {
            let w = config.attn_width(kind);
            let conv = || config.kv_conv.then(|| identity_conv(config.conv_kernel_size, w));
            LayerParams {
                kind,
                attn_norm: Tensor::filled(&[d], 1.0),
                wq: init(&mut rng, &[d, w], std),
                wk: init(&mut rng, &[d, w], std),
                wv: init(&mut rng, &[d, w], std),
                conv_k: conv(),
                conv_v: conv(),
                wo: init(&mut rng, &[w, d], resid_std),
                ffn_norm: Tensor::filled(&[d], 1.0),
                w_gate: init(&mut rng, &[d, config.ffn_hidden], std),
                w_up: init(&mut rng, &[d, config.ffn_hidden], std),
                w_down: init(&mut rng, &[config.ffn_hidden, d], resid_std),
            }
        })
        .collect();
    let final_norm = Tensor::filled(&[d], 1.0);
    let head = init(&mut rng, &[d, config.vocab_size], std);
    Ok(ModelParams { embedding, layers, final_norm, head })
}
