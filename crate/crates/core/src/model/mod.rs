//! Hybrid global / sliding-window attention transformer.
//!
//! Each layer is a pre-norm block: `x + attn(rmsnorm(x))` followed by
//! `x + swiglu(rmsnorm(x))`. Attention layers come in two kinds with their own
//! head geometry. Keys and values pass through a short depthwise causal
//! convolution over time before rotary embedding is applied to queries and
//! (post-convolution) keys.

mod attention;
mod cache_size;
mod config;
mod forward;
mod params;

pub use attention::{attention_forward, layer_mask, sliding_window_mask, KvCache, LayerCache};
pub use cache_size::kv_cache_size;
pub use config::{LayerKind, ModelConfig};
pub use forward::{
    batch_loss_and_grad, bind_params, bind_params_with, model_forward, model_forward_graph, BoundLayer, BoundParams,
    LossAndGrad, SequenceExample,
};
pub use params::{build_model, param_count, LayerParams, ModelParams};

#[cfg(test)]
mod tests;
