use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// Full causal attention over the whole context.
    Global,
    /// Causal attention restricted to the last `window_size` positions.
    Swa,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Global => "GLOBAL",
            LayerKind::Swa => "SWA",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "GLOBAL" | "G" => Ok(LayerKind::Global),
            "SWA" | "S" => Ok(LayerKind::Swa),
            other => Err(Error::Config(format!("unknown layer kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub layer_pattern: Vec<LayerKind>,
    pub global_heads: usize,
    pub global_head_dim: usize,
    pub swa_heads: usize,
    pub swa_head_dim: usize,
    pub window_size: usize,
    pub rope_base: f64,
    /// Taps of the key/value temporal convolution.
    pub conv_kernel_size: usize,
    /// When false the key/value convolution is left out entirely.
    pub kv_conv: bool,
    pub ffn_hidden: usize,
    /// Query heads per KV head, used only by the cache-size accounting.
    pub kv_group_size: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale default: `n_layers` repeating `[SWA, SWA, SWA, GLOBAL]`,
    /// two wide global heads and four narrow sliding-window heads.
    pub fn desk(vocab_size: usize, n_layers: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers,
            layer_pattern: Self::repeating_pattern(n_layers, 4),
            global_heads: 2,
            global_head_dim: 32,
            swa_heads: 4,
            swa_head_dim: 16,
            window_size: 64,
            rope_base: 1e6,
            conv_kernel_size: 2,
            kv_conv: true,
            ffn_hidden: 128,
            kv_group_size: 1,
            norm_eps: 1e-6,
        }
    }

    /// Every `period`-th layer global, the rest sliding-window.
    pub fn repeating_pattern(n_layers: usize, period: usize) -> Vec<LayerKind> {
        (0..n_layers)
            .map(|i| if period > 0 && (i + 1) % period == 0 { LayerKind::Global } else { LayerKind::Swa })
            .collect()
    }

    pub fn heads(&self, kind: LayerKind) -> usize {
        match kind {
            LayerKind::Global => self.global_heads,
            LayerKind::Swa => self.swa_heads,
        }
    }

    pub fn head_dim(&self, kind: LayerKind) -> usize {
        match kind {
            LayerKind::Global => self.global_head_dim,
            LayerKind::Swa => self.swa_head_dim,
        }
    }

    /// Width of the q/k/v projections for a layer kind.
    pub fn attn_width(&self, kind: LayerKind) -> usize {
        self.heads(kind) * self.head_dim(kind)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("global_heads", self.global_heads),
            ("global_head_dim", self.global_head_dim),
            ("swa_heads", self.swa_heads),
            ("swa_head_dim", self.swa_head_dim),
            ("window_size", self.window_size),
            ("conv_kernel_size", self.conv_kernel_size),
            ("ffn_hidden", self.ffn_hidden),
            ("kv_group_size", self.kv_group_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.layer_pattern.len() != self.n_layers {
            return Err(Error::Config(format!(
                "layer_pattern has {} entries for {} layers",
                self.layer_pattern.len(),
                self.n_layers
            )));
        }
        if self.global_head_dim % 2 != 0 || self.swa_head_dim % 2 != 0 {
            return Err(Error::Config("head dims must be even for rotary embedding".into()));
        }
        if self.global_heads % self.kv_group_size != 0 || self.swa_heads % self.kv_group_size != 0 {
            return Err(Error::Config(format!(
                "kv_group_size {} must divide both head counts",
                self.kv_group_size
            )));
        }
        if !(self.rope_base > 0.0) || !self.rope_base.is_finite() {
            return Err(Error::Config(format!("rope_base must be positive, got {}", self.rope_base)));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::Config("norm_eps must be nonnegative".into()));
        }
        Ok(())
    }
}
