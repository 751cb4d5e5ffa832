//! Checkpoint file.
//!
//! Text header: `DESKCKPT 1`, the model config as `key = value` lines, one
//! `tensor <name> <dims>` line per parameter in [`ModelParams::named_tensors`]
//! order, then a `---` line. After it, every tensor's values as
//! little-endian `f64` in the same order.

use std::path::Path;

use desklab_core::model::{build_model, LayerKind, ModelConfig, ModelParams};

use crate::error::{Error, Result};

const HEADER: &str = "DESKCKPT 1";

pub fn config_to_text(c: &ModelConfig) -> String {
    let pattern: Vec<&str> = c.layer_pattern.iter().map(|k| k.as_str()).collect();
    format!(
        "vocab_size = {}\nd_model = {}\nn_layers = {}\nlayer_pattern = {}\nglobal_heads = {}\nglobal_head_dim = {}\n\
         swa_heads = {}\nswa_head_dim = {}\nwindow_size = {}\nrope_base = {:?}\nconv_kernel_size = {}\nkv_conv = {}\n\
         ffn_hidden = {}\nkv_group_size = {}\nnorm_eps = {:?}\n",
        c.vocab_size,
        c.d_model,
        c.n_layers,
        pattern.join(","),
        c.global_heads,
        c.global_head_dim,
        c.swa_heads,
        c.swa_head_dim,
        c.window_size,
        c.rope_base,
        c.conv_kernel_size,
        c.kv_conv,
        c.ffn_hidden,
        c.kv_group_size,
        c.norm_eps
    )
}

/// Set one model config field from its textual value.
pub fn set_config_field(c: &mut ModelConfig, key: &str, value: &str) -> Result<()> {
    let bad = || Error::Format(format!("bad value {value:?} for model key {key}"));
    let int = || value.parse::<usize>().map_err(|_| bad());
    match key {
        "vocab_size" => c.vocab_size = int()?,
        "d_model" => c.d_model = int()?,
        "n_layers" => {
            c.n_layers = int()?;
            c.layer_pattern = ModelConfig::repeating_pattern(c.n_layers, 4);
        }
        "layer_pattern" => {
            c.layer_pattern = value.split(',').map(LayerKind::parse).collect::<desklab_core::Result<_>>()?;
        }
        "global_heads" => c.global_heads = int()?,
        "global_head_dim" => c.global_head_dim = int()?,
        "swa_heads" => c.swa_heads = int()?,
        "swa_head_dim" => c.swa_head_dim = int()?,
        "window_size" => c.window_size = int()?,
        "rope_base" => c.rope_base = value.parse().map_err(|_| bad())?,
        "conv_kernel_size" => c.conv_kernel_size = int()?,
        "kv_conv" => c.kv_conv = value.parse().map_err(|_| bad())?,
        "ffn_hidden" => c.ffn_hidden = int()?,
        "kv_group_size" => c.kv_group_size = int()?,
        "norm_eps" => c.norm_eps = value.parse().map_err(|_| bad())?,
        _ => return Err(Error::Format(format!("unknown model key {key}"))),
    }
    Ok(())
}

pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParams) -> Vec<u8> {
    let mut head = format!("{HEADER}\n{}", config_to_text(config));
    for (name, t) in params.named_tensors() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        head.push_str(&format!("tensor {name} {}\n", dims.join("x")));
    }
    head.push_str("---\n");
    let mut out = head.into_bytes();
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let bad = |m: String| Error::Format(format!("checkpoint: {m}"));
    let sep = b"\n---\n";
    let split = bytes.windows(sep.len()).position(|w| w == sep).ok_or_else(|| bad("missing --- separator".into()))?;
    let head = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut blob = &bytes[split + sep.len()..];
    let mut lines = head.lines();
    if lines.next() != Some(HEADER) {
        return Err(bad(format!("expected header {HEADER}")));
    }
    let mut config = ModelConfig::desk(2, 1);
    let mut pattern_seen = None;
    let mut manifest = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("tensor ") {
            manifest.push(rest.to_string());
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad line {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "layer_pattern" {
            pattern_seen = Some(v.to_string());
        } else {
            set_config_field(&mut config, k, v)?;
        }
    }
    if let Some(p) = pattern_seen {
        set_config_field(&mut config, "layer_pattern", &p)?;
    }
    let mut params = build_model(&config, 0)?;
    let names: Vec<String> = params
        .named_tensors()
        .iter()
        .map(|(n, t)| {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            format!("{n} {}", dims.join("x"))
        })
        .collect();
    if names != manifest {
        return Err(bad("tensor manifest does not match the config".into()));
    }
    for t in params.tensors_mut() {
        let n = t.numel() * 8;
        if blob.len() < n {
            return Err(bad("parameter data truncated".into()));
        }
        for (v, chunk) in t.data_mut().iter_mut().zip(blob[..n].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        blob = &blob[n..];
    }
    if !blob.is_empty() {
        return Err(bad(format!("{} trailing bytes", blob.len())));
    }
    Ok((config, params))
}

pub fn write_checkpoint(path: impl AsRef<Path>, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    std::fs::write(path.as_ref(), encode_checkpoint(config, params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams)> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_checkpoint(&bytes)
}
