use super::config::{LayerKind, ModelConfig};

/// Bytes of key/value cache needed to decode `context_len` positions.
///
/// A global layer stores `2 · (heads / kv_group_size) · head_dim` values per
/// position for every position; a sliding-window layer stores the same per
/// position but never more than `window_size` positions.
pub fn kv_cache_size(config: &ModelConfig, context_len: usize, bytes_per_value: usize) -> u128 {
    let group = config.kv_group_size.max(1) as u128;
    config
        .layer_pattern
        .iter()
        .map(|&kind| {
            let kv_heads = config.heads(kind) as u128 / group;
            let positions = match kind {
                LayerKind::Global => context_len,
                LayerKind::Swa => context_len.min(config.window_size),
            } as u128;
            2 * kv_heads * config.head_dim(kind) as u128 * positions * bytes_per_value as u128
        })
        .sum()
}
