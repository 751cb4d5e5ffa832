use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use super::config::{LayerKind, ModelConfig};
use super::forward::BoundLayer;
use crate::error::{Error, Result};
use crate::tensor::{AttentionMask, Graph, Tensor, Var};

/// `mask[i][j]` is true iff `j ≤ i` and `i - j < w`: each token sees itself
/// and the `w - 1` tokens before it.
pub fn sliding_window_mask(t: usize, w: usize) -> AttentionMask {
    AttentionMask::from_fn(t, t, |i, j| j <= i && i - j < w)
}

/// Mask for `t` new queries at absolute positions `offset..offset+t` over keys
/// at `0..offset+t`. `sample_ids`, when given, covers all `offset + t`
/// positions and forbids attention across different ids.
pub fn layer_mask(
    kind: LayerKind,
    window: usize,
    t: usize,
    offset: usize,
    sample_ids: Option<&[u32]>,
) -> Result<AttentionMask> {
    let s = offset + t;
    if let Some(ids) = sample_ids {
        if ids.len() != s {
            return Err(Error::Dimension(format!("{} sample ids for {s} positions", ids.len())));
        }
    }
    Ok(AttentionMask::from_fn(t, s, |i, j| {
        let pos = offset + i;
        j <= pos
            && (kind == LayerKind::Global || pos - j < window)
            && sample_ids.is_none_or(|ids| ids[pos] == ids[j])
    }))
}

/// Per-layer decoding state.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    /// Last `conv_kernel_size - 1` pre-convolution key/value rows.
    raw_tail_k: Option<Tensor>,
    raw_tail_v: Option<Tensor>,
    /// Post-convolution, post-rotary keys `[n, heads, hd]`.
    keys: Option<Tensor>,
    /// Post-convolution values `[n, heads, hd]`.
    values: Option<Tensor>,
    len: usize,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Keys and values of every layer for the positions decoded so far.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        KvCache { layers: (0..config.n_layers).map(|_| LayerCache::default()).collect() }
    }

    /// Number of cached positions, which is also the position offset of the
    /// next forward call.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn append_rows(prev: Option<&Tensor>, new: &Tensor) -> Tensor {
    match prev {
        None => new.clone(),
        Some(p) => {
            let mut shape = p.shape().to_vec();
            shape[0] += new.shape()[0];
            let mut data = p.data().to_vec();
            data.extend_from_slice(new.data());
            Tensor::new(&shape, data).expect("row-compatible cache tensors")
        }
    }
}

fn last_rows(t: &Tensor, n: usize) -> Option<Tensor> {
    if n == 0 {
        return None;
    }
    let rows = t.shape()[0];
    let keep = n.min(rows);
    let width = t.numel() / rows;
    let mut shape = t.shape().to_vec();
    shape[0] = keep;
    Some(Tensor::new(&shape, t.data()[(rows - keep) * width..].to_vec()).expect("slice of a valid tensor"))
}

/// Causal conv of `raw` continuing from cached pre-conv rows; returns the
/// output rows for `raw` only. `sample_ids` covers positions `0..offset+t`.
fn conv_continuing(
    g: &mut Graph,
    raw: Var,
    kernel: Var,
    tail: Option<&Tensor>,
    offset: usize,
    sample_ids: Option<&[u32]>,
) -> Result<Var> {
    let t = g.shape(raw)[0];
    let rows = tail.map_or(0, |tl| tl.shape()[0]);
    let segments: Option<Rc<[u32]>> = sample_ids.map(|ids| Rc::from(&ids[offset - rows..offset + t]));
    match tail {
        None => g.causal_conv1d_segmented(raw, kernel, segments),
        Some(tail) => {
            let tail = g.constant(tail.clone());
            let joined = g.concat_rows(tail, raw)?;
            let y = g.causal_conv1d_segmented(joined, kernel, segments)?;
            g.slice_rows(y, rows, t)
        }
    }
}

/// One attention sublayer on pre-normed input `x: [t, d_model]`.
///
/// `mask` must be `[t, offset + t]` where `offset` is the number of cached
/// positions. `sample_ids`, when given, covers all `offset + t` positions and
/// stops the key/value convolution from reading across samples. When a cache
/// is passed it is extended with this call's keys and values.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    g: &mut Graph,
    x: Var,
    layer: &BoundLayer,
    config: &ModelConfig,
    mask: Rc<AttentionMask>,
    offset: usize,
    sample_ids: Option<&[u32]>,
    cache: Option<&mut LayerCache>,
) -> Result<Var> {
    let kind = layer.kind;
    let (heads, hd) = (config.heads(kind), config.head_dim(kind));
    let t = g.shape(x)[0];
    if let Some(c) = cache.as_deref() {
        if c.len != offset {
            return Err(Error::State(format!(
                "cache holds {} positions but position offset is {offset}",
                c.len
            )));
        }
    } else if offset != 0 {
        return Err(Error::State(format!("position offset {offset} without a cache")));
    }
    if sample_ids.is_some_and(|ids| ids.len() != offset + t) {
        return Err(Error::Dimension(format!("sample ids must cover {} positions", offset + t)));
    }
    if mask.queries() != t || mask.keys() != offset + t {
        return Err(Error::State(format!(
            "mask [{}, {}] for {t} queries at offset {offset}",
            mask.queries(),
            mask.keys()
        )));
    }

    let q = g.matmul(x, layer.wq)?;
    let k_raw = g.matmul(x, layer.wk)?;
    let v_raw = g.matmul(x, layer.wv)?;
    let (k, v) = match (layer.conv_k, layer.conv_v) {
        (Some(ck), Some(cv)) => {
            let tail_k = cache.as_deref().and_then(|c| c.raw_tail_k.as_ref());
            let tail_v = cache.as_deref().and_then(|c| c.raw_tail_v.as_ref());
            let k = conv_continuing(g, k_raw, ck, tail_k, offset, sample_ids)?;
            let v = conv_continuing(g, v_raw, cv, tail_v, offset, sample_ids)?;
            (k, v)
        }
        _ => (k_raw, v_raw),
    };
    let q = g.reshape(q, &[t, heads, hd])?;
    let k = g.reshape(k, &[t, heads, hd])?;
    let v = g.reshape(v, &[t, heads, hd])?;
    let q = g.rope(q, config.rope_base, offset)?;
    let k = g.rope(k, config.rope_base, offset)?;

    let (keys, values) = match cache.as_deref().and_then(|c| c.keys.as_ref().zip(c.values.as_ref())) {
        Some((ck, cv)) => {
            let ck = g.constant(ck.clone());
            let cv = g.constant(cv.clone());
            (g.concat_rows(ck, k)?, g.concat_rows(cv, v)?)
        }
        None => (k, v),
    };
    let attended = g.attention(q, keys, values, mask)?;
    let attended = g.reshape(attended, &[t, heads * hd])?;
    let out = g.matmul(attended, layer.wo)?;

    if let Some(c) = cache {
        if layer.conv_k.is_some() {
            let keep = config.conv_kernel_size - 1;
            let joined_k = append_rows(c.raw_tail_k.as_ref(), g.value(k_raw));
            let joined_v = append_rows(c.raw_tail_v.as_ref(), g.value(v_raw));
            c.raw_tail_k = last_rows(&joined_k, keep);
            c.raw_tail_v = last_rows(&joined_v, keep);
        }
        c.keys = Some(g.value(keys).clone());
        c.values = Some(g.value(values).clone());
        c.len += t;
    }
    Ok(out)
}
