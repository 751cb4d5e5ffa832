//! Plain-slice numeric kernels shared by the graph's forward and backward
//! passes. All loops run in a fixed order so results are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

#[inline(always)]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

#[inline(always)]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `out[m,n] += a[m,k] · b[k,n]`, register-blocked in `MR × NR` tiles.
fn gemm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    for i in (0..m_main).step_by(MR) {
        for j in (0..n_main).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let bp: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("NR-wide tile");
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..NR {
                        acc_r[c] += av * bp[c];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                let row = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                for c in 0..NR {
                    row[c] += acc_r[c];
                }
            }
        }
        if n_main < n {
            for r in i..i + MR {
                edge_row(a, b, r, k, n, n_main, out);
            }
        }
    }
    for r in m_main..m {
        edge_row(a, b, r, k, n, 0, out);
    }
}

/// Columns `from..n` of output row `r`.
fn edge_row(a: &[f64], b: &[f64], r: usize, k: usize, n: usize, from: usize, out: &mut [f64]) {
    let row = &mut out[r * n + from..(r + 1) * n];
    for p in 0..k {
        let arp = a[r * k + p];
        axpy(arp, &b[p * n + from..(p + 1) * n], row);
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// `[m,k] · [k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(a, b, m, k, n, &mut out);
    out
}

/// `[m,n] · [k,n]ᵀ -> [m,k]`, accumulated into `out`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    let bt = transpose(b, k, n);
    gemm_acc(a, &bt, m, n, k, out);
}

/// `[m,k]ᵀ · [m,n] -> [k,n]`, accumulated into `out`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let at = transpose(a, m, k);
    gemm_acc(&at, b, k, m, n, out);
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Row-wise stabilized softmax in place.
pub(crate) fn softmax_rows(data: &mut [f64], d: usize) {
    for row in data.chunks_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Rotation angles for rotary embedding: `angles[p * half + i] = pos_p · base^(-2i/hd)`.
pub(crate) fn rope_tables(t: usize, hd: usize, base: f64, offset: usize) -> (Vec<f64>, Vec<f64>) {
    let half = hd / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| libm::pow(base, -2.0 * i as f64 / hd as f64))
        .collect();
    let mut cos = Vec::with_capacity(t * half);
    let mut sin = Vec::with_capacity(t * half);
    for p in 0..t {
        let pos = (p + offset) as f64;
        for &f in &freqs {
            let (s, c) = libm::sincos(pos * f);
            sin.push(s);
            cos.push(c);
        }
    }
    (cos, sin)
}

/// Rotate adjacent pairs of `x` laid out as `[t, heads, hd]`. `sign = -1.0`
/// applies the inverse rotation.
pub(crate) fn rope_rotate(
    x: &[f64],
    t: usize,
    heads: usize,
    hd: usize,
    cos: &[f64],
    sin: &[f64],
    sign: f64,
) -> Vec<f64> {
    let half = hd / 2;
    let mut out = vec![0.0; x.len()];
    for p in 0..t {
        for h in 0..heads {
            let base = (p * heads + h) * hd;
            for i in 0..half {
                let c = cos[p * half + i];
                let s = sign * sin[p * half + i];
                let a = x[base + 2 * i];
                let b = x[base + 2 * i + 1];
                out[base + 2 * i] = a * c - b * s;
                out[base + 2 * i + 1] = a * s + b * c;
            }
        }
    }
    out
}

/// Source row read by tap `j` of output row `i`, if it exists and lies in the
/// same segment.
#[inline]
pub(crate) fn conv_source(i: usize, j: usize, k: usize, segments: Option<&[u32]>) -> Option<usize> {
    let src = (i + j).checked_sub(k - 1)?;
    match segments {
        Some(ids) if ids[src] != ids[i] => None,
        _ => Some(src),
    }
}

/// Depthwise causal convolution over time. `x` is `[t, d]`, `kernel` is `[k, d]`.
pub(crate) fn causal_conv(
    x: &[f64],
    kernel: &[f64],
    t: usize,
    d: usize,
    k: usize,
    segments: Option<&[u32]>,
) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let row = &mut out[i * d..(i + 1) * d];
        for j in 0..k {
            let Some(src) = conv_source(i, j, k, segments) else { continue };
            let xs = &x[src * d..(src + 1) * d];
            let ks = &kernel[j * d..(j + 1) * d];
            for c in 0..d {
                row[c] += ks[c] * xs[c];
            }
        }
    }
    out
}

pub(crate) struct AttentionShape {
    pub t: usize,
    pub s: usize,
    pub heads: usize,
    pub hd: usize,
}

/// Masked scaled dot-product attention. Returns the output `[t, heads*hd]`
/// and the attention probabilities `[heads, t, s]` (zero where masked).
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    allowed: &[bool],
    sh: &AttentionShape,
) -> (Vec<f64>, Vec<f64>) {
    let AttentionShape { t, s, heads, hd } = *sh;
    let width = heads * hd;
    let scale = 1.0 / libm::sqrt(hd as f64);
    let mut out = vec![0.0; t * width];
    let mut probs = vec![0.0; heads * t * s];
    let mut scores = vec![0.0; s];
    for h in 0..heads {
        for i in 0..t {
            let qi = &q[i * width + h * hd..i * width + (h + 1) * hd];
            let mask_row = &allowed[i * s..(i + 1) * s];
            let mut max = f64::NEG_INFINITY;
            for j in 0..s {
                if mask_row[j] {
                    let sc = scale * dot(qi, &k[j * width + h * hd..j * width + (h + 1) * hd]);
                    scores[j] = sc;
                    if sc > max {
                        max = sc;
                    }
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let prow = &mut probs[(h * t + i) * s..(h * t + i + 1) * s];
            let mut total = 0.0;
            for j in 0..s {
                if mask_row[j] {
                    let e = libm::exp(scores[j] - max);
                    prow[j] = e;
                    total += e;
                }
            }
            let orow = &mut out[i * width + h * hd..i * width + (h + 1) * hd];
            for j in 0..s {
                if mask_row[j] {
                    prow[j] /= total;
                    axpy(prow[j], &v[j * width + h * hd..j * width + (h + 1) * hd], orow);
                }
            }
        }
    }
    (out, probs)
}

pub(crate) struct AttentionGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
}

pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    allowed: &[bool],
    probs: &[f64],
    dout: &[f64],
    sh: &AttentionShape,
) -> AttentionGrads {
    let AttentionShape { t, s, heads, hd } = *sh;
    let width = heads * hd;
    let scale = 1.0 / libm::sqrt(hd as f64);
    let mut dq = vec![0.0; t * width];
    let mut dk = vec![0.0; s * width];
    let mut dv = vec![0.0; s * width];
    let mut dp = vec![0.0; s];
    for h in 0..heads {
        for i in 0..t {
            let lo = i * width + h * hd;
            let doi = &dout[lo..lo + hd];
            let qi = &q[lo..lo + hd];
            let mask_row = &allowed[i * s..(i + 1) * s];
            let prow = &probs[(h * t + i) * s..(h * t + i + 1) * s];
            let mut weighted = 0.0;
            for j in 0..s {
                if mask_row[j] {
                    let kv = j * width + h * hd;
                    dp[j] = dot(doi, &v[kv..kv + hd]);
                    weighted += prow[j] * dp[j];
                    axpy(prow[j], doi, &mut dv[kv..kv + hd]);
                }
            }
            for j in 0..s {
                if mask_row[j] {
                    let kv = j * width + h * hd;
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds != 0.0 {
                        axpy(ds, &k[kv..kv + hd], &mut dq[lo..lo + hd]);
                        axpy(ds, qi, &mut dk[kv..kv + hd]);
                    }
                }
            }
        }
    }
    AttentionGrads { dq, dk, dv }
}
