//! Packed-sequence binary file.
//!
//! Header: magic `DLPACK\0\0`, version `u32`, seq_len `u32`, count `u64`.
//! Then per sequence `seq_len` token ids as `u32` followed by `seq_len`
//! sample ids as `u16`. All little-endian.

use std::path::Path;

use desklab_core::pipeline::{PackStats, PackedBatch};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DLPACK\0\0";
pub const VERSION: u32 = 1;

pub fn encode_packed(batch: &PackedBatch) -> Vec<u8> {
    let n = batch.sequences.len();
    let mut out = Vec::with_capacity(24 + n * batch.seq_len * 6);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(batch.seq_len as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for (seq, ids) in batch.sequences.iter().zip(&batch.sample_ids) {
        for t in seq {
            out.extend_from_slice(&t.to_le_bytes());
        }
        for s in ids {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    out
}

/// Sequences and sample ids read back from a packed file. Statistics are not
/// stored, so only `tokens_packed` and `tokens_padded` are recomputed.
pub fn decode_packed(bytes: &[u8], pad_id: u32) -> Result<PackedBatch> {
    let bad = |m: &str| Error::Format(format!("packed file: {m}"));
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let seq_len = u32_at(12) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let row = seq_len * 6;
    if bytes.len() != 24 + count * row {
        return Err(bad(&format!("expected {} bytes for {count} rows of {seq_len}", 24 + count * row)));
    }
    let mut sequences = Vec::with_capacity(count);
    let mut sample_ids = Vec::with_capacity(count);
    let mut stats = PackStats::default();
    for r in 0..count {
        let base = 24 + r * row;
        let toks: Vec<u32> = (0..seq_len).map(|i| u32_at(base + 4 * i)).collect();
        let ids: Vec<u16> = (0..seq_len)
            .map(|i| {
                let j = base + 4 * seq_len + 2 * i;
                u16::from_le_bytes([bytes[j], bytes[j + 1]])
            })
            .collect();
        let padded = ids.iter().filter(|&&s| s == 0).count();
        stats.tokens_padded += padded;
        stats.tokens_packed += seq_len - padded;
        sequences.push(toks);
        sample_ids.push(ids);
    }
    stats.tokens_in = stats.tokens_packed;
    Ok(PackedBatch { seq_len, pad_id, sequences, sample_ids, stats })
}

pub fn write_packed(path: impl AsRef<Path>, batch: &PackedBatch) -> Result<()> {
    std::fs::write(path.as_ref(), encode_packed(batch)).map_err(|e| Error::io(path, e))
}

pub fn read_packed(path: impl AsRef<Path>, pad_id: u32) -> Result<PackedBatch> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_packed(&bytes, pad_id)
}
