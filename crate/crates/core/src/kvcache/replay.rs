//! The fixed-shape operations a decode step replays.
//!
//! Each function body is one op from the replay plan. Shapes are validated
//! against the buffers, never resized: reconstruction GEMMs always run over
//! the buffer's full capacity, and only the attention read respects the live
//! prefix. Rows past `live` hold stale but finite values that cannot affect
//! the output; the positions tail is zeroed on gather so the in-place rope
//! pass is the identity there.

use crate::error::{Error, Result};
use crate::kvcache::buffers::ReplayBuffers;
use crate::kvcache::pool::PagedLowRankCache;
use crate::linalg::{matmul_into, DenseMatrix};
use crate::model::ModelConfig;
use crate::pipelines::{attention_head_kernel, check_rope_params, rope_rows};
use std::ops::Range;

/// Copy a sequence's live latent rows into the buffers and stamp them with
/// the cache's current epoch.
pub fn gather_latents(
    cache: &PagedLowRankCache,
    seq: u64,
    bufs: &mut ReplayBuffers,
) -> Result<()> {
    let params = cache.params();
    if bufs.k_latent.width() != params.l_k || bufs.v_latent.width() != params.l_v {
        return Err(Error::Shape(format!(
            "buffers take {}/{} wide latents, cache stores {}/{}",
            bufs.k_latent.width(),
            bufs.v_latent.width(),
            params.l_k,
            params.l_v
        )));
    }
    let live = cache.copy_live_rows(
        seq,
        bufs.k_latent.data_mut(),
        bufs.v_latent.data_mut(),
        &mut bufs.positions,
    )?;
    // Stale latent rows stay as they are (finite, masked by `live`), but the
    // positions tail must be zero so rope rotates stale rows by the identity.
    bufs.positions[live..].fill(0);
    bufs.live = live;
    bufs.filled_epoch = Some(cache.epoch());
    Ok(())
}

/// Up-project the latent K buffer into per-head K rows, over the full
/// capacity regardless of how many rows are live.
pub fn reconstruct_k(bufs: &mut ReplayBuffers, k_up: &DenseMatrix) -> Result<()> {
    if k_up.rows() != bufs.k_latent.width() || k_up.cols() != bufs.k_heads.width() {
        return Err(Error::Shape(format!(
            "k up-projection is {}x{}, buffers need {}x{}",
            k_up.rows(),
            k_up.cols(),
            bufs.k_latent.width(),
            bufs.k_heads.width()
        )));
    }
    let rows = bufs.capacity;
    let cols = bufs.k_latent.width();
    matmul_into(bufs.k_latent.data(), rows, cols, k_up, bufs.k_heads.data_mut());
    Ok(())
}

/// Up-project the latent V buffer into per-head V rows, full capacity.
pub fn reconstruct_v(bufs: &mut ReplayBuffers, v_up: &DenseMatrix) -> Result<()> {
    if v_up.rows() != bufs.v_latent.width() || v_up.cols() != bufs.v_heads.width() {
        return Err(Error::Shape(format!(
            "v up-projection is {}x{}, buffers need {}x{}",
            v_up.rows(),
            v_up.cols(),
            bufs.v_latent.width(),
            bufs.v_heads.width()
        )));
    }
    let rows = bufs.capacity;
    let cols = bufs.v_latent.width();
    matmul_into(bufs.v_latent.data(), rows, cols, v_up, bufs.v_heads.data_mut());
    Ok(())
}

/// Rotate the reconstructed K rows in place by their stored positions. Keys
/// are cached pre-rope in the latent space, so rotation happens after every
/// reconstruction, using the positions that traveled with the rows.
pub fn rope_k_in_place(bufs: &mut ReplayBuffers, head_dim: usize, base: f64) -> Result<()> {
    check_rope_params(head_dim, base)?;
    let width = bufs.k_heads.width();
    if !width.is_multiple_of(head_dim) {
        return Err(Error::Shape(format!(
            "k buffer width {width} is not a multiple of head_dim {head_dim}"
        )));
    }
    rope_rows(bufs.k_heads.data_mut(), width, head_dim, &bufs.positions, base);
    Ok(())
}

/// Single-query attention over the live prefix of the reconstructed K/V.
///
/// `q_local` is the worker's roped query row (`q_range` heads wide); the
/// output lands in the buffers' `attn_out` row. Refuses buffers whose epoch
/// stamp does not match the cache: any structural cache change after the
/// gather invalidates the reconstruction.
pub fn paged_attention(
    cfg: &ModelConfig,
    cache: &PagedLowRankCache,
    bufs: &mut ReplayBuffers,
    q_local: &[f64],
    q_range: &Range<usize>,
    kv_range: &Range<usize>,
    flops: &mut u64,
) -> Result<()> {
    match bufs.filled_epoch {
        None => {
            return Err(Error::Replay(
                "attention over buffers that were never gathered into".into(),
            ))
        }
        Some(e) if e != cache.epoch() => {
            return Err(Error::Replay(format!(
                "buffers gathered at epoch {e} are stale, cache is at {}",
                cache.epoch()
            )));
        }
        Some(_) => {}
    }
    if bufs.live == 0 {
        return Err(Error::Replay("attention over an empty sequence".into()));
    }
    let d = cfg.head_dim;
    if q_local.len() != q_range.len() * d {
        return Err(Error::Shape(format!(
            "local q is {} wide, expected {} heads x {d}",
            q_local.len(),
            q_range.len()
        )));
    }
    if bufs.k_heads.width() != kv_range.len() * d {
        return Err(Error::Shape(format!(
            "k buffer is {} wide, expected {} kv heads x {d}",
            bufs.k_heads.width(),
            kv_range.len()
        )));
    }

    let group_size = cfg.num_heads / cfg.num_kv_heads;
    let live = bufs.live;
    let width = bufs.k_heads.width();
    let k = &bufs.k_heads;
    let v = &bufs.v_heads;
    let scores = &mut bufs.scores;
    let out = bufs.attn_out.data_mut();
    for (local, global) in q_range.clone().enumerate() {
        // Map through the global head index; local ratios mis-assign KV
        // heads whenever a worker's query range straddles a KV boundary.
        let kv_local = global / group_size - kv_range.start;
        attention_head_kernel(
            &q_local[local * d..(local + 1) * d],
            k.data(),
            v.data(),
            width,
            kv_local * d,
            live,
            scores,
            &mut out[local * d..(local + 1) * d],
            flops,
        );
    }
    Ok(())
}
