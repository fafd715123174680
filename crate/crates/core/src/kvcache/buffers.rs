//! Fixed-capacity scratch buffers for the decode replay.
//!
//! Every buffer is sized once, at session setup, to the worst case the
//! session will ever see. The replay then reuses the same allocations each
//! step: gathers fill a prefix, reconstructions run over the full capacity
//! regardless of how much of it is live, and attention reads only the live
//! prefix. `live` is data; the shapes are part of the replay signature.

use crate::error::{Error, Result};

/// A row-major `rows x width` buffer whose shape never changes.
#[derive(Debug, Clone)]
pub struct FixedBuffer {
    rows: usize,
    width: usize,
    data: Vec<f64>,
}

impl FixedBuffer {
    pub fn new(rows: usize, width: usize) -> Result<Self> {
        if rows == 0 || width == 0 {
            return Err(Error::Parameter("buffer dimensions must be positive".into()));
        }
        Ok(Self { rows, width, data: vec![0.0; rows * width] })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.width..(r + 1) * self.width]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.width..(r + 1) * self.width]
    }
}

/// One worker's scratch space for a single layer's paged attention replay.
///
/// `filled_epoch` stamps the cache epoch at the moment the latents were
/// gathered; consumers compare it against the cache's current epoch and
/// refuse stale buffers. `live` is how many prefix rows hold real tokens.
/// Rows past `live` hold stale but finite values, and `positions` past
/// `live` is zeroed on every gather so the in-place rope pass is exactly
/// the identity there.
#[derive(Debug, Clone)]
pub struct ReplayBuffers {
    pub(crate) capacity: usize,
    pub(crate) k_latent: FixedBuffer,
    pub(crate) v_latent: FixedBuffer,
    pub(crate) positions: Vec<usize>,
    pub(crate) k_heads: FixedBuffer,
    pub(crate) v_heads: FixedBuffer,
    pub(crate) scores: Vec<f64>,
    pub(crate) attn_out: FixedBuffer,
    pub(crate) live: usize,
    pub(crate) filled_epoch: Option<u64>,
}

impl ReplayBuffers {
    /// `kv_head_cols` and `q_head_cols` are this worker's reconstructed K/V
    /// width and query-head output width (`local kv heads * head_dim` and
    /// `local q heads * head_dim`).
    pub fn new(
        capacity: usize,
        l_k: usize,
        l_v: usize,
        kv_head_cols: usize,
        q_head_cols: usize,
    ) -> Result<Self> {
        Ok(Self {
            capacity,
            k_latent: FixedBuffer::new(capacity, l_k)?,
            v_latent: FixedBuffer::new(capacity, l_v)?,
            positions: vec![0; capacity],
            k_heads: FixedBuffer::new(capacity, kv_head_cols)?,
            v_heads: FixedBuffer::new(capacity, kv_head_cols)?,
            scores: vec![0.0; capacity],
            attn_out: FixedBuffer::new(1, q_head_cols)?,
            live: 0,
            filled_epoch: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn live(&self) -> usize {
        self.live
    }

    /// The attention output row written by the paged attention pass.
    pub fn attn_out(&self) -> &[f64] {
        self.attn_out.data()
    }

    /// The gathered latent K rows (live prefix of the capacity buffer).
    pub fn k_latent(&self) -> &FixedBuffer {
        &self.k_latent
    }

    /// The gathered latent V rows.
    pub fn v_latent(&self) -> &FixedBuffer {
        &self.v_latent
    }

    /// The reconstructed per-head K rows.
    pub fn k_heads(&self) -> &FixedBuffer {
        &self.k_heads
    }

    /// The reconstructed per-head V rows.
    pub fn v_heads(&self) -> &FixedBuffer {
        &self.v_heads
    }

    /// The gathered token positions (zeroed past `live`).
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Base addresses of every backing allocation, as opaque integers.
    ///
    /// Two fingerprints taken before and after a stretch of decode steps
    /// are equal iff no buffer was reallocated in between, which is the
    /// observable form of the replay's zero-allocation contract.
    pub fn allocation_fingerprint(&self) -> Vec<usize> {
        vec![
            self.k_latent.data().as_ptr() as usize,
            self.v_latent.data().as_ptr() as usize,
            self.positions.as_ptr() as usize,
            self.k_heads.data().as_ptr() as usize,
            self.v_heads.data().as_ptr() as usize,
            self.scores.as_ptr() as usize,
            self.attn_out.data().as_ptr() as usize,
        ]
    }
}
