//! Fixed-pool paged storage for per-token latent K/V rows.
//!
//! The pool is allocated once: `num_blocks` blocks of `block_size` token
//! slots each, with flat `f64` arrays for the K and V latents and a parallel
//! array of token positions. Sequences own ordered lists of block ids; a
//! free list hands blocks out deterministically (most recently freed first).
//! Nothing here ever reallocates, which is what lets the decode replay run
//! the same fixed-shape operations every step.

use crate::error::{Error, Result};
use crate::kvcache::runs::{scan_contiguous_runs, BlockRun};
use crate::pipelines::LatentSink;
use std::collections::{BTreeMap, VecDeque};

/// Geometry of the block pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheParams {
    pub num_blocks: usize,
    /// Token slots per block.
    pub block_size: usize,
    /// Width of one K latent row.
    pub l_k: usize,
    /// Width of one V latent row.
    pub l_v: usize,
}

impl CacheParams {
    pub fn capacity_tokens(&self) -> usize {
        self.num_blocks * self.block_size
    }

    fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.block_size == 0 || self.l_k == 0 || self.l_v == 0 {
            return Err(Error::Parameter(
                "cache blocks, block size, and latent widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct SequenceState {
    blocks: Vec<usize>,
    /// Live tokens, including a reserved-but-unwritten slot.
    len: usize,
    /// The last slot was reserved but its payload not yet written.
    pending: bool,
}

/// Outcome of a [`PagedLowRankCache::squeeze`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SqueezeReport {
    pub kept_tokens: usize,
    /// Payload elements copied: exactly `kept_tokens * (l_k + l_v)`.
    /// Position bookkeeping is not payload and is not counted.
    pub copied_elements: u64,
    pub freed_blocks: usize,
}

/// Paged storage of the latent (pre-rope, pre-up-projection) K/V rows the
/// deinfer pipeline caches instead of full per-head K/V.
///
/// The `epoch` counter increments on every mutation that creates, moves, or
/// invalidates rows: sequence creation and freeing, slot reservation (which
/// may allocate a block), appends, and squeezes. Replay buffers stamp the
/// epoch they were filled at, and downstream consumers refuse to read
/// buffers whose stamp is stale. Writing the payload of an already reserved
/// slot does not bump the epoch; the reservation already did.
#[derive(Debug, Clone)]
pub struct PagedLowRankCache {
    params: CacheParams,
    k_pool: Vec<f64>,
    v_pool: Vec<f64>,
    pos_pool: Vec<usize>,
    free: VecDeque<usize>,
    seqs: BTreeMap<u64, SequenceState>,
    epoch: u64,
}

impl PagedLowRankCache {
    pub fn new(params: CacheParams) -> Result<Self> {
        params.validate()?;
        let slots = params.capacity_tokens();
        Ok(Self {
            params,
            k_pool: vec![0.0; slots * params.l_k],
            v_pool: vec![0.0; slots * params.l_v],
            pos_pool: vec![0; slots],
            free: (0..params.num_blocks).collect(),
            seqs: BTreeMap::new(),
            epoch: 0,
        })
    }

    pub fn params(&self) -> &CacheParams {
        &self.params
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn free_blocks(&self) -> usize {
        self.free.len()
    }

    /// Base addresses of the backing pools, as opaque integers. Appends and
    /// squeezes write in place; a changed fingerprint means a pool was
    /// reallocated, which the replay contract forbids.
    pub fn allocation_fingerprint(&self) -> Vec<usize> {
        vec![
            self.k_pool.as_ptr() as usize,
            self.v_pool.as_ptr() as usize,
            self.pos_pool.as_ptr() as usize,
        ]
    }

    fn seq(&self, id: u64) -> Result<&SequenceState> {
        self.seqs.get(&id).ok_or(Error::UnknownSequence(id))
    }

    fn seq_mut(&mut self, id: u64) -> Result<&mut SequenceState> {
        self.seqs.get_mut(&id).ok_or(Error::UnknownSequence(id))
    }

    pub fn sequence_len(&self, id: u64) -> Result<usize> {
        Ok(self.seq(id)?.len)
    }

    pub fn sequence_blocks(&self, id: u64) -> Result<&[usize]> {
        Ok(&self.seq(id)?.blocks)
    }

    pub fn create_sequence(&mut self, id: u64) -> Result<()> {
        if self.seqs.contains_key(&id) {
            return Err(Error::Parameter(format!("sequence {id} already exists")));
        }
        self.seqs.insert(id, SequenceState::default());
        self.epoch += 1;
        Ok(())
    }

    /// Drop a sequence and return its blocks to the free list. Blocks go to
    /// the front (most recently freed blocks are reused first), with the
    /// sequence's earliest block frontmost.
    pub fn free_sequence(&mut self, id: u64) -> Result<()> {
        let state = self.seqs.remove(&id).ok_or(Error::UnknownSequence(id))?;
        for &b in state.blocks.iter().rev() {
            self.free.push_front(b);
        }
        self.epoch += 1;
        Ok(())
    }

    /// Flat offset of a token slot in a pool with `width`-wide rows.
    fn slot_offset(&self, state: &SequenceState, token: usize, width: usize) -> usize {
        let block = state.blocks[token / self.params.block_size];
        let within = token % self.params.block_size;
        (block * self.params.block_size + within) * width
    }

    /// Make sure the slot for token index `state.len` exists, allocating a
    /// block from the free list when the previous block is full.
    fn ensure_block(params: &CacheParams, free: &mut VecDeque<usize>, state: &mut SequenceState) -> Result<()> {
        if state.len.is_multiple_of(params.block_size) {
            let block = free.pop_front().ok_or_else(|| {
                Error::Capacity(format!(
                    "block pool exhausted at {} tokens",
                    state.len
                ))
            })?;
            state.blocks.push(block);
        }
        Ok(())
    }

    fn check_payload(&self, k_row: &[f64], v_row: &[f64]) -> Result<()> {
        if k_row.len() != self.params.l_k || v_row.len() != self.params.l_v {
            return Err(Error::Payload(format!(
                "latent rows are {}/{} wide, cache stores {}/{}",
                k_row.len(),
                v_row.len(),
                self.params.l_k,
                self.params.l_v
            )));
        }
        if k_row.iter().chain(v_row).any(|x| !x.is_finite()) {
            return Err(Error::Payload("latent rows must be finite".into()));
        }
        Ok(())
    }

    fn check_position(&self, state: &SequenceState, position: usize) -> Result<()> {
        if state.len > 0 {
            let last = self.pos_pool[self.slot_offset(state, state.len - 1, 1)];
            if position <= last {
                return Err(Error::Parameter(format!(
                    "position {position} does not advance past stored position {last}"
                )));
            }
        }
        Ok(())
    }

    /// Reserve the next slot of a sequence and record its position. The
    /// payload arrives later through [`write_reserved`]; reads are rejected
    /// while the slot is pending.
    ///
    /// [`write_reserved`]: PagedLowRankCache::write_reserved
    pub fn reserve_slot(&mut self, id: u64, position: usize) -> Result<()> {
        let state = self.seq(id)?;
        if state.pending {
            return Err(Error::Replay(format!(
                "sequence {id} already has a reserved slot awaiting its payload"
            )));
        }
        self.check_position(state, position)?;
        let state = self.seqs.get_mut(&id).expect("checked above");
        Self::ensure_block(&self.params, &mut self.free, state)?;
        state.len += 1;
        state.pending = true;
        let state = self.seq(id)?;
        let off = self.slot_offset(state, state.len - 1, 1);
        self.pos_pool[off] = position;
        self.epoch += 1;
        Ok(())
    }

    /// Fill the payload of the slot reserved by [`reserve_slot`]. Pure data
    /// write: no allocation, no epoch bump.
    ///
    /// [`reserve_slot`]: PagedLowRankCache::reserve_slot
    pub fn write_reserved(&mut self, id: u64, k_row: &[f64], v_row: &[f64]) -> Result<()> {
        self.check_payload(k_row, v_row)?;
        let state = self.seq(id)?;
        if !state.pending {
            return Err(Error::Replay(format!(
                "sequence {id} has no reserved slot to write"
            )));
        }
        let token = state.len - 1;
        let k_off = self.slot_offset(state, token, self.params.l_k);
        let v_off = self.slot_offset(state, token, self.params.l_v);
        self.k_pool[k_off..k_off + self.params.l_k].copy_from_slice(k_row);
        self.v_pool[v_off..v_off + self.params.l_v].copy_from_slice(v_row);
        self.seq_mut(id)?.pending = false;
        Ok(())
    }

    /// Reserve and write in one call; the prefill path. Validates the
    /// payload up front so a rejected append leaves no dangling reservation.
    pub fn append_token(
        &mut self,
        id: u64,
        k_row: &[f64],
        v_row: &[f64],
        position: usize,
    ) -> Result<()> {
        self.check_payload(k_row, v_row)?;
        self.reserve_slot(id, position)?;
        self.write_reserved(id, k_row, v_row)
    }

    /// The sequence's maximal contiguous-run partition, in logical order.
    pub fn contiguous_runs(&self, id: u64) -> Result<Vec<BlockRun>> {
        Ok(scan_contiguous_runs(&self.seq(id)?.blocks))
    }

    /// Copy a sequence's live rows, in token order, into the prefixes of the
    /// destination slices. Returns the live token count. Fails while a
    /// reserved slot is unwritten and when the destinations are too small.
    ///
    /// The copy walks the contiguous-run partition, moving each run of
    /// physically adjacent blocks with one contiguous copy per pool rather
    /// than one per token.
    pub fn copy_live_rows(
        &self,
        id: u64,
        k_dst: &mut [f64],
        v_dst: &mut [f64],
        pos_dst: &mut [usize],
    ) -> Result<usize> {
        let state = self.seq(id)?;
        if state.pending {
            return Err(Error::Replay(format!(
                "gather from sequence {id} while a reserved slot is unwritten"
            )));
        }
        let len = state.len;
        let (l_k, l_v, bs) = (self.params.l_k, self.params.l_v, self.params.block_size);
        if len * l_k > k_dst.len() || len * l_v > v_dst.len() || len > pos_dst.len() {
            return Err(Error::Capacity(format!(
                "gather of {len} tokens overflows buffers of {} rows",
                pos_dst.len()
            )));
        }
        for run in scan_contiguous_runs(&state.blocks) {
            let dst_tok = run.buffer_offset * bs;
            // Only the final logical block can be partially filled, so a
            // run's live rows are capped by the sequence length alone.
            let rows = (run.len * bs).min(len - dst_tok);
            let src_tok = run.physical_start * bs;
            k_dst[dst_tok * l_k..(dst_tok + rows) * l_k]
                .copy_from_slice(&self.k_pool[src_tok * l_k..(src_tok + rows) * l_k]);
            v_dst[dst_tok * l_v..(dst_tok + rows) * l_v]
                .copy_from_slice(&self.v_pool[src_tok * l_v..(src_tok + rows) * l_v]);
            pos_dst[dst_tok..dst_tok + rows]
                .copy_from_slice(&self.pos_pool[src_tok..src_tok + rows]);
        }
        Ok(len)
    }

    /// One token's stored rows and position, for inspection.
    pub fn token_rows(&self, id: u64, token: usize) -> Result<(&[f64], &[f64], usize)> {
        let state = self.seq(id)?;
        if token >= state.len || (state.pending && token == state.len - 1) {
            return Err(Error::Parameter(format!(
                "token {token} is not a readable slot of sequence {id}"
            )));
        }
        let k_off = self.slot_offset(state, token, self.params.l_k);
        let v_off = self.slot_offset(state, token, self.params.l_v);
        Ok((
            &self.k_pool[k_off..k_off + self.params.l_k],
            &self.v_pool[v_off..v_off + self.params.l_v],
            self.pos_pool[self.slot_offset(state, token, 1)],
        ))
    }

    /// Compact a sequence to the tokens in `keep` (strictly increasing token
    /// indices). Rows are packed forward in place, block by block, surplus
    /// blocks return to the free list, and positions travel with their rows.
    ///
    /// The copy is forward-safe because `keep` is strictly increasing:
    /// destination index `i` never overtakes source index `keep[i]`. Every
    /// kept token is accounted as one copied row, self-copies included, so
    /// `copied_elements` is exactly `kept * (l_k + l_v)`.
    pub fn squeeze(&mut self, id: u64, keep: &[usize]) -> Result<SqueezeReport> {
        let state = self.seq(id)?;
        if state.pending {
            return Err(Error::Replay(format!(
                "squeeze of sequence {id} while a reserved slot is unwritten"
            )));
        }
        let len = state.len;
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("squeeze keep list must be strictly increasing".into()));
        }
        if keep.last().is_some_and(|&t| t >= len) {
            return Err(Error::Parameter(format!(
                "squeeze keeps token {} of a {len}-token sequence",
                keep.last().unwrap()
            )));
        }

        let (l_k, l_v, bs) = (self.params.l_k, self.params.l_v, self.params.block_size);
        for (dst, &src) in keep.iter().enumerate() {
            if dst == src {
                continue;
            }
            let state = self.seq(id)?;
            let (ks, kd) = (
                self.slot_offset(state, src, l_k),
                self.slot_offset(state, dst, l_k),
            );
            let (vs, vd) = (
                self.slot_offset(state, src, l_v),
                self.slot_offset(state, dst, l_v),
            );
            let (ps, pd) = (
                self.slot_offset(state, src, 1),
                self.slot_offset(state, dst, 1),
            );
            self.k_pool.copy_within(ks..ks + l_k, kd);
            self.v_pool.copy_within(vs..vs + l_v, vd);
            self.pos_pool[pd] = self.pos_pool[ps];
        }

        let kept = keep.len();
        let needed_blocks = kept.div_ceil(bs);
        let state = self.seqs.get_mut(&id).expect("checked above");
        state.len = kept;
        let surplus: Vec<usize> = state.blocks.drain(needed_blocks..).collect();
        for &b in surplus.iter().rev() {
            self.free.push_front(b);
        }
        self.epoch += 1;
        Ok(SqueezeReport {
            kept_tokens: kept,
            copied_elements: (kept * (l_k + l_v)) as u64,
            freed_blocks: surplus.len(),
        })
    }

    /// A [`LatentSink`] view that appends pushed tokens to one sequence.
    pub fn sink(&mut self, id: u64) -> CacheSink<'_> {
        CacheSink { cache: self, seq: id }
    }
}

/// Adapter feeding a pipeline's per-token latents into one cache sequence.
pub struct CacheSink<'a> {
    cache: &'a mut PagedLowRankCache,
    seq: u64,
}

impl LatentSink for CacheSink<'_> {
    fn push_token(&mut self, k_latent: &[f64], v_latent: &[f64], position: usize) -> Result<()> {
        self.cache.append_token(self.seq, k_latent, v_latent, position)
    }
}
