//! Token-by-token decoding over the paged low-rank cache.
//!
//! A [`DecodeSession`] owns everything one sequence needs: per-layer weight
//! shards, per-layer caches holding the K/V latents, per-worker replay
//! buffers, a replay plan per layer and a [`ReplayGuard`] enforcing it, and
//! the lockstep worker group whose ledger records the collectives.
//!
//! Decoding one token runs, per layer, the exact op sequence of that
//! layer's replay plan over fixed-shape buffers. Only the cache's live
//! token count and buffer contents change from step to step; shapes, op
//! order, and collective traffic do not. The step output is bit-identical
//! to recomputing the whole sequence through the batched pipeline and
//! keeping the last row, because every op in the chain is row-independent
//! and funnels through the same kernels ([`recompute_reference`] is that
//! oracle).

use crate::error::{Error, Result};
use crate::kvcache::{
    build_replay_plan, gather_latents, paged_attention, reconstruct_k, reconstruct_v,
    rope_k_in_place, CacheParams, PagedLowRankCache, ReplayBuffers, ReplayGuard, ReplayOp,
    ReplayPlan, SqueezeReport,
};
use crate::linalg::{matmul, matmul_flops, DenseMatrix};
use crate::model::{DecomposedModelWeights, ModelConfig};
use crate::parallel::{PerWorker, WorkerGroup};
use crate::pipelines::{
    apply_rope, deinfer_gather_latents, forward_deinfer_attention, forward_deinfer_attention_with_shards,
    forward_deinfer_mlp, forward_deinfer_mlp_with_shards, kv_head_range, query_head_range,
    shard_deinfer_attention, shard_deinfer_mlp, tags, DeinferAttentionShards, DeinferMlpShards,
    ForwardTrace,
};

/// The single sequence id a session decodes. Sessions are one sequence
/// deep; the cache layer underneath supports many, the session does not.
const SEQ: u64 = 0;

/// What one decode step cost: the token's position and the merged trace of
/// every layer's FLOPs and collective events, in issue order.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub position: usize,
    pub trace: ForwardTrace,
}

/// Prefill-then-decode state for one sequence of a decomposed model.
pub struct DecodeSession {
    cfg: ModelConfig,
    world_size: usize,
    attn_shards: Vec<DeinferAttentionShards>,
    mlp_shards: Vec<DeinferMlpShards>,
    caches: Vec<PagedLowRankCache>,
    plans: Vec<ReplayPlan>,
    guards: Vec<ReplayGuard>,
    /// `buffers[layer][rank]`.
    buffers: Vec<Vec<ReplayBuffers>>,
    group: WorkerGroup,
    next_pos: usize,
}

impl DecodeSession {
    /// Shard the weights, size every cache and buffer, and derive each
    /// layer's replay plan. `num_blocks * block_size` bounds the sequence
    /// length; every buffer is sized to that bound once, here.
    pub fn new(
        cfg: &ModelConfig,
        weights: &DecomposedModelWeights,
        world_size: usize,
        num_blocks: usize,
        block_size: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if weights.layers.len() != cfg.num_layers {
            return Err(Error::Plan(format!(
                "weights cover {} layers, config has {}",
                weights.layers.len(),
                cfg.num_layers
            )));
        }
        let capacity = num_blocks * block_size;
        let d = cfg.head_dim;

        let mut attn_shards = Vec::with_capacity(cfg.num_layers);
        let mut mlp_shards = Vec::with_capacity(cfg.num_layers);
        let mut caches = Vec::with_capacity(cfg.num_layers);
        let mut plans = Vec::with_capacity(cfg.num_layers);
        let mut guards = Vec::with_capacity(cfg.num_layers);
        let mut buffers = Vec::with_capacity(cfg.num_layers);
        for layer in &weights.layers {
            let attn = shard_deinfer_attention(cfg, &layer.attention, world_size)?;
            let mlp = shard_deinfer_mlp(cfg, &layer.mlp, world_size)?;
            let mut cache = PagedLowRankCache::new(CacheParams {
                num_blocks,
                block_size,
                l_k: attn.l_k(),
                l_v: attn.l_v(),
            })?;
            cache.create_sequence(SEQ)?;
            let plan = build_replay_plan(cfg, &attn, SEQ, capacity)?;
            guards.push(ReplayGuard::from_plan(&plan));
            let mut layer_bufs = Vec::with_capacity(world_size);
            for r in 0..world_size {
                let q_range = query_head_range(cfg, world_size, r)?;
                let kv_range = kv_head_range(cfg, world_size, r)?;
                layer_bufs.push(ReplayBuffers::new(
                    capacity,
                    attn.l_k(),
                    attn.l_v(),
                    kv_range.len() * d,
                    q_range.len() * d,
                )?);
            }
            attn_shards.push(attn);
            mlp_shards.push(mlp);
            caches.push(cache);
            plans.push(plan);
            buffers.push(layer_bufs);
        }

        Ok(Self {
            cfg: cfg.clone(),
            world_size,
            attn_shards,
            mlp_shards,
            caches,
            plans,
            guards,
            buffers,
            group: WorkerGroup::new(world_size)?,
            next_pos: 0,
        })
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    /// Position the next decoded token will occupy. Monotonic for the life
    /// of the session; squeezes drop tokens but never reuse positions.
    pub fn next_position(&self) -> usize {
        self.next_pos
    }

    pub fn capacity(&self) -> usize {
        self.caches[0].params().capacity_tokens()
    }

    /// Live cached tokens in one layer's sequence.
    pub fn cached_tokens(&self, layer: usize) -> Result<usize> {
        self.caches[layer].sequence_len(SEQ)
    }

    pub fn replay_plan(&self, layer: usize) -> &ReplayPlan {
        &self.plans[layer]
    }

    /// One layer's cache, for inspecting block placement and runs.
    pub fn cache(&self, layer: usize) -> &PagedLowRankCache {
        &self.caches[layer]
    }

    /// Fragment every layer cache's free list with a seeded churn of
    /// throwaway sequences, so the real sequence's physical blocks land
    /// scattered the way they would on a pool that has served other
    /// sequences first. Must run before `prefill`.
    pub fn scramble_block_allocation(&mut self, seed: u64) -> Result<()> {
        use rand::seq::SliceRandom;
        use rand::{RngCore, SeedableRng};
        if self.next_pos != 0 {
            return Err(Error::Replay(
                "allocation scrambling must precede prefill".into(),
            ));
        }
        for (l, cache) in self.caches.iter_mut().enumerate() {
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37 * l as u64));
            let d = cache.params().num_blocks.min(4);
            let ids: Vec<u64> = (0..d).map(|i| u64::MAX - i as u64).collect();
            for &id in &ids {
                cache.create_sequence(id)?;
            }
            let k = vec![0.0; cache.params().l_k];
            let v = vec![0.0; cache.params().l_v];
            let mut pos = vec![0usize; d];
            // Interleave appends across the throwaways until the pool is
            // exhausted, then free them in shuffled order. Freed blocks go
            // to the front of the free list, so the survivors' ordering is
            // a seed-dependent permutation.
            while cache.free_blocks() > 0 {
                let i = (rng.next_u64() % d as u64) as usize;
                cache.append_token(ids[i], &k, &v, pos[i])?;
                pos[i] += 1;
            }
            let mut order = ids;
            order.shuffle(&mut rng);
            for id in order {
                cache.free_sequence(id)?;
            }
        }
        Ok(())
    }

    /// Decode steps completed (all layers advance together).
    pub fn steps_completed(&self) -> u64 {
        self.guards[0].steps_completed()
    }

    /// Base addresses of every cache pool and replay buffer in the
    /// session, as opaque integers. Equal fingerprints before and after a
    /// stretch of decode steps witness that the replay allocated nothing.
    pub fn allocation_fingerprint(&self) -> Vec<usize> {
        let mut fp = Vec::new();
        for cache in &self.caches {
            fp.extend(cache.allocation_fingerprint());
        }
        for layer_bufs in &self.buffers {
            for bufs in layer_bufs {
                fp.extend(bufs.allocation_fingerprint());
            }
        }
        fp
    }

    /// Run the prompt through the batched pipeline once, capturing each
    /// layer's K/V latents into that layer's cache. Returns the full
    /// prompt-length hidden states; the last row feeds the first decode
    /// step. Must be called exactly once, before any decoding.
    pub fn prefill(&mut self, prompt: &DenseMatrix) -> Result<(DenseMatrix, ForwardTrace)> {
        if self.next_pos != 0 {
            return Err(Error::Replay(
                "prefill must run exactly once, on a fresh session".into(),
            ));
        }
        let t = prompt.rows();
        if t == 0 {
            return Err(Error::Parameter("prompt must hold at least one token".into()));
        }
        if t > self.capacity() {
            return Err(Error::Capacity(format!(
                "prompt of {t} tokens exceeds the session capacity {}",
                self.capacity()
            )));
        }
        let positions: Vec<usize> = (0..t).collect();
        let mut trace = ForwardTrace::new(self.world_size);
        let mut x = prompt.clone();
        for l in 0..self.cfg.num_layers {
            let mut sink = self.caches[l].sink(SEQ);
            let (attn, attn_trace) = forward_deinfer_attention_with_shards(
                &self.cfg,
                &self.attn_shards[l],
                &x,
                &positions,
                &mut self.group,
                Some(&mut sink),
            )?;
            trace.merge(&attn_trace)?;
            x = x.add(&attn)?;
            let (mlp, mlp_trace) =
                forward_deinfer_mlp_with_shards(&self.cfg, &self.mlp_shards[l], &x, &mut self.group)?;
            trace.merge(&mlp_trace)?;
            x = x.add(&mlp)?;
        }
        self.next_pos = t;
        Ok((x, trace))
    }

    /// Decode one token. `token_hidden` is the token's input row (`1 x h`);
    /// the result is its output row plus the step's cost report.
    ///
    /// Per layer this replays the layer's plan: append the step's latents to
    /// the cache, then per worker gather, reconstruct, rotate, and attend,
    /// all over full-capacity buffers. The guard verifies the op sequence.
    pub fn decode_step(&mut self, token_hidden: &DenseMatrix) -> Result<(DenseMatrix, StepReport)> {
        if self.next_pos == 0 {
            return Err(Error::Replay("decode_step before prefill".into()));
        }
        if token_hidden.rows() != 1 || token_hidden.cols() != self.cfg.hidden_dim() {
            return Err(Error::Shape(format!(
                "decode input is {}x{}, expected 1x{}",
                token_hidden.rows(),
                token_hidden.cols(),
                self.cfg.hidden_dim()
            )));
        }
        let pos = self.next_pos;
        let p = self.world_size;
        let d = self.cfg.head_dim;
        let capacity = self.capacity();
        let mut report = ForwardTrace::new(p);
        let mut x = token_hidden.clone();

        for l in 0..self.cfg.num_layers {
            let mark = self.group.ledger().len();
            let mut trace = ForwardTrace::new(p);
            let shards = &self.attn_shards[l];
            let (l_q, l_k, l_v) = (shards.l_q(), shards.l_k(), shards.l_v());

            // The step's fused latent: worker-local down-projections plus
            // the all-gather, exactly as in the batched pipeline.
            let latent = deinfer_gather_latents(shards, &x, &mut self.group, &mut trace)?;
            let q_lat = latent.slice_cols(0..l_q)?;
            let k_lat = latent.slice_cols(l_q..l_q + l_k)?;
            let v_lat = latent.slice_cols(l_q + l_k..l_q + l_k + l_v)?;

            // Reserve the slot first: the position check runs before any
            // guarded op, and a failure leaves the step cleanly unstarted.
            self.caches[l].reserve_slot(SEQ, pos)?;
            let guard = &mut self.guards[l];
            guard.begin_step()?;

            guard.record(ReplayOp::PoolAppend { seq: SEQ, l_k, l_v })?;
            self.caches[l].write_reserved(SEQ, k_lat.row(0), v_lat.row(0))?;

            for r in 0..p {
                let q_range = query_head_range(&self.cfg, p, r)?;
                let kv_range = kv_head_range(&self.cfg, p, r)?;
                let (q_cols, head_cols) = (q_range.len() * d, kv_range.len() * d);
                let bufs = &mut self.buffers[l][r];

                guard.record(ReplayOp::GatherLatents { seq: SEQ, worker: r, capacity, l_k, l_v })?;
                gather_latents(&self.caches[l], SEQ, bufs)?;

                guard.record(ReplayOp::ReconstructK { worker: r, capacity, l_k, head_cols })?;
                reconstruct_k(bufs, shards.k_up(r))?;
                trace.add_matmul_flops(r, 2 * (capacity * l_k * head_cols) as u64);

                guard.record(ReplayOp::ReconstructV { worker: r, capacity, l_v, head_cols })?;
                reconstruct_v(bufs, shards.v_up(r))?;
                trace.add_matmul_flops(r, 2 * (capacity * l_v * head_cols) as u64);

                if self.cfg.use_rope {
                    guard.record(ReplayOp::RopeInPlace { worker: r, capacity, head_cols })?;
                    rope_k_in_place(bufs, d, self.cfg.rope_base)?;
                }

                let mut q_row = matmul(&q_lat, shards.q_up(r))?;
                trace.add_matmul_flops(r, matmul_flops(&q_lat, shards.q_up(r)));
                if self.cfg.use_rope {
                    apply_rope(&mut q_row, d, &[pos], self.cfg.rope_base)?;
                }

                guard.record(ReplayOp::PagedAttention { seq: SEQ, worker: r, capacity, q_cols, head_cols })?;
                let mut att = 0;
                paged_attention(
                    &self.cfg,
                    &self.caches[l],
                    bufs,
                    q_row.row(0),
                    &q_range,
                    &kv_range,
                    &mut att,
                )?;
                trace.add_attention_flops(r, att);
            }
            guard.end_step()?;

            // Output projection: row-parallel down into the latent, reduce,
            // replicated up. Same shape and tags as the batched pipeline.
            let mut partials = Vec::with_capacity(p);
            for r in 0..p {
                let attn_row = DenseMatrix::from_rows(&[self.buffers[l][r].attn_out().to_vec()])?;
                trace.add_matmul_flops(r, matmul_flops(&attn_row, self.attn_shards[l].o_down().shard(r)));
                partials.push(matmul(&attn_row, self.attn_shards[l].o_down().shard(r))?);
            }
            let latent_o =
                self.group.reduce_sum_matrix(&PerWorker::new(partials), tags::ATTN_OUTPUT_LATENT)?;
            let attn_out = matmul(latent_o.get(0), self.attn_shards[l].o_up())?;
            for r in 0..p {
                trace.add_matmul_flops(r, matmul_flops(latent_o.get(0), self.attn_shards[l].o_up()));
            }
            trace.capture_events(&self.group, mark);
            x = x.add(&attn_out)?;

            let (mlp_out, mlp_trace) =
                forward_deinfer_mlp_with_shards(&self.cfg, &self.mlp_shards[l], &x, &mut self.group)?;
            trace.merge(&mlp_trace)?;
            x = x.add(&mlp_out)?;

            report.merge(&trace)?;
        }

        self.next_pos += 1;
        Ok((x, StepReport { position: pos, trace: report }))
    }

    /// Drop cached tokens, keeping the listed token indices in every
    /// layer's cache. Runs between steps; the next step's replay signature
    /// is unchanged because buffer shapes never depended on the live count.
    pub fn squeeze(&mut self, keep: &[usize]) -> Result<Vec<SqueezeReport>> {
        self.caches.iter_mut().map(|c| c.squeeze(SEQ, keep)).collect()
    }
}

/// Batched-pipeline oracle for decode outputs: run the whole token history
/// through the full deinfer forward on a fresh group and return all rows.
/// A decode step's output must equal the last row bitwise, because every
/// operation between them is row-independent and shared kernel for kernel.
pub fn recompute_reference(
    cfg: &ModelConfig,
    weights: &DecomposedModelWeights,
    inputs: &DenseMatrix,
    positions: &[usize],
    world_size: usize,
) -> Result<DenseMatrix> {
    let mut group = WorkerGroup::new(world_size)?;
    let mut x = inputs.clone();
    for layer in &weights.layers {
        let (attn, _) =
            forward_deinfer_attention(cfg, &layer.attention, &x, positions, &mut group, None)?;
        x = x.add(&attn)?;
        let (mlp, _) = forward_deinfer_mlp(cfg, &layer.mlp, &x, &mut group)?;
        x = x.add(&mlp)?;
    }
    Ok(x)
}
