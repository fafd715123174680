//! The attention sub-layer under the three parallelization modes.

use super::{
    apply_rope, attention_single_head, kv_head_range, query_head_range, tags, ForwardTrace,
};
use crate::decomposition::FactorPair;
use crate::linalg::{batched_matmul, matmul, matmul_flops, DenseMatrix};
use crate::model::{DecomposedAttentionWeights, DenseAttentionWeights, ModelConfig};
use crate::parallel::{
    partition_column_shard, partition_concat_split, partition_row_parallel, PerWorker,
    ShardedMatrix, WorkerGroup,
};
use crate::{Error, Result};
use std::ops::Range;

/// Consumer of the per-token latent K/V rows the deinfer pipeline produces.
///
/// The gathered latent is replicated across the group, so the sink sees each
/// token exactly once per forward, not once per worker. The paged cache
/// implements this to capture prefill latents without re-projecting.
pub trait LatentSink {
    fn push_token(&mut self, k_latent: &[f64], v_latent: &[f64], position: usize) -> Result<()>;
}

/// Handy sink for tests: collects `(k_latent, v_latent, position)` rows.
impl LatentSink for Vec<(Vec<f64>, Vec<f64>, usize)> {
    fn push_token(&mut self, k_latent: &[f64], v_latent: &[f64], position: usize) -> Result<()> {
        self.push((k_latent.to_vec(), v_latent.to_vec(), position));
        Ok(())
    }
}

fn check_inputs(
    cfg: &ModelConfig,
    hidden: &DenseMatrix,
    positions: &[usize],
    p: usize,
) -> Result<()> {
    cfg.validate()?;
    if hidden.cols() != cfg.hidden_dim() {
        return Err(Error::Shape(format!(
            "hidden width {} does not match model hidden dim {}",
            hidden.cols(),
            cfg.hidden_dim()
        )));
    }
    if positions.len() != hidden.rows() {
        return Err(Error::Shape(format!(
            "{} positions for {} hidden rows",
            positions.len(),
            hidden.rows()
        )));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter(
            "token positions must be strictly increasing".into(),
        ));
    }
    query_head_range(cfg, p, 0)?;
    Ok(())
}

fn check_pair_dims(name: &str, pair: &FactorPair, d_in: usize, d_out: usize) -> Result<()> {
    if pair.d_in() != d_in || pair.d_out() != d_out {
        return Err(Error::Shape(format!(
            "{name} factors map {}->{}, expected {}->{}",
            pair.d_in(),
            pair.d_out(),
            d_in,
            d_out
        )));
    }
    Ok(())
}

fn check_decomposed_attention(cfg: &ModelConfig, w: &DecomposedAttentionWeights) -> Result<()> {
    let h = cfg.hidden_dim();
    let hkv = cfg.kv_dim();
    check_pair_dims("q", &w.q, h, h)?;
    check_pair_dims("k", &w.k, h, hkv)?;
    check_pair_dims("v", &w.v, h, hkv)?;
    check_pair_dims("o", &w.o, h, h)
}

fn check_dense_attention(cfg: &ModelConfig, w: &DenseAttentionWeights) -> Result<()> {
    let h = cfg.hidden_dim();
    let hkv = cfg.kv_dim();
    for (name, m, d_out) in [
        ("wq", &w.wq, h),
        ("wk", &w.wk, hkv),
        ("wv", &w.wv, hkv),
        ("wo", &w.wo, h),
    ] {
        if m.rows() != h || m.cols() != d_out {
            return Err(Error::Shape(format!(
                "{name} is {}x{}, expected {}x{}",
                m.rows(),
                m.cols(),
                h,
                d_out
            )));
        }
    }
    Ok(())
}

/// Attention over one worker's local query heads.
///
/// `q_local` holds the heads of `q_range` side by side; `k_local` /
/// `v_local` hold the KV heads of `kv_range`. Each query head is mapped to
/// its KV head through its *global* index, so the mapping stays correct when
/// `kv_range` is a replicated slice that does not start at zero.
pub(crate) fn local_heads_attention(
    cfg: &ModelConfig,
    q_local: &DenseMatrix,
    k_local: &DenseMatrix,
    v_local: &DenseMatrix,
    q_range: &Range<usize>,
    kv_range: &Range<usize>,
    flops: &mut u64,
) -> Result<DenseMatrix> {
    let d = cfg.head_dim;
    if q_local.cols() != q_range.len() * d {
        return Err(Error::Shape(format!(
            "local q is {} wide, expected {} heads x {}",
            q_local.cols(),
            q_range.len(),
            d
        )));
    }
    if k_local.cols() != kv_range.len() * d || v_local.cols() != kv_range.len() * d {
        return Err(Error::Shape(format!(
            "local k/v are {}/{} wide, expected {} kv heads x {}",
            k_local.cols(),
            v_local.cols(),
            kv_range.len(),
            d
        )));
    }
    let group_size = cfg.num_heads / cfg.num_kv_heads;
    let t = q_local.rows();
    let mut out = DenseMatrix::zeros(t, q_range.len() * d);
    for (local, global) in q_range.clone().enumerate() {
        let kv_local = global / group_size - kv_range.start;
        let qh = q_local.slice_cols(local * d..(local + 1) * d)?;
        let kh = k_local.slice_cols(kv_local * d..(kv_local + 1) * d)?;
        let vh = v_local.slice_cols(kv_local * d..(kv_local + 1) * d)?;
        let oh = attention_single_head(&qh, &kh, &vh, true, flops)?;
        for i in 0..t {
            out.row_mut(i)[local * d..(local + 1) * d].copy_from_slice(oh.row(i));
        }
    }
    Ok(out)
}

/// Classic tensor parallelism over the dense weights: column-sharded q/k/v
/// projections (KV heads replicated when `p > num_kv_heads`), worker-local
/// attention, row-parallel output projection, one reduce-sum.
pub fn forward_dense_tp_attention(
    cfg: &ModelConfig,
    weights: &DenseAttentionWeights,
    hidden: &DenseMatrix,
    positions: &[usize],
    group: &mut WorkerGroup,
) -> Result<(DenseMatrix, ForwardTrace)> {
    let p = group.world_size();
    check_inputs(cfg, hidden, positions, p)?;
    check_dense_attention(cfg, weights)?;
    let mark = group.ledger().len();
    let mut trace = ForwardTrace::new(p);
    let d = cfg.head_dim;

    let wq = partition_column_shard(&weights.wq, p)?;
    let wo = partition_row_parallel(&weights.wo, p)?;

    let mut partials = Vec::with_capacity(p);
    for r in 0..p {
        let q_range = query_head_range(cfg, p, r)?;
        let kv_range = kv_head_range(cfg, p, r)?;
        // K/V columns are sliced by the (possibly overlapping) kv range
        // rather than partitioned, so shared KV heads are replicated.
        let wk_r = weights.wk.slice_cols(kv_range.start * d..kv_range.end * d)?;
        let wv_r = weights.wv.slice_cols(kv_range.start * d..kv_range.end * d)?;

        let mut q = matmul(hidden, wq.shard(r))?;
        trace.add_matmul_flops(r, matmul_flops(hidden, wq.shard(r)));
        let mut k = matmul(hidden, &wk_r)?;
        trace.add_matmul_flops(r, matmul_flops(hidden, &wk_r));
        let v = matmul(hidden, &wv_r)?;
        trace.add_matmul_flops(r, matmul_flops(hidden, &wv_r));
        if cfg.use_rope {
            apply_rope(&mut q, d, positions, cfg.rope_base)?;
            apply_rope(&mut k, d, positions, cfg.rope_base)?;
        }

        let mut att = 0;
        let attn = local_heads_attention(cfg, &q, &k, &v, &q_range, &kv_range, &mut att)?;
        trace.add_attention_flops(r, att);
        trace.add_matmul_flops(r, matmul_flops(&attn, wo.shard(r)));
        partials.push(matmul(&attn, wo.shard(r))?);
    }

    let out = group.reduce_sum_matrix(&PerWorker::new(partials), tags::ATTN_OUTPUT)?;
    trace.capture_events(group, mark);
    Ok((out.get(0).clone(), trace))
}

/// One naively sharded factor pair: column-split down, row-parallel up, one
/// reduce-sum over the full-width output.
fn low_rank_pair_reduce(
    input: &DenseMatrix,
    pair: &FactorPair,
    group: &mut WorkerGroup,
    tag: &str,
    trace: &mut ForwardTrace,
) -> Result<DenseMatrix> {
    let p = group.world_size();
    let down = partition_column_shard(&pair.down, p)?;
    let up = partition_row_parallel(&pair.up, p)?;
    let mut partials = Vec::with_capacity(p);
    for r in 0..p {
        let latent = matmul(input, down.shard(r))?;
        trace.add_matmul_flops(r, matmul_flops(input, down.shard(r)));
        trace.add_matmul_flops(r, matmul_flops(&latent, up.shard(r)));
        partials.push(matmul(&latent, up.shard(r))?);
    }
    let out = group.reduce_sum_matrix(&PerWorker::new(partials), tag)?;
    Ok(out.get(0).clone())
}

/// The naive port of dense sharding to the decomposed weights: every factor
/// pair is its own shard/reduce boundary, costing four full-width
/// reduce-sums, and the fully replicated q/k/v mean every worker repeats the
/// complete multi-head attention.
pub fn forward_base_attention(
    cfg: &ModelConfig,
    weights: &DecomposedAttentionWeights,
    hidden: &DenseMatrix,
    positions: &[usize],
    group: &mut WorkerGroup,
) -> Result<(DenseMatrix, ForwardTrace)> {
    let p = group.world_size();
    check_inputs(cfg, hidden, positions, p)?;
    check_decomposed_attention(cfg, weights)?;
    let mark = group.ledger().len();
    let mut trace = ForwardTrace::new(p);

    let mut q = low_rank_pair_reduce(hidden, &weights.q, group, tags::ATTN_Q, &mut trace)?;
    let mut k = low_rank_pair_reduce(hidden, &weights.k, group, tags::ATTN_K, &mut trace)?;
    let v = low_rank_pair_reduce(hidden, &weights.v, group, tags::ATTN_V, &mut trace)?;
    if cfg.use_rope {
        apply_rope(&mut q, cfg.head_dim, positions, cfg.rope_base)?;
        apply_rope(&mut k, cfg.head_dim, positions, cfg.rope_base)?;
    }

    // After the reduces every worker holds identical full q/k/v, so each
    // repeats the whole attention. The replicas are bit-identical: compute
    // once and charge every rank the full FLOP count.
    let mut att = 0;
    let attn = local_heads_attention(
        cfg,
        &q,
        &k,
        &v,
        &(0..cfg.num_heads),
        &(0..cfg.num_kv_heads),
        &mut att,
    )?;
    for r in 0..p {
        trace.add_attention_flops(r, att);
    }

    let out = low_rank_pair_reduce(&attn, &weights.o, group, tags::ATTN_O, &mut trace)?;
    trace.capture_events(group, mark);
    Ok((out, trace))
}

/// Weight shards for the rearranged low-rank attention pipeline, prebuilt so
/// prefill and every decode step reuse one deterministic partitioning.
#[derive(Debug, Clone)]
pub struct DeinferAttentionShards {
    world_size: usize,
    /// q/k/v down-projections fused into one concat-split shard over the
    /// summed latent width `l_q + l_k + l_v`.
    qkv_down: ShardedMatrix,
    /// Per-worker column slices of the up-projections: `q_up[r]` covers
    /// worker `r`'s query heads, `k_up[r]` / `v_up[r]` its KV heads
    /// (replicated slices when `p > num_kv_heads`).
    q_up: Vec<DenseMatrix>,
    k_up: Vec<DenseMatrix>,
    v_up: Vec<DenseMatrix>,
    /// Output projection: row-parallel down into the latent, replicated up.
    o_down: ShardedMatrix,
    o_up: DenseMatrix,
    l_q: usize,
    l_k: usize,
    l_v: usize,
}

impl DeinferAttentionShards {
    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn l_q(&self) -> usize {
        self.l_q
    }

    pub fn l_k(&self) -> usize {
        self.l_k
    }

    pub fn l_v(&self) -> usize {
        self.l_v
    }

    pub fn l_o(&self) -> usize {
        self.o_up.rows()
    }

    /// Width of the fused latent moved by the all-gather.
    pub fn latent_width(&self) -> usize {
        self.l_q + self.l_k + self.l_v
    }

    /// Worker `r`'s slice of the Q up-projection (latent -> local Q heads).
    pub fn q_up(&self, rank: usize) -> &DenseMatrix {
        &self.q_up[rank]
    }

    /// Worker `r`'s slice of the K up-projection (latent -> local KV heads).
    pub fn k_up(&self, rank: usize) -> &DenseMatrix {
        &self.k_up[rank]
    }

    pub fn v_up(&self, rank: usize) -> &DenseMatrix {
        &self.v_up[rank]
    }

    /// Row-parallel output down-projection (local heads -> latent partials).
    pub fn o_down(&self) -> &ShardedMatrix {
        &self.o_down
    }

    /// Replicated output up-projection (latent -> hidden).
    pub fn o_up(&self) -> &DenseMatrix {
        &self.o_up
    }
}

/// Partition decomposed attention weights for the deinfer pipeline.
pub fn shard_deinfer_attention(
    cfg: &ModelConfig,
    weights: &DecomposedAttentionWeights,
    p: usize,
) -> Result<DeinferAttentionShards> {
    cfg.validate()?;
    check_decomposed_attention(cfg, weights)?;
    query_head_range(cfg, p, 0)?;
    let d = cfg.head_dim;

    let qkv_down =
        partition_concat_split(&[&weights.q.down, &weights.k.down, &weights.v.down], p)?;
    let mut q_up = Vec::with_capacity(p);
    let mut k_up = Vec::with_capacity(p);
    let mut v_up = Vec::with_capacity(p);
    for r in 0..p {
        let q_range = query_head_range(cfg, p, r)?;
        let kv_range = kv_head_range(cfg, p, r)?;
        q_up.push(weights.q.up.slice_cols(q_range.start * d..q_range.end * d)?);
        k_up.push(weights.k.up.slice_cols(kv_range.start * d..kv_range.end * d)?);
        v_up.push(weights.v.up.slice_cols(kv_range.start * d..kv_range.end * d)?);
    }
    let o_down = partition_row_parallel(&weights.o.down, p)?;

    Ok(DeinferAttentionShards {
        world_size: p,
        qkv_down,
        q_up,
        k_up,
        v_up,
        o_down,
        o_up: weights.o.up.clone(),
        l_q: weights.q.rank,
        l_k: weights.k.rank,
        l_v: weights.v.rank,
    })
}

/// Compute the fused q/k/v latent and gather it across the group. Returns
/// the replicated `t x (l_q + l_k + l_v)` latent.
pub(crate) fn deinfer_gather_latents(
    shards: &DeinferAttentionShards,
    hidden: &DenseMatrix,
    group: &mut WorkerGroup,
    trace: &mut ForwardTrace,
) -> Result<DenseMatrix> {
    let p = group.world_size();
    let mut locals = Vec::with_capacity(p);
    for r in 0..p {
        let shard = shards.qkv_down.shard(r);
        trace.add_matmul_flops(r, matmul_flops(hidden, shard));
        locals.push(matmul(hidden, shard)?);
    }
    let gathered =
        group.all_gather_matrix_cols(&PerWorker::new(locals), tags::ATTN_QKV_LATENT)?;
    Ok(gathered.get(0).clone())
}

/// The rearranged low-rank pipeline over prebuilt shards.
///
/// One all-gather moves the fused latent; up-projections run column-sharded
/// as a per-worker batched matmul so attention stays worker-local, exactly
/// as in dense TP; the output projection reduces in the latent space
/// (`2 * l_o` per token instead of `2 * h`).
pub fn forward_deinfer_attention_with_shards(
    cfg: &ModelConfig,
    shards: &DeinferAttentionShards,
    hidden: &DenseMatrix,
    positions: &[usize],
    group: &mut WorkerGroup,
    mut sink: Option<&mut dyn LatentSink>,
) -> Result<(DenseMatrix, ForwardTrace)> {
    let p = group.world_size();
    if shards.world_size != p {
        return Err(Error::Partition(format!(
            "shards built for world size {}, group has {}",
            shards.world_size, p
        )));
    }
    check_inputs(cfg, hidden, positions, p)?;
    let mark = group.ledger().len();
    let mut trace = ForwardTrace::new(p);

    let latent = deinfer_gather_latents(shards, hidden, group, &mut trace)?;
    let q_lat = latent.slice_cols(0..shards.l_q)?;
    let k_lat = latent.slice_cols(shards.l_q..shards.l_q + shards.l_k)?;
    let v_lat =
        latent.slice_cols(shards.l_q + shards.l_k..shards.l_q + shards.l_k + shards.l_v)?;

    if let Some(sink) = sink.as_mut() {
        for (i, &position) in positions.iter().enumerate() {
            sink.push_token(k_lat.row(i), v_lat.row(i), position)?;
        }
    }

    let mut partials = Vec::with_capacity(p);
    for r in 0..p {
        let q_range = query_head_range(cfg, p, r)?;
        let kv_range = kv_head_range(cfg, p, r)?;
        let ups = batched_matmul(&[
            (&q_lat, &shards.q_up[r]),
            (&k_lat, &shards.k_up[r]),
            (&v_lat, &shards.v_up[r]),
        ])?;
        trace.add_matmul_flops(r, matmul_flops(&q_lat, &shards.q_up[r]));
        trace.add_matmul_flops(r, matmul_flops(&k_lat, &shards.k_up[r]));
        trace.add_matmul_flops(r, matmul_flops(&v_lat, &shards.v_up[r]));
        let mut it = ups.into_iter();
        let (mut q, mut k, v) = (
            it.next().expect("three batched products"),
            it.next().expect("three batched products"),
            it.next().expect("three batched products"),
        );
        if cfg.use_rope {
            apply_rope(&mut q, cfg.head_dim, positions, cfg.rope_base)?;
            apply_rope(&mut k, cfg.head_dim, positions, cfg.rope_base)?;
        }

        let mut att = 0;
        let attn = local_heads_attention(cfg, &q, &k, &v, &q_range, &kv_range, &mut att)?;
        trace.add_attention_flops(r, att);
        trace.add_matmul_flops(r, matmul_flops(&attn, shards.o_down.shard(r)));
        partials.push(matmul(&attn, shards.o_down.shard(r))?);
    }

    let latent_o = group.reduce_sum_matrix(&PerWorker::new(partials), tags::ATTN_OUTPUT_LATENT)?;
    // The reduced latent is replicated; each worker applies the replicated
    // up-projection. One product is computed (replicas are bit-identical)
    // and every rank is charged for it.
    let out = matmul(latent_o.get(0), &shards.o_up)?;
    for r in 0..p {
        trace.add_matmul_flops(r, matmul_flops(latent_o.get(0), &shards.o_up));
    }
    trace.capture_events(group, mark);
    Ok((out, trace))
}

/// [`forward_deinfer_attention_with_shards`] with shards built on the fly.
pub fn forward_deinfer_attention(
    cfg: &ModelConfig,
    weights: &DecomposedAttentionWeights,
    hidden: &DenseMatrix,
    positions: &[usize],
    group: &mut WorkerGroup,
    sink: Option<&mut dyn LatentSink>,
) -> Result<(DenseMatrix, ForwardTrace)> {
    let shards = shard_deinfer_attention(cfg, weights, group.world_size())?;
    forward_deinfer_attention_with_shards(cfg, &shards, hidden, positions, group, sink)
}
