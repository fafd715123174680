//! Forward-pass pipelines for one transformer block under tensor parallelism.
//!
//! Three interchangeable modes are implemented for both sub-layers
//! (self-attention and MLP):
//!
//! * **dense** - classic tensor parallelism over the full-rank weights:
//!   column-sharded input projections, row-parallel output projection,
//!   one reduce-sum per sub-layer.
//! * **base** - the naive port of dense sharding to low-rank factor pairs:
//!   every pair is treated as its own shard/reduce boundary, so the
//!   attention sub-layer pays four reduce-sums and every worker repeats
//!   the full attention computation.
//! * **deinfer** - the rearranged low-rank pipeline: all down-projections
//!   are fused into one concat-split shard, a single all-gather moves the
//!   (much smaller) latent activations, up-projections run column-sharded
//!   so heads stay worker-local, and only the output projection still needs
//!   a reduce-sum.
//!
//! Every forward returns the output together with a [`ForwardTrace`] holding
//! per-worker FLOP counters and the slice of collective-traffic events the
//! call appended to the group ledger. Traces are what the cost-model
//! reconciliation and the equivalence tests consume.

mod attention;
mod mlp;
mod reference;
mod rope;

pub use attention::{
    forward_base_attention, forward_deinfer_attention, forward_deinfer_attention_with_shards,
    forward_dense_tp_attention, shard_deinfer_attention, DeinferAttentionShards, LatentSink,
};
pub use mlp::{
    forward_base_mlp, forward_deinfer_mlp, forward_deinfer_mlp_with_shards, forward_dense_tp_mlp,
    shard_deinfer_mlp, DeinferMlpShards,
};
pub use reference::{attention_single_head, self_attention_reference};
pub use rope::apply_rope;

pub(crate) use attention::deinfer_gather_latents;
pub(crate) use reference::attention_head_kernel;
pub(crate) use rope::{check_rope_params, rope_rows};

use crate::model::ModelConfig;
use crate::parallel::{CollectiveKind, TrafficEvent, WorkerGroup};
use crate::{Error, Result};
use std::ops::Range;

/// Ledger tags used by the pipelines, one per logical collective site.
pub mod tags {
    pub const ATTN_Q: &str = "attention.q";
    pub const ATTN_K: &str = "attention.k";
    pub const ATTN_V: &str = "attention.v";
    pub const ATTN_O: &str = "attention.o";
    /// Dense TP: the single reduce-sum after the attention output projection.
    pub const ATTN_OUTPUT: &str = "attention.output";
    /// DeInfer: the all-gather of the fused q/k/v latent activations.
    pub const ATTN_QKV_LATENT: &str = "attention.qkv-latent";
    /// DeInfer: the reduce-sum of the output-projection latent.
    pub const ATTN_OUTPUT_LATENT: &str = "attention.output-latent";
    pub const MLP_UP: &str = "mlp.up";
    pub const MLP_GATE: &str = "mlp.gate";
    pub const MLP_DOWN: &str = "mlp.down";
    /// Dense TP: the single reduce-sum after the down projection.
    pub const MLP_OUTPUT: &str = "mlp.output";
    /// DeInfer: the all-gather of the fused up/gate latent activations.
    pub const MLP_IN_LATENT: &str = "mlp.input-latent";
    /// DeInfer: the reduce-sum of the down-projection latent.
    pub const MLP_DOWN_LATENT: &str = "mlp.down-latent";
}

/// Per-call record of what a forward pass cost.
///
/// FLOP counters are per worker rank. `events` is the contiguous run of
/// ledger entries this forward appended, in issue order.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    world_size: usize,
    attention_flops: Vec<u64>,
    matmul_flops: Vec<u64>,
    events: Vec<TrafficEvent>,
}

impl ForwardTrace {
    /// An empty trace, ready to [`merge`](Self::merge) others into.
    pub fn new(world_size: usize) -> Self {
        Self {
            world_size,
            attention_flops: vec![0; world_size],
            matmul_flops: vec![0; world_size],
            events: Vec::new(),
        }
    }

    /// Copy every ledger event recorded at or after `mark` into the trace.
    pub(crate) fn capture_events(&mut self, group: &WorkerGroup, mark: usize) {
        self.events = group.ledger().events()[mark..].to_vec();
    }

    pub(crate) fn add_attention_flops(&mut self, rank: usize, flops: u64) {
        self.attention_flops[rank] += flops;
    }

    pub(crate) fn add_matmul_flops(&mut self, rank: usize, flops: u64) {
        self.matmul_flops[rank] += flops;
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    /// Self-attention FLOPs (score and value accumulation) on one rank.
    pub fn attention_flops(&self, rank: usize) -> u64 {
        self.attention_flops[rank]
    }

    /// Projection-matmul FLOPs on one rank.
    pub fn matmul_flops(&self, rank: usize) -> u64 {
        self.matmul_flops[rank]
    }

    pub fn total_attention_flops(&self) -> u64 {
        self.attention_flops.iter().sum()
    }

    pub fn total_matmul_flops(&self) -> u64 {
        self.matmul_flops.iter().sum()
    }

    pub fn events(&self) -> &[TrafficEvent] {
        &self.events
    }

    pub fn collective_calls(&self, kind: CollectiveKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    /// Total ledger volume of the given kind, in elements.
    pub fn volume(&self, kind: CollectiveKind) -> u64 {
        self.events
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.elements)
            .sum()
    }

    pub fn total_volume(&self) -> u64 {
        self.events.iter().map(|e| e.elements).sum()
    }

    /// Fold another trace (for the same group) into this one.
    pub fn merge(&mut self, other: &ForwardTrace) -> Result<()> {
        if other.world_size != self.world_size {
            return Err(Error::Shape(format!(
                "cannot merge traces for world sizes {} and {}",
                self.world_size, other.world_size
            )));
        }
        for r in 0..self.world_size {
            self.attention_flops[r] += other.attention_flops[r];
            self.matmul_flops[r] += other.matmul_flops[r];
        }
        self.events.extend(other.events.iter().cloned());
        Ok(())
    }
}

/// Query-head range owned by `rank` when `num_heads` is split over `p` workers.
pub(crate) fn query_head_range(cfg: &ModelConfig, p: usize, rank: usize) -> Result<Range<usize>> {
    if !cfg.num_heads.is_multiple_of(p) {
        return Err(Error::Partition(format!(
            "{} query heads cannot be split over {} workers",
            cfg.num_heads, p
        )));
    }
    let per = cfg.num_heads / p;
    Ok(rank * per..(rank + 1) * per)
}

/// KV-head range a worker must hold to serve its query heads.
///
/// With grouped-query attention each KV head serves `num_heads /
/// num_kv_heads` consecutive query heads. When `p` exceeds the KV-head
/// count the ranges of different workers overlap: the shared KV head is
/// replicated rather than split, which is why this is derived from the
/// query range instead of partitioning the KV heads directly.
pub(crate) fn kv_head_range(cfg: &ModelConfig, p: usize, rank: usize) -> Result<Range<usize>> {
    let q = query_head_range(cfg, p, rank)?;
    let group = cfg.num_heads / cfg.num_kv_heads;
    Ok(q.start / group..(q.end - 1) / group + 1)
}

/// SiLU activation, used by the GLU MLP variant.
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// ReLU activation, used by the non-GLU MLP variant.
pub(crate) fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[cfg(test)]
mod trace_tests {
    use super::*;
    use crate::model::test_support::toy_gqa_config;

    #[test]
    fn head_ranges_partition_queries_and_replicate_kv() {
        // toy config: 4 query heads, 2 kv heads (group size 2).
        let cfg = toy_gqa_config();
        assert_eq!(query_head_range(&cfg, 2, 0).unwrap(), 0..2);
        assert_eq!(query_head_range(&cfg, 2, 1).unwrap(), 2..4);
        assert_eq!(kv_head_range(&cfg, 2, 0).unwrap(), 0..1);
        assert_eq!(kv_head_range(&cfg, 2, 1).unwrap(), 1..2);

        // p = 4 > kv heads: each kv head is replicated on two workers.
        assert_eq!(kv_head_range(&cfg, 4, 0).unwrap(), 0..1);
        assert_eq!(kv_head_range(&cfg, 4, 1).unwrap(), 0..1);
        assert_eq!(kv_head_range(&cfg, 4, 2).unwrap(), 1..2);
        assert_eq!(kv_head_range(&cfg, 4, 3).unwrap(), 1..2);

        assert!(query_head_range(&cfg, 3, 0).is_err());
    }

    #[test]
    fn kv_range_uses_global_head_indices() {
        // 12 query heads over 3 kv heads, split across 2 workers. Worker 1
        // owns global query heads 6..12, which map to kv heads 1 and 2; a
        // local-index mapping would wrongly hand it kv head 0 as well.
        let mut cfg = toy_gqa_config();
        cfg.num_heads = 12;
        cfg.num_kv_heads = 3;
        assert_eq!(kv_head_range(&cfg, 2, 0).unwrap(), 0..2);
        assert_eq!(kv_head_range(&cfg, 2, 1).unwrap(), 1..3);
    }
}
