//! Static replay plans and the guard that enforces them.
//!
//! A decode step is a fixed sequence of fixed-shape operations. The plan
//! records that sequence once; the guard checks each subsequent step against
//! it op by op and fails loudly on any divergence. Only buffer contents and
//! the cache's live-token count may vary between steps; shapes, op order,
//! and op count may not.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipelines::{kv_head_range, query_head_range, DeinferAttentionShards};

/// One fixed-shape operation in a decode step. Every numeric field is a
/// buffer shape, never a data value, so equality of ops means equality of
/// the memory traffic they imply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayOp {
    /// Write the step's latent K/V row into the sequence's reserved slot.
    PoolAppend { seq: u64, l_k: usize, l_v: usize },
    /// Copy the sequence's live rows into a worker's latent buffers.
    GatherLatents { seq: u64, worker: usize, capacity: usize, l_k: usize, l_v: usize },
    /// Full-capacity GEMM: latent K buffer times the worker's K up-factor.
    ReconstructK { worker: usize, capacity: usize, l_k: usize, head_cols: usize },
    /// Full-capacity GEMM: latent V buffer times the worker's V up-factor.
    ReconstructV { worker: usize, capacity: usize, l_v: usize, head_cols: usize },
    /// In-place rotary pass over the reconstructed K buffer.
    RopeInPlace { worker: usize, capacity: usize, head_cols: usize },
    /// Single-query attention over the live prefix of the K/V buffers.
    PagedAttention { seq: u64, worker: usize, capacity: usize, q_cols: usize, head_cols: usize },
}

/// The per-step op sequence for one layer of a decode session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayPlan {
    world_size: usize,
    capacity: usize,
    ops: Vec<ReplayOp>,
}

impl ReplayPlan {
    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn ops(&self) -> &[ReplayOp] {
        &self.ops
    }
}

/// Derive the fixed op sequence for one layer: the pool append, then for
/// each worker a gather, the two reconstructions, the rope pass when the
/// model uses rotary embeddings, and the attention read.
pub fn build_replay_plan(
    cfg: &ModelConfig,
    shards: &DeinferAttentionShards,
    seq: u64,
    capacity: usize,
) -> Result<ReplayPlan> {
    cfg.validate()?;
    if capacity == 0 {
        return Err(Error::Parameter("replay capacity must be positive".into()));
    }
    let p = shards.world_size();
    let (l_k, l_v) = (shards.l_k(), shards.l_v());
    let mut ops = vec![ReplayOp::PoolAppend { seq, l_k, l_v }];
    for worker in 0..p {
        let q_heads = query_head_range(cfg, p, worker)?;
        let kv_heads = kv_head_range(cfg, p, worker)?;
        let q_cols = q_heads.len() * cfg.head_dim;
        let head_cols = kv_heads.len() * cfg.head_dim;
        ops.push(ReplayOp::GatherLatents { seq, worker, capacity, l_k, l_v });
        ops.push(ReplayOp::ReconstructK { worker, capacity, l_k, head_cols });
        ops.push(ReplayOp::ReconstructV { worker, capacity, l_v, head_cols });
        if cfg.use_rope {
            ops.push(ReplayOp::RopeInPlace { worker, capacity, head_cols });
        }
        ops.push(ReplayOp::PagedAttention { seq, worker, capacity, q_cols, head_cols });
    }
    Ok(ReplayPlan { world_size: p, capacity, ops })
}

/// Verifies that every decode step replays the same op sequence.
///
/// Two ways to obtain the template: [`ReplayGuard::from_plan`] pins it up
/// front so even the first step is checked, and [`ReplayGuard::new`]
/// captures the first completed step and holds every later step to it.
#[derive(Debug, Clone, Default)]
pub struct ReplayGuard {
    expected: Option<Vec<ReplayOp>>,
    current: Vec<ReplayOp>,
    in_step: bool,
    steps_completed: u64,
}

impl ReplayGuard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_plan(plan: &ReplayPlan) -> Self {
        Self { expected: Some(plan.ops().to_vec()), ..Self::default() }
    }

    /// The pinned or captured op sequence, if one exists yet.
    pub fn template(&self) -> Option<&[ReplayOp]> {
        self.expected.as_deref()
    }

    pub fn steps_completed(&self) -> u64 {
        self.steps_completed
    }

    pub fn begin_step(&mut self) -> Result<()> {
        if self.in_step {
            return Err(Error::Replay("begin_step inside an unfinished step".into()));
        }
        self.in_step = true;
        self.current.clear();
        Ok(())
    }

    /// Record one executed op. Against a template this checks position and
    /// exact equality; during a capturing first step it only accumulates.
    pub fn record(&mut self, op: ReplayOp) -> Result<()> {
        if !self.in_step {
            return Err(Error::Replay(format!("op {op:?} recorded outside a step")));
        }
        if let Some(expected) = &self.expected {
            let idx = self.current.len();
            match expected.get(idx) {
                None => {
                    return Err(Error::Replay(format!(
                        "step overran its plan of {} ops with extra op {op:?}",
                        expected.len()
                    )));
                }
                Some(want) if *want != op => {
                    return Err(Error::Replay(format!(
                        "op {idx} diverged from the plan: expected {want:?}, got {op:?}"
                    )));
                }
                Some(_) => {}
            }
        }
        self.current.push(op);
        Ok(())
    }

    pub fn end_step(&mut self) -> Result<()> {
        if !self.in_step {
            return Err(Error::Replay("end_step without begin_step".into()));
        }
        match &self.expected {
            None => {
                if self.current.is_empty() {
                    return Err(Error::Replay("captured step is empty".into()));
                }
                self.expected = Some(std::mem::take(&mut self.current));
            }
            Some(expected) => {
                if self.current.len() != expected.len() {
                    return Err(Error::Replay(format!(
                        "step ran {} of the plan's {} ops",
                        self.current.len(),
                        expected.len()
                    )));
                }
            }
        }
        self.in_step = false;
        self.steps_completed += 1;
        Ok(())
    }
}
