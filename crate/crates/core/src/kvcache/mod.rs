//! Paged storage of low-rank K/V latents and the static-replay machinery
//! that reconstructs per-head K/V from them at decode time.
//!
//! The deinfer pipeline caches each token's K/V *latent* rows (rank-wide,
//! shared by all workers) instead of the reconstructed per-head rows. That
//! shrinks the cache by the rank-to-width ratio and moves reconstruction
//! into the decode step, where it must not disturb the step's execution
//! signature. The pieces:
//!
//! - [`PagedLowRankCache`]: block-pooled latent storage with explicit
//!   reserve/write discipline and epoch stamping ([`pool`]).
//! - [`ReplayBuffers`]: preallocated fixed-shape scratch per worker
//!   ([`buffers`]).
//! - [`ReplayPlan`] and [`ReplayGuard`]: the per-step op signature and its
//!   enforcement ([`plan`]).
//! - The op bodies themselves: gather, reconstruct, rope, attend
//!   ([`replay`]).
//!
//! Replay is *static*: every decode step executes the same ops over the
//! same shapes, with only buffer contents and the live-token count varying.
//! Reconstruction GEMMs run over full buffer capacity; liveness is enforced
//! by masking (attention reads the live prefix, rope sees zeroed positions
//! past it), never by reshaping.

mod buffers;
mod plan;
mod pool;
mod replay;
mod runs;

pub use buffers::{FixedBuffer, ReplayBuffers};
pub use plan::{build_replay_plan, ReplayGuard, ReplayOp, ReplayPlan};
pub use pool::{CacheParams, CacheSink, PagedLowRankCache, SqueezeReport};
pub use replay::{gather_latents, paged_attention, reconstruct_k, reconstruct_v, rope_k_in_place};
pub use runs::{build_remapping_index, scan_contiguous_runs, BlockRun, RemappingIndexList};
