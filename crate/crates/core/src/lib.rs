//! Deterministic simulation and verification of tensor-parallel inference
//! for low-rank-decomposed transformer blocks.
//!
//! The crate has three jobs:
//!
//! 1. Execute attention and MLP blocks under three parallelization modes
//!    (dense tensor parallel, naively decomposed, latent-space) on a
//!    simulated lockstep worker group and prove they compute the same
//!    function.
//! 2. Account for every element moved by a collective and reconcile the
//!    measured ledger against an analytic communication-cost model.
//! 3. Model a paged low-rank KV cache whose decode path replays a fixed
//!    operation sequence over fixed buffers, and verify that discipline.
//!
//! Everything is `f64`, single-threaded, and seeded; no GPU or network is
//! involved anywhere.

pub mod costmodel;
pub mod decode;
pub mod decomposition;
pub mod error;
pub mod kvcache;
pub mod linalg;
pub mod model;
pub mod parallel;
pub mod pipelines;
pub mod verify;

pub use decomposition::{
    absorb_factor_chain, decompose_matrix, decompose_model, rank_from_ratio, DecompositionPlan,
    FactorPair,
};
pub use costmodel::{
    attention_cost, block_cost, compare_with_measured, expected_sublayer_volumes, mlp_cost,
    model_cost_report, saved_percent, CostConvention, CostInputs, CostReport, CostRow, CostStatus,
    PipelineMode, Reconciliation, ReconcileEntry, SubLayer,
};
pub use decode::{recompute_reference, DecodeSession, StepReport};
pub use error::{Error, Result};
pub use kvcache::{
    build_remapping_index, build_replay_plan, scan_contiguous_runs, BlockRun, CacheParams,
    PagedLowRankCache, RemappingIndexList, ReplayGuard, ReplayOp, ReplayPlan, SqueezeReport,
};
pub use linalg::{
    batched_matmul, matmul, rel_frobenius_distance, truncated_svd, DenseMatrix,
    TruncatedSvdResult,
};
pub use model::{
    synth_hidden, synth_model_weights, AttentionVariant, DecomposedModelWeights,
    DenseModelWeights, MatrixName, MlpVariant, ModelConfig,
};
pub use parallel::{CollectiveKind, PerWorker, TrafficEvent, TrafficLedger, WorkerGroup};
pub use pipelines::{
    forward_base_attention, forward_base_mlp, forward_deinfer_attention, forward_deinfer_mlp,
    forward_dense_tp_attention, forward_dense_tp_mlp, ForwardTrace,
};
pub use verify::{
    all_pass, census_suite, cost_suite, equivalence_suite, kvcache_suite, run_suites,
    PropertyOutcome, SuiteName, VerifySpec,
};
