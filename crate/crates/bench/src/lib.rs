//! Shared fixtures for the criterion benches: one mid-size model built
//! deterministically, with dense weights, decomposed factors, and a batch
//! of hidden states ready to push through any pipeline.

use lrtp_core::model::{AttentionVariant, MatrixName, MlpVariant, ModelConfig};
use lrtp_core::{
    decompose_model, synth_hidden, synth_model_weights, DecomposedModelWeights,
    DecompositionPlan, DenseMatrix, DenseModelWeights,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// h = 128, h_kv = 64, m = 256: large enough that matmul dominates, small
/// enough that a full criterion run stays in seconds.
pub fn bench_config() -> ModelConfig {
    ModelConfig {
        num_heads: 8,
        num_kv_heads: 4,
        head_dim: 16,
        intermediate_dim: 256,
        mlp_variant: MlpVariant::Glu,
        attention_variant: AttentionVariant::Gqa,
        use_rope: true,
        rope_base: 10_000.0,
        num_layers: 1,
    }
}

/// Half-rank-ish plan with every rank a multiple of 4, so the benches can
/// shard across 1, 2, or 4 workers.
pub fn bench_plan(cfg: &ModelConfig) -> DecompositionPlan {
    let mut ranks = BTreeMap::new();
    for name in MatrixName::ALL {
        let (rows, cols) = cfg.matrix_dims(name);
        ranks.insert(name, rows.min(cols) / 2);
    }
    DecompositionPlan::uniform(cfg.num_layers, ranks)
}

pub struct Fixture {
    pub cfg: ModelConfig,
    pub dense: DenseModelWeights,
    pub dec: DecomposedModelWeights,
    pub hidden: DenseMatrix,
    pub positions: Vec<usize>,
}

impl Fixture {
    pub fn new(tokens: usize, seed: u64) -> Self {
        let cfg = bench_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dense = synth_model_weights(&cfg, &mut rng).unwrap();
        let dec = decompose_model(&cfg, &dense, &bench_plan(&cfg)).unwrap();
        let hidden = synth_hidden(tokens, cfg.hidden_dim(), &mut rng);
        let positions = (0..tokens).collect();
        Self { cfg, dense, dec, hidden, positions }
    }
}
