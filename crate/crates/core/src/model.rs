//! Model configuration and weight containers for a single transformer
//! family: multi-head attention (MHA/MQA/GQA) plus a GLU or plain two-layer
//! MLP, with optional rotary embeddings.
//!
//! Weights follow the `hidden * W` convention: a projection from `d_in` to
//! `d_out` is stored as a `d_in x d_out` matrix.

use crate::decomposition::FactorPair;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MlpVariant {
    Glu,
    NonGlu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariant {
    Mha,
    Mqa,
    Gqa,
}

impl AttentionVariant {
    /// The variant implied by the head counts.
    pub fn infer(num_heads: usize, num_kv_heads: usize) -> Self {
        if num_kv_heads == num_heads {
            AttentionVariant::Mha
        } else if num_kv_heads == 1 {
            AttentionVariant::Mqa
        } else {
            AttentionVariant::Gqa
        }
    }
}

/// The seven weight matrices a layer may carry. `Gate` is present only for
/// GLU MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum MatrixName {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl MatrixName {
    pub const ALL: [MatrixName; 7] = [
        MatrixName::Q,
        MatrixName::K,
        MatrixName::V,
        MatrixName::O,
        MatrixName::Up,
        MatrixName::Gate,
        MatrixName::Down,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MatrixName::Q => "q",
            MatrixName::K => "k",
            MatrixName::V => "v",
            MatrixName::O => "o",
            MatrixName::Up => "up",
            MatrixName::Gate => "gate",
            MatrixName::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        MatrixName::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Plan(format!("unknown matrix name '{s}'")))
    }
}

impl std::fmt::Display for MatrixName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub intermediate_dim: usize,
    pub mlp_variant: MlpVariant,
    pub attention_variant: AttentionVariant,
    pub use_rope: bool,
    pub rope_base: f64,
    pub num_layers: usize,
}

impl ModelConfig {
    /// Hidden width `h = num_heads * head_dim`.
    pub fn hidden_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Key/value width `h_kv = num_kv_heads * head_dim`.
    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.num_kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("head counts and head_dim must be positive".into()));
        }
        if self.intermediate_dim == 0 || self.num_layers == 0 {
            return Err(Error::Config(
                "intermediate_dim and num_layers must be positive".into(),
            ));
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::Config(format!(
                "num_heads {} not divisible by num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            )));
        }
        let ok = match self.attention_variant {
            AttentionVariant::Mha => self.num_kv_heads == self.num_heads,
            AttentionVariant::Mqa => self.num_kv_heads == 1,
            AttentionVariant::Gqa => true,
        };
        if !ok {
            return Err(Error::Config(format!(
                "attention variant {:?} inconsistent with {} heads / {} kv heads",
                self.attention_variant, self.num_heads, self.num_kv_heads
            )));
        }
        if self.use_rope {
            if !self.head_dim.is_multiple_of(2) {
                return Err(Error::Config("rope requires an even head_dim".into()));
            }
            if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
                return Err(Error::Config("rope_base must be positive and finite".into()));
            }
        }
        Ok(())
    }

    /// `(d_in, d_out)` of a named projection.
    pub fn matrix_dims(&self, name: MatrixName) -> (usize, usize) {
        let h = self.hidden_dim();
        let hkv = self.kv_dim();
        let m = self.intermediate_dim;
        match name {
            MatrixName::Q | MatrixName::O => (h, h),
            MatrixName::K | MatrixName::V => (h, hkv),
            MatrixName::Up | MatrixName::Gate => (h, m),
            MatrixName::Down => (m, h),
        }
    }

    /// The matrices a layer of this config actually carries.
    pub fn present_matrices(&self) -> Vec<MatrixName> {
        let mut names = vec![MatrixName::Q, MatrixName::K, MatrixName::V, MatrixName::O];
        names.push(MatrixName::Up);
        if self.mlp_variant == MlpVariant::Glu {
            names.push(MatrixName::Gate);
        }
        names.push(MatrixName::Down);
        names
    }
}

#[derive(Debug, Clone)]
pub struct DenseAttentionWeights {
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    pub wo: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct DenseMlpWeights {
    pub up: DenseMatrix,
    /// `Some` for GLU, `None` for the plain two-layer MLP.
    pub gate: Option<DenseMatrix>,
    pub down: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct DenseLayerWeights {
    pub attention: DenseAttentionWeights,
    pub mlp: DenseMlpWeights,
}

#[derive(Debug, Clone)]
pub struct DenseModelWeights {
    pub layers: Vec<DenseLayerWeights>,
}

impl DenseModelWeights {
    pub fn matrix(&self, layer: usize, name: MatrixName) -> Option<&DenseMatrix> {
        let l = self.layers.get(layer)?;
        match name {
            MatrixName::Q => Some(&l.attention.wq),
            MatrixName::K => Some(&l.attention.wk),
            MatrixName::V => Some(&l.attention.wv),
            MatrixName::O => Some(&l.attention.wo),
            MatrixName::Up => Some(&l.mlp.up),
            MatrixName::Gate => l.mlp.gate.as_ref(),
            MatrixName::Down => Some(&l.mlp.down),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecomposedAttentionWeights {
    pub q: FactorPair,
    pub k: FactorPair,
    pub v: FactorPair,
    pub o: FactorPair,
}

#[derive(Debug, Clone)]
pub struct DecomposedMlpWeights {
    pub up: FactorPair,
    pub gate: Option<FactorPair>,
    pub down: FactorPair,
}

#[derive(Debug, Clone)]
pub struct DecomposedLayerWeights {
    pub attention: DecomposedAttentionWeights,
    pub mlp: DecomposedMlpWeights,
}

/// A decomposed model keeps the dense originals alongside the factor pairs
/// so oracles can compare against the exact weights that were decomposed.
#[derive(Debug, Clone)]
pub struct DecomposedModelWeights {
    pub layers: Vec<DecomposedLayerWeights>,
    pub dense: DenseModelWeights,
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x * scale
        })
        .collect();
    DenseMatrix::new(rows, cols, data).expect("gaussian samples are finite")
}

/// Seeded synthetic weights, scaled by `1/sqrt(d_in)` per projection so
/// activations stay O(1) through the block.
pub fn synth_model_weights<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<DenseModelWeights> {
    cfg.validate()?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for _ in 0..cfg.num_layers {
        let proj = |name: MatrixName, rng: &mut R| {
            let (d_in, d_out) = cfg.matrix_dims(name);
            gaussian_matrix(d_in, d_out, 1.0 / (d_in as f64).sqrt(), rng)
        };
        let attention = DenseAttentionWeights {
            wq: proj(MatrixName::Q, rng),
            wk: proj(MatrixName::K, rng),
            wv: proj(MatrixName::V, rng),
            wo: proj(MatrixName::O, rng),
        };
        let mlp = DenseMlpWeights {
            up: proj(MatrixName::Up, rng),
            gate: (cfg.mlp_variant == MlpVariant::Glu).then(|| proj(MatrixName::Gate, rng)),
            down: proj(MatrixName::Down, rng),
        };
        layers.push(DenseLayerWeights { attention, mlp });
    }
    Ok(DenseModelWeights { layers })
}

/// Seeded synthetic hidden states, standard normal entries.
pub fn synth_hidden<R: Rng>(tokens: usize, width: usize, rng: &mut R) -> DenseMatrix {
    gaussian_matrix(tokens, width, 1.0, rng)
}

/// Small fixture configs shared by test modules across the crate.
#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub(crate) fn toy_gqa_config() -> ModelConfig {
        ModelConfig {
            num_heads: 4,
            num_kv_heads: 2,
            head_dim: 8,
            intermediate_dim: 64,
            mlp_variant: MlpVariant::Glu,
            attention_variant: AttentionVariant::Gqa,
            use_rope: true,
            rope_base: 10_000.0,
            num_layers: 1,
        }
    }
}
