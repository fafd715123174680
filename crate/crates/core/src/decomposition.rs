//! Low-rank factorization of weight matrices and plans that apply it across
//! a whole model.
//!
//! A projection `W` (`d_in x d_out`) is replaced by the pair
//! `down * up` with `down: d_in x l` and `up: l x d_out`, cutting parameters
//! from `d_in * d_out` to `(d_in + d_out) * l`. Factors come from the
//! truncated SVD with the singular weight split evenly between the two
//! sides.

use crate::error::{Error, Result};
use crate::linalg::{matmul, truncated_svd, DenseMatrix};
use crate::model::{
    DecomposedAttentionWeights, DecomposedLayerWeights, DecomposedMlpWeights,
    DecomposedModelWeights, DenseModelWeights, MatrixName, MlpVariant, ModelConfig,
};
use std::collections::BTreeMap;

/// A factored projection: `down` maps into the rank-`l` latent space, `up`
/// maps back out.
#[derive(Debug, Clone)]
pub struct FactorPair {
    pub down: DenseMatrix,
    pub up: DenseMatrix,
    pub rank: usize,
}

impl FactorPair {
    pub fn new(down: DenseMatrix, up: DenseMatrix) -> Result<Self> {
        if down.cols() != up.rows() {
            return Err(Error::Shape(format!(
                "factor ranks disagree: down is {}x{}, up is {}x{}",
                down.rows(),
                down.cols(),
                up.rows(),
                up.cols()
            )));
        }
        let rank = down.cols();
        if rank == 0 || rank > down.rows().min(up.cols()) {
            return Err(Error::RankOutOfRange {
                rank,
                rows: down.rows(),
                cols: up.cols(),
            });
        }
        Ok(Self { down, up, rank })
    }

    pub fn d_in(&self) -> usize {
        self.down.rows()
    }

    pub fn d_out(&self) -> usize {
        self.up.cols()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        matmul(&self.down, &self.up).expect("factor shapes agree by construction")
    }

    pub fn param_count(&self) -> usize {
        (self.d_in() + self.d_out()) * self.rank
    }
}

/// Best rank-`l` factorization of `w` in the Frobenius norm.
pub fn decompose_matrix(w: &DenseMatrix, l: usize) -> Result<FactorPair> {
    let svd = truncated_svd(w, l)?;
    FactorPair::new(svd.left_factor, svd.right_factor)
}

/// Rank implied by a parameter-reduction ratio: keeping `(1 - ratio)` of the
/// smaller dimension, rounded to nearest and clamped to at least 1.
pub fn rank_from_ratio(ratio: f64, d_in: usize, d_out: usize) -> Result<usize> {
    if !ratio.is_finite() || !(0.0..1.0).contains(&ratio) {
        return Err(Error::Parameter(format!(
            "reduction ratio must satisfy 0 <= ratio < 1, got {ratio}"
        )));
    }
    if d_in == 0 || d_out == 0 {
        return Err(Error::Parameter("matrix dimensions must be positive".into()));
    }
    let min_dim = d_in.min(d_out);
    let rank = ((1.0 - ratio) * min_dim as f64).round() as usize;
    Ok(rank.clamp(1, min_dim))
}

/// Per-layer, per-matrix rank assignments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecompositionPlan {
    layers: Vec<BTreeMap<MatrixName, usize>>,
}

impl DecompositionPlan {
    pub fn new(layers: Vec<BTreeMap<MatrixName, usize>>) -> Self {
        Self { layers }
    }

    /// The same rank map replicated across `num_layers` layers.
    pub fn uniform(num_layers: usize, ranks: BTreeMap<MatrixName, usize>) -> Self {
        Self {
            layers: vec![ranks; num_layers],
        }
    }

    /// Ranks derived from a single reduction ratio applied to every matrix
    /// the config carries.
    pub fn from_ratio(cfg: &ModelConfig, ratio: f64) -> Result<Self> {
        cfg.validate()?;
        let mut ranks = BTreeMap::new();
        for name in cfg.present_matrices() {
            let (d_in, d_out) = cfg.matrix_dims(name);
            ranks.insert(name, rank_from_ratio(ratio, d_in, d_out)?);
        }
        Ok(Self::uniform(cfg.num_layers, ranks))
    }

    /// Lossless plan: every rank equals the matrix's smaller dimension.
    pub fn lossless(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ranks = BTreeMap::new();
        for name in cfg.present_matrices() {
            let (d_in, d_out) = cfg.matrix_dims(name);
            ranks.insert(name, d_in.min(d_out));
        }
        Ok(Self::uniform(cfg.num_layers, ranks))
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn rank(&self, layer: usize, name: MatrixName) -> Result<usize> {
        self.layers
            .get(layer)
            .and_then(|m| m.get(&name))
            .copied()
            .ok_or_else(|| Error::Plan(format!("no rank for layer {layer} matrix '{name}'")))
    }

    /// Checks every present matrix has a rank and every rank fits its dims.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        if self.layers.len() != cfg.num_layers {
            return Err(Error::Plan(format!(
                "plan covers {} layers, config has {}",
                self.layers.len(),
                cfg.num_layers
            )));
        }
        for layer in 0..cfg.num_layers {
            for name in cfg.present_matrices() {
                let rank = self.rank(layer, name)?;
                let (d_in, d_out) = cfg.matrix_dims(name);
                if rank == 0 || rank > d_in.min(d_out) {
                    return Err(Error::RankOutOfRange {
                        rank,
                        rows: d_in,
                        cols: d_out,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Decomposes every matrix the model carries, one SVD per plan entry.
/// The dense originals ride along in the result for oracle comparisons.
pub fn decompose_model(
    cfg: &ModelConfig,
    weights: &DenseModelWeights,
    plan: &DecompositionPlan,
) -> Result<DecomposedModelWeights> {
    plan.validate(cfg)?;
    if weights.layers.len() != cfg.num_layers {
        return Err(Error::Plan(format!(
            "weights cover {} layers, config has {}",
            weights.layers.len(),
            cfg.num_layers
        )));
    }
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (idx, layer) in weights.layers.iter().enumerate() {
        let factor = |name: MatrixName, w: &DenseMatrix| -> Result<FactorPair> {
            decompose_matrix(w, plan.rank(idx, name)?)
        };
        let attention = DecomposedAttentionWeights {
            q: factor(MatrixName::Q, &layer.attention.wq)?,
            k: factor(MatrixName::K, &layer.attention.wk)?,
            v: factor(MatrixName::V, &layer.attention.wv)?,
            o: factor(MatrixName::O, &layer.attention.wo)?,
        };
        let gate = match (&layer.mlp.gate, cfg.mlp_variant) {
            (Some(g), MlpVariant::Glu) => Some(factor(MatrixName::Gate, g)?),
            (None, MlpVariant::NonGlu) => None,
            (Some(_), MlpVariant::NonGlu) => {
                return Err(Error::Plan("gate weights present in a non-glu model".into()))
            }
            (None, MlpVariant::Glu) => {
                return Err(Error::Plan("glu model is missing gate weights".into()))
            }
        };
        let mlp = DecomposedMlpWeights {
            up: factor(MatrixName::Up, &layer.mlp.up)?,
            gate,
            down: factor(MatrixName::Down, &layer.mlp.down)?,
        };
        layers.push(DecomposedLayerWeights { attention, mlp });
    }
    Ok(DecomposedModelWeights {
        layers,
        dense: weights.clone(),
    })
}

/// Collapses a conformable chain of matrices into a single `FactorPair`.
///
/// The cut sits at the smallest inner dimension of the chain (leftmost on
/// ties): everything left of the cut multiplies into `down`, everything
/// right of it into `up`. The product is preserved exactly up to float
/// reassociation and the pair's rank is that minimal inner dimension.
pub fn absorb_factor_chain(chain: &[DenseMatrix]) -> Result<FactorPair> {
    if chain.len() < 2 {
        return Err(Error::Parameter(format!(
            "factor chain needs at least 2 matrices, got {}",
            chain.len()
        )));
    }
    for (i, pair) in chain.windows(2).enumerate() {
        if pair[0].cols() != pair[1].rows() {
            return Err(Error::Shape(format!(
                "chain link {i}: {}x{} cannot feed {}x{}",
                pair[0].rows(),
                pair[0].cols(),
                pair[1].rows(),
                pair[1].cols()
            )));
        }
    }
    // Inner dimension i sits between chain[i] and chain[i+1].
    let inner_dims: Vec<usize> = chain[..chain.len() - 1].iter().map(|m| m.cols()).collect();
    let cut = inner_dims
        .iter()
        .enumerate()
        .min_by_key(|(_, &d)| d)
        .map(|(i, _)| i)
        .expect("chain has at least one inner dim");

    let fold = |mats: &[DenseMatrix]| -> Result<DenseMatrix> {
        let mut acc = mats[0].clone();
        for m in &mats[1..] {
            acc = matmul(&acc, m)?;
        }
        Ok(acc)
    };
    let down = fold(&chain[..=cut])?;
    let up = fold(&chain[cut + 1..])?;
    FactorPair::new(down, up)
}
