//! Truncated singular value decomposition via one-sided Jacobi rotations.
//!
//! One-sided Jacobi orthogonalizes the columns of the input by plane
//! rotations. It is slow next to blocked bidiagonalization but fully
//! deterministic (fixed sweep order, no pivot heuristics) and accurate to
//! near machine precision, which is what the verification suites need.

use super::{matmul, DenseMatrix};
use crate::error::{Error, Result};

/// Rank-`k` factorization of `w` as `left_factor * right_factor`.
///
/// The singular weight is split evenly: column `i` of `left_factor` is
/// `u_i * sqrt(sigma_i)` and row `i` of `right_factor` is
/// `sqrt(sigma_i) * v_i^T`, so matching column and row norms are both
/// `sqrt(sigma_i)`.
#[derive(Debug, Clone)]
pub struct TruncatedSvdResult {
    /// `rows x k`.
    pub left_factor: DenseMatrix,
    /// `k x cols`.
    pub right_factor: DenseMatrix,
    /// The `k` largest singular values, non-increasing.
    pub retained_singular_values: Vec<f64>,
    /// Sum of the squared discarded singular values, i.e. the squared
    /// Frobenius error of the rank-`k` reconstruction.
    pub discarded_energy: f64,
}

impl TruncatedSvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        matmul(&self.left_factor, &self.right_factor).expect("factor shapes agree")
    }
}

const JACOBI_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 100;

/// Computes the best rank-`k` approximation of `w` in the Frobenius norm.
///
/// `k` must satisfy `1 <= k <= min(rows, cols)`. Ties among equal singular
/// values make the individual factors non-unique; only the product and the
/// singular values are contractual.
pub fn truncated_svd(w: &DenseMatrix, k: usize) -> Result<TruncatedSvdResult> {
    let min_dim = w.rows().min(w.cols());
    if k == 0 || k > min_dim {
        return Err(Error::RankOutOfRange {
            rank: k,
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    if let Some(idx) = w.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "svd input element {idx} is {}",
            w.data()[idx]
        )));
    }

    // Work on a tall copy so the rotated columns are the short dimension.
    let transposed = w.rows() < w.cols();
    let mut g = if transposed { w.transpose() } else { w.clone() };
    let n = g.cols();
    let mut v = DenseMatrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n.saturating_sub(1) {
            for j in i + 1..n {
                let (alpha, beta, gamma) = column_moments(&g, i, j);
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut g, i, j, c, s);
                rotate_columns(&mut v, i, j, c, s);
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }

    // Singular values are the column norms of the orthogonalized G.
    let mut order: Vec<usize> = (0..n).collect();
    let sigmas: Vec<f64> = (0..n).map(|j| column_norm(&g, j)).collect();
    order.sort_by(|&a, &b| sigmas[b].partial_cmp(&sigmas[a]).unwrap());

    let retained: Vec<f64> = order[..k].iter().map(|&j| sigmas[j]).collect();
    let discarded_energy = order[k..].iter().map(|&j| sigmas[j] * sigmas[j]).sum();

    // Assemble the evenly weighted factors, undoing the transpose if needed.
    // For W = U S V^T: left = U sqrt(S), right = sqrt(S) V^T. The columns of
    // G are u_j * sigma_j, so u_j * sqrt(sigma_j) = g_j / sqrt(sigma_j).
    let (rows, cols) = (w.rows(), w.cols());
    let mut left = DenseMatrix::zeros(rows, k);
    let mut right = DenseMatrix::zeros(k, cols);
    for (slot, &j) in order[..k].iter().enumerate() {
        let sigma = sigmas[j];
        if sigma <= 0.0 {
            continue;
        }
        let root = sigma.sqrt();
        if transposed {
            // W^T = G-side, so W = V S U^T: left columns come from V.
            for r in 0..rows {
                left.set(r, slot, v.get(r, j) * root);
            }
            for c in 0..cols {
                right.set(slot, c, g.get(c, j) / root);
            }
        } else {
            for r in 0..rows {
                left.set(r, slot, g.get(r, j) / root);
            }
            for c in 0..cols {
                right.set(slot, c, v.get(c, j) * root);
            }
        }
    }

    Ok(TruncatedSvdResult {
        left_factor: left,
        right_factor: right,
        retained_singular_values: retained,
        discarded_energy,
    })
}

fn column_moments(g: &DenseMatrix, i: usize, j: usize) -> (f64, f64, f64) {
    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
    for r in 0..g.rows() {
        let gi = g.get(r, i);
        let gj = g.get(r, j);
        alpha += gi * gi;
        beta += gj * gj;
        gamma += gi * gj;
    }
    (alpha, beta, gamma)
}

fn column_norm(g: &DenseMatrix, j: usize) -> f64 {
    (0..g.rows())
        .map(|r| {
            let x = g.get(r, j);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

fn rotate_columns(m: &mut DenseMatrix, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..m.rows() {
        let mi = m.get(r, i);
        let mj = m.get(r, j);
        m.set(r, i, c * mi - s * mj);
        m.set(r, j, s * mi + c * mj);
    }
}
