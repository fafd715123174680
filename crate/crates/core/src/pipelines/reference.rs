//! Sequential attention reference used by every pipeline and by the tests.
//!
//! All three pipeline modes and the paged-cache replay funnel their per-head
//! attention through [`attention_single_head`], so numerical comparisons
//! between modes exercise the projection and communication rearrangements,
//! not two different softmax implementations.

use crate::linalg::DenseMatrix;
use crate::{Error, Result};

/// Score-and-mix kernel for one query row against `rows` buffered keys.
///
/// `k` and `v` are row-major buffers of `row_width`-wide rows; the head
/// occupies columns `col_offset .. col_offset + q.len()` of each row.
/// `scores` is caller-owned scratch with at least `rows` slots; `out` is
/// overwritten. The batch reference and the paged-cache decode path both
/// funnel through this kernel, so their attention is bit-identical.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_head_kernel(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    row_width: usize,
    col_offset: usize,
    rows: usize,
    scores: &mut [f64],
    out: &mut [f64],
    flops: &mut u64,
) {
    let d = q.len();
    let scale = 1.0 / (d as f64).sqrt();
    for (j, score) in scores[..rows].iter_mut().enumerate() {
        let krow = &k[j * row_width + col_offset..j * row_width + col_offset + d];
        *score = q.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
    }
    let max = scores[..rows].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for score in scores[..rows].iter_mut() {
        *score = (*score - max).exp();
        denom += *score;
    }
    out.fill(0.0);
    for (j, &w) in scores[..rows].iter().enumerate() {
        let weight = w / denom;
        let vrow = &v[j * row_width + col_offset..j * row_width + col_offset + d];
        for (o, &vj) in out.iter_mut().zip(vrow) {
            *o += weight * vj;
        }
    }
    *flops += 4 * d as u64 * rows as u64;
}

/// Scaled-dot-product attention for one head.
///
/// `q` is `t_q x d`, `k` and `v` are `t_k x d`. With `causal` set, query row
/// `i` attends to key rows `0..=i + (t_k - t_q)`: the query block is aligned
/// to the *end* of the key sequence, which is the decode case when `t_q = 1`
/// and the prefill case when `t_q = t_k`. Softmax subtracts the row maximum
/// before exponentiating.
///
/// `flops` is incremented by `4 * d` per computed (query, key) pair: two
/// fused multiply-adds for the score dot product and two for the value
/// accumulation. Softmax scalar work is not counted.
pub fn attention_single_head(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    causal: bool,
    flops: &mut u64,
) -> Result<DenseMatrix> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d {
        return Err(Error::Shape(format!(
            "attention head dims disagree: q {}, k {}, v {}",
            d,
            k.cols(),
            v.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention k has {} rows but v has {}",
            k.rows(),
            v.rows()
        )));
    }
    let t_q = q.rows();
    let t_k = k.rows();
    if causal && t_k < t_q {
        return Err(Error::Shape(format!(
            "causal attention needs at least as many keys as queries, got {t_k} keys for {t_q} queries"
        )));
    }
    if d == 0 {
        return Err(Error::Shape("attention head dim must be positive".into()));
    }

    let offset = t_k - t_q;
    let mut out = DenseMatrix::zeros(t_q, d);
    let mut scores = vec![0.0; t_k];
    for i in 0..t_q {
        let limit = if causal { i + offset + 1 } else { t_k };
        attention_head_kernel(
            q.row(i),
            k.data(),
            v.data(),
            d,
            0,
            limit,
            &mut scores,
            out.row_mut(i),
            flops,
        );
    }
    Ok(out)
}

/// Multi-head attention over per-head slices, on one machine, no sharding.
///
/// `q_heads` has one `t_q x d` matrix per query head; `k_heads` / `v_heads`
/// have one per KV head. Query head `g` reads KV head
/// `g * num_kv_heads / num_heads` (consecutive query heads share a KV head).
/// Returns one output matrix per query head.
pub fn self_attention_reference(
    q_heads: &[DenseMatrix],
    k_heads: &[DenseMatrix],
    v_heads: &[DenseMatrix],
    causal: bool,
) -> Result<Vec<DenseMatrix>> {
    let h = q_heads.len();
    let kv = k_heads.len();
    if h == 0 || kv == 0 {
        return Err(Error::Shape("attention needs at least one head".into()));
    }
    if v_heads.len() != kv {
        return Err(Error::Shape(format!(
            "{} k heads but {} v heads",
            kv,
            v_heads.len()
        )));
    }
    if !h.is_multiple_of(kv) {
        return Err(Error::Shape(format!(
            "{h} query heads not divisible by {kv} kv heads"
        )));
    }
    let mut ignored = 0u64;
    (0..h)
        .map(|g| {
            let kvi = g * kv / h;
            attention_single_head(&q_heads[g], &k_heads[kvi], &v_heads[kvi], causal, &mut ignored)
        })
        .collect()
}
