//! Rotary position embedding over interleaved coordinate pairs.

use crate::linalg::DenseMatrix;
use crate::{Error, Result};

/// The rotation kernel over a raw row-major buffer.
///
/// Shared by [`apply_rope`] and the paged-cache replay path so the two
/// produce bit-identical rotations. Callers validate shapes; this only
/// assumes `data.len() == positions.len() * row_width` and
/// `row_width % head_dim == 0`.
pub(crate) fn rope_rows(
    data: &mut [f64],
    row_width: usize,
    head_dim: usize,
    positions: &[usize],
    base: f64,
) {
    let heads = row_width / head_dim;
    // Per-pair inverse frequencies are position-independent; hoist them.
    let inv_freq: Vec<f64> = (0..head_dim / 2)
        .map(|j| base.powf(-((2 * j) as f64) / head_dim as f64))
        .collect();

    for (i, &position) in positions.iter().enumerate() {
        let pos = position as f64;
        let row = &mut data[i * row_width..(i + 1) * row_width];
        for h in 0..heads {
            let off = h * head_dim;
            for (j, &f) in inv_freq.iter().enumerate() {
                let angle = pos * f;
                let (sin, cos) = angle.sin_cos();
                let a = row[off + 2 * j];
                let b = row[off + 2 * j + 1];
                row[off + 2 * j] = a * cos - b * sin;
                row[off + 2 * j + 1] = a * sin + b * cos;
            }
        }
    }
}

pub(crate) fn check_rope_params(head_dim: usize, base: f64) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "rope needs a positive even head_dim, got {head_dim}"
        )));
    }
    if !(base.is_finite() && base > 0.0) {
        return Err(Error::Parameter(format!(
            "rope base must be finite and positive, got {base}"
        )));
    }
    Ok(())
}

/// Rotate each head-sized slice of every row in place.
///
/// `mat` is `tokens x (n_heads_local * head_dim)`; row `i` belongs to the
/// token at absolute position `positions[i]`. Within one head, coordinates
/// `(2j, 2j+1)` form a plane rotated by `positions[i] * base^(-2j/head_dim)`
/// radians. Position 0 is the identity rotation, a property the replay path
/// relies on to leave padding rows untouched.
pub fn apply_rope(
    mat: &mut DenseMatrix,
    head_dim: usize,
    positions: &[usize],
    base: f64,
) -> Result<()> {
    check_rope_params(head_dim, base)?;
    if !mat.cols().is_multiple_of(head_dim) {
        return Err(Error::Shape(format!(
            "rope input has {} columns, not a multiple of head_dim {}",
            mat.cols(),
            head_dim
        )));
    }
    if positions.len() != mat.rows() {
        return Err(Error::Shape(format!(
            "rope got {} positions for {} rows",
            positions.len(),
            mat.rows()
        )));
    }
    let width = mat.cols();
    rope_rows(mat.data_mut(), width, head_dim, positions, base);
    Ok(())
}
