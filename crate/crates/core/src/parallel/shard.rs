//! Weight partitioning schemes for the simulated tensor-parallel group.
//!
//! All schemes reject dimensions that do not divide evenly; there is no
//! padding anywhere in the simulator.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardScheme {
    /// Concatenate the output dimensions of a matrix set, then split the
    /// concatenation into `p` contiguous equal ranges. Ranges may span
    /// source-matrix boundaries.
    ConcatSplit,
    /// Split one matrix's output dimension into `p` equal column shards.
    ColumnShard,
    /// Split one matrix's input dimension into `p` equal row shards.
    RowParallel,
    /// Every worker holds the full matrix.
    Replicated,
}

/// Which slice of the partitioned dimension each worker owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardSpec {
    pub scheme: ShardScheme,
    pub world_size: usize,
    /// Owner range per worker, in the partitioned dimension.
    pub ranges: Vec<Range<usize>>,
    /// Output widths of the source matrices (`ConcatSplit` keeps one entry
    /// per source so reassembly can split the concatenation back apart).
    pub source_cols: Vec<usize>,
}

/// A matrix (or matrix set) distributed across the group. Shard `r` is the
/// slice worker `r` owns locally.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedMatrix {
    pub spec: ShardSpec,
    shards: Vec<DenseMatrix>,
}

impl ShardedMatrix {
    pub fn shard(&self, rank: usize) -> &DenseMatrix {
        &self.shards[rank]
    }

    pub fn world_size(&self) -> usize {
        self.shards.len()
    }

    /// Undoes the partitioning, reproducing the source matrices bit for bit.
    pub fn reassemble(&self) -> Result<Vec<DenseMatrix>> {
        let refs: Vec<&DenseMatrix> = self.shards.iter().collect();
        match self.spec.scheme {
            ShardScheme::ConcatSplit => {
                let full = DenseMatrix::hstack(&refs)?;
                let mut out = Vec::with_capacity(self.spec.source_cols.len());
                let mut offset = 0;
                for &w in &self.spec.source_cols {
                    out.push(full.slice_cols(offset..offset + w)?);
                    offset += w;
                }
                Ok(out)
            }
            ShardScheme::ColumnShard => Ok(vec![DenseMatrix::hstack(&refs)?]),
            ShardScheme::RowParallel => Ok(vec![DenseMatrix::vstack(&refs)?]),
            ShardScheme::Replicated => Ok(vec![self.shards[0].clone()]),
        }
    }
}

fn check_world_size(p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::Partition("world size must be at least 1".into()));
    }
    Ok(())
}

fn even_ranges(total: usize, p: usize, what: &str) -> Result<Vec<Range<usize>>> {
    if !total.is_multiple_of(p) {
        return Err(Error::Partition(format!(
            "{what} of {total} does not divide evenly across {p} workers"
        )));
    }
    let width = total / p;
    Ok((0..p).map(|r| r * width..(r + 1) * width).collect())
}

/// Concatenates the matrices' output dims and splits the concatenation into
/// `p` contiguous equal ranges. All inputs must share an input dimension.
pub fn partition_concat_split(mats: &[&DenseMatrix], p: usize) -> Result<ShardedMatrix> {
    check_world_size(p)?;
    if mats.is_empty() {
        return Err(Error::Partition("concat-split of an empty matrix set".into()));
    }
    let concat = DenseMatrix::hstack(mats).map_err(|e| Error::Partition(e.to_string()))?;
    let ranges = even_ranges(concat.cols(), p, "concatenated output dim")?;
    let shards = ranges
        .iter()
        .map(|r| concat.slice_cols(r.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShardedMatrix {
        spec: ShardSpec {
            scheme: ShardScheme::ConcatSplit,
            world_size: p,
            ranges,
            source_cols: mats.iter().map(|m| m.cols()).collect(),
        },
        shards,
    })
}

/// Splits one matrix's columns into `p` equal shards.
pub fn partition_column_shard(mat: &DenseMatrix, p: usize) -> Result<ShardedMatrix> {
    check_world_size(p)?;
    let ranges = even_ranges(mat.cols(), p, "output dim")?;
    let shards = ranges
        .iter()
        .map(|r| mat.slice_cols(r.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShardedMatrix {
        spec: ShardSpec {
            scheme: ShardScheme::ColumnShard,
            world_size: p,
            ranges,
            source_cols: vec![mat.cols()],
        },
        shards,
    })
}

/// Splits one matrix's rows into `p` equal shards.
pub fn partition_row_parallel(mat: &DenseMatrix, p: usize) -> Result<ShardedMatrix> {
    check_world_size(p)?;
    let ranges = even_ranges(mat.rows(), p, "input dim")?;
    let shards = ranges
        .iter()
        .map(|r| mat.slice_rows(r.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShardedMatrix {
        spec: ShardSpec {
            scheme: ShardScheme::RowParallel,
            world_size: p,
            ranges,
            source_cols: vec![mat.cols()],
        },
        shards,
    })
}

/// Full copy on every worker.
pub fn replicate(mat: &DenseMatrix, p: usize) -> Result<ShardedMatrix> {
    check_world_size(p)?;
    Ok(ShardedMatrix {
        spec: ShardSpec {
            scheme: ShardScheme::Replicated,
            world_size: p,
            ranges: vec![0..mat.cols(); p],
            source_cols: vec![mat.cols()],
        },
        shards: vec![mat.clone(); p],
    })
}
