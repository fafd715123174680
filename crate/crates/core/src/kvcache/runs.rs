//! Preparation-stage bookkeeping: the contiguous-run scan and the remapping
//! index list.
//!
//! Block allocation order is free-list order, so a sequence's physical
//! blocks are scattered after enough churn. The scan partitions the logical
//! block list into maximal physically adjacent runs so the replay stage can
//! copy each run with a single contiguous copy; the remapping index list is
//! the block table over the packed buffer that results.

use crate::error::{Error, Result};

/// One maximal run of physically adjacent blocks, in logical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRun {
    /// First physical block of the run.
    pub physical_start: usize,
    /// Number of blocks in the run.
    pub len: usize,
    /// Logical index of the run's first block, which is also its block
    /// offset in the packed per-sequence buffer.
    pub buffer_offset: usize,
}

/// Partition a logical-order physical block list into maximal contiguous
/// runs: a new run starts exactly where `physical[i + 1] != physical[i] + 1`.
///
/// The result is the minimal order-preserving partition into contiguous
/// segments, so the run count is `1 + #{i : physical[i+1] != physical[i]+1}`
/// and each run can be copied in one shot.
pub fn scan_contiguous_runs(physical: &[usize]) -> Vec<BlockRun> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < physical.len() {
        let start = i;
        while i + 1 < physical.len() && physical[i + 1] == physical[i] + 1 {
            i += 1;
        }
        runs.push(BlockRun {
            physical_start: physical[start],
            len: i - start + 1,
            buffer_offset: start,
        });
        i += 1;
    }
    runs
}

/// Block table over the packed replay buffer for a batch of sequences.
///
/// Sequences are laid out back to back, so `sequence(s)[j]` names the buffer
/// block holding sequence `s`'s logical block `j` and the concatenation of
/// all entries is a bijection onto `0..total_blocks`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemappingIndexList {
    per_sequence: Vec<Vec<usize>>,
    total_blocks: usize,
}

impl RemappingIndexList {
    pub fn num_sequences(&self) -> usize {
        self.per_sequence.len()
    }

    pub fn total_blocks(&self) -> usize {
        self.total_blocks
    }

    /// Buffer block indices of one sequence, in logical order.
    pub fn sequence(&self, s: usize) -> &[usize] {
        &self.per_sequence[s]
    }
}

/// Derive the remapping index list from each sequence's run partition,
/// packing sequences back to back into a buffer of `capacity_blocks`.
pub fn build_remapping_index(
    batch: &[Vec<BlockRun>],
    capacity_blocks: usize,
) -> Result<RemappingIndexList> {
    let mut per_sequence = Vec::with_capacity(batch.len());
    let mut next = 0usize;
    for (s, runs) in batch.iter().enumerate() {
        let mut blocks = 0;
        for run in runs {
            if run.buffer_offset != blocks || run.len == 0 {
                return Err(Error::Plan(format!(
                    "sequence {s}: runs do not tile its logical blocks"
                )));
            }
            blocks += run.len;
        }
        per_sequence.push((next..next + blocks).collect());
        next += blocks;
    }
    if next > capacity_blocks {
        return Err(Error::Capacity(format!(
            "batch needs {next} buffer blocks, capacity is {capacity_blocks}"
        )));
    }
    Ok(RemappingIndexList { per_sequence, total_blocks: next })
}
