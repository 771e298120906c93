//! Sparse attention pattern: sliding local window plus interval-selected
//! global tokens.
//!
//! A pattern fixes, for a sequence of length `n`, which (query, key) pairs
//! an attention operator may touch. The local rule admits `|i - j| <=
//! window/2`; the global rule admits any pair where either index is a
//! global token (multiples of the interval, starting at 0). Global
//! attention is symmetric, so the allowed-pair predicate is symmetric and
//! every row contains at least the diagonal.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("sequence length must be >= 1, got {0}")]
    BadLength(usize),
    #[error("global interval must be >= 1, got {0}")]
    BadInterval(usize),
}

/// Allowed-pair structure for one sequence length, stored in CSR form
/// (per-row sorted column lists).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPattern {
    n: usize,
    window: usize,
    global_idx: Vec<usize>,
    row_offsets: Vec<usize>,
    cols: Vec<u32>,
}

/// Local window plus interval globals. `window` is the total band width in
/// tokens: each position reaches `window/2` tokens on each side.
pub fn build_pattern(n: usize, window: usize, interval: usize) -> Result<AttentionPattern, PatternError> {
    if n < 1 {
        return Err(PatternError::BadLength(n));
    }
    if interval < 1 {
        return Err(PatternError::BadInterval(interval));
    }
    let half = window / 2;
    let global_idx: Vec<usize> = (0..n).step_by(interval).collect();

    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut cols: Vec<u32> = Vec::new();
    row_offsets.push(0);
    for i in 0..n {
        if i % interval == 0 {
            // Global rows attend everywhere.
            cols.extend((0..n as u32).collect::<Vec<_>>());
        } else {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            for &g in &global_idx {
                if g < lo {
                    cols.push(g as u32);
                } else {
                    break;
                }
            }
            cols.extend((lo as u32)..=(hi as u32));
            for &g in &global_idx {
                if g > hi {
                    cols.push(g as u32);
                }
            }
        }
        row_offsets.push(cols.len());
    }
    Ok(AttentionPattern { n, window, global_idx, row_offsets, cols })
}

impl AttentionPattern {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn global_idx(&self) -> &[usize] {
        &self.global_idx
    }

    /// Sorted allowed columns for row `i`.
    pub fn row(&self, i: usize) -> &[u32] {
        &self.cols[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    /// Offset of row `i`'s entries in the flattened score layout.
    pub fn row_offset(&self, i: usize) -> usize {
        self.row_offsets[i]
    }

    /// Count of allowed (i, j) pairs.
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        let half = self.window / 2;
        i.abs_diff(j) <= half || self.global_idx.binary_search(&i).is_ok() || self.global_idx.binary_search(&j).is_ok()
    }

    /// Dense boolean mask, row-major. This is the oracle view of the
    /// pattern; runtime attention never materializes it.
    pub fn to_dense_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n * self.n];
        for i in 0..self.n {
            for &j in self.row(i) {
                mask[i * self.n + j as usize] = true;
            }
        }
        mask
    }

    /// Run-length text dump: one line per row, `row: a-b c-d ...`.
    pub fn to_runs(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let _ = write!(out, "{}:", i);
            let row = self.row(i);
            let mut k = 0;
            while k < row.len() {
                let start = row[k];
                let mut end = start;
                while k + 1 < row.len() && row[k + 1] == end + 1 {
                    k += 1;
                    end = row[k];
                }
                if start == end {
                    let _ = write!(out, " {}", start);
                } else {
                    let _ = write!(out, " {}-{}", start, end);
                }
                k += 1;
            }
            out.push('\n');
        }
        out
    }

    /// Plain PBM (P1) bitmap, allowed pairs as 1.
    pub fn to_pbm(&self) -> String {
        let mut out = format!("P1\n{} {}\n", self.n, self.n);
        for i in 0..self.n {
            let row = self.row(i);
            let mut bits = vec![b'0'; self.n];
            for &j in row {
                bits[j as usize] = b'1';
            }
            for (idx, b) in bits.iter().enumerate() {
                out.push(*b as char);
                if idx + 1 < self.n {
                    out.push(' ');
                }
            }
            out.push('\n');
        }
        out
    }
}
