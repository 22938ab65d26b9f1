//! Train/test splits for fusion experiments.
//!
//! Both splits preserve row order within each side, are disjoint, and
//! together cover every input row.

use super::DataSet;
use crate::error::{CoreError, Result};

/// Case-generalization split: every row of the non-target cases trains, and
/// the target case contributes its first ceil(n/2) rows (in recorded order)
/// to training; the remaining floor(n/2) rows are the test set.
pub fn split_leave_half_out(
    data: &DataSet,
    case_col: &str,
    target_case: f64,
) -> Result<(DataSet, DataSet)> {
    let col = data.column_index(case_col).ok_or_else(|| CoreError::Split {
        message: format!("case column '{case_col}' not found"),
    })?;
    let target_rows: Vec<usize> = (0..data.n_rows())
        .filter(|&r| data.value(r, col) == target_case)
        .collect();
    if target_rows.is_empty() {
        return Err(CoreError::Split {
            message: format!("no rows with {case_col} == {target_case}"),
        });
    }
    if target_rows.len() == data.n_rows() {
        return Err(CoreError::Split {
            message: "every row belongs to the target case; nothing left to train on".into(),
        });
    }
    let keep = target_rows.len().div_ceil(2);
    let test_set: std::collections::BTreeSet<usize> =
        target_rows[keep..].iter().copied().collect();
    let mut train = Vec::with_capacity(data.n_rows() - test_set.len());
    let mut test = Vec::with_capacity(test_set.len());
    for r in 0..data.n_rows() {
        if test_set.contains(&r) {
            test.push(r);
        } else {
            train.push(r);
        }
    }
    Ok((data.take_rows(&train), data.take_rows(&test)))
}

/// Splits a table into contiguous Mach blocks (a new block starts wherever
/// |dMa| exceeds `jump`) and assigns blocks cyclically: in every run of
/// `train_parts + test_parts` consecutive blocks, the last `test_parts` go to
/// test. Needs at least one full cycle of blocks.
pub fn split_mach_blocks(
    data: &DataSet,
    mach_col: &str,
    jump: f64,
    train_parts: usize,
    test_parts: usize,
) -> Result<(DataSet, DataSet)> {
    if train_parts == 0 || test_parts == 0 {
        return Err(CoreError::Split {
            message: "split ratio parts must both be positive".into(),
        });
    }
    let col = data.column_index(mach_col).ok_or_else(|| CoreError::Split {
        message: format!("Mach column '{mach_col}' not found"),
    })?;
    let mach = data.column(col);
    let mut block_of = Vec::with_capacity(data.n_rows());
    let mut block = 0usize;
    for (r, m) in mach.iter().enumerate() {
        if r > 0 && (m - mach[r - 1]).abs() > jump {
            block += 1;
        }
        block_of.push(block);
    }
    let n_blocks = block + 1;
    let cycle = train_parts + test_parts;
    if n_blocks < cycle {
        return Err(CoreError::Split {
            message: format!(
                "{n_blocks} Mach block(s) found but the {train_parts}:{test_parts} assignment needs at least {cycle}"
            ),
        });
    }
    let is_test = |b: usize| b % cycle >= train_parts;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (r, &b) in block_of.iter().enumerate() {
        if is_test(b) {
            test.push(r);
        } else {
            train.push(r);
        }
    }
    Ok((data.take_rows(&train), data.take_rows(&test)))
}
