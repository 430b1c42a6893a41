//! Shape algebra shared by the tensor engine.

use crate::error::{Error, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// NumPy-style trailing-dimension broadcast: axes align from the right,
/// each pair must be equal or contain a 1. Anything else is an error.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        };
    }
    Ok(out)
}

/// True if `shape` can broadcast to `target` (right-aligned, 1-expansion only).
pub fn broadcasts_to(shape: &[usize], target: &[usize]) -> bool {
    if shape.len() > target.len() {
        return false;
    }
    let off = target.len() - shape.len();
    shape
        .iter()
        .enumerate()
        .all(|(i, &d)| d == target[off + i] || d == 1)
}

/// Strides of `shape` viewed as `target` (0 on broadcast axes).
/// Caller must have checked `broadcasts_to`.
pub fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = target.len() - shape.len();
    let mut out = vec![0; target.len()];
    for i in 0..shape.len() {
        out[off + i] = if shape[i] == 1 && target[off + i] != 1 { 0 } else { own[i] };
    }
    out
}

/// Splits a matmul operand shape into (batch dims, rows, cols).
pub fn split_matrix(op: &'static str, shape: &[usize]) -> Result<(Vec<usize>, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::BadShape {
            op,
            detail: format!("expected rank >= 2, got shape {shape:?}"),
        });
    }
    let (batch, mat) = shape.split_at(shape.len() - 2);
    Ok((batch.to_vec(), mat[0], mat[1]))
}

pub fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::InvalidAxis { axis, rank });
    }
    Ok(())
}
