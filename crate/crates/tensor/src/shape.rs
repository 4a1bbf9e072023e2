//! Shape arithmetic shared by the forward and backward kernels.

use crate::error::{dim_err, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    let mut acc = 1;
    for (s, d) in out.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    out
}

/// Numpy-style broadcast of two shapes (right aligned, size-1 stretches).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err(format!("shapes {a:?} and {b:?} are not broadcastable")),
        };
    }
    Ok(out)
}

/// For every element of `out` (row-major), the flat offset of the source
/// element it reads when `src` is broadcast to `out`.
pub fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    debug_assert!(src.len() <= rank);
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        let o = rank - src.len() + i;
        eff[o] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    strided_offsets(out, &eff)
}

/// Row-major walk over `shape`, yielding `Σ index[d]·strides[d]` per element.
pub fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let total = numel(shape);
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let rank = shape.len();
    if rank == 0 {
        out.push(0);
        return out;
    }
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(base + j * inner_stride);
        }
        // advance the outer counter
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Resolves a possibly negative axis.
pub fn resolve_axis(axis: isize, rank: usize) -> Result<usize> {
    let r = rank as isize;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a >= r {
        return dim_err(format!("axis {axis} out of range for rank {rank}"));
    }
    Ok(a as usize)
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
pub fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes(&[4, 1, 3], &[2, 1]).unwrap(), vec![4, 2, 3]);
        assert!(broadcast_shapes(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn offsets_for_row_vector() {
        assert_eq!(broadcast_offsets(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_offsets(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn strided_walk_matches_transpose() {
        // walking a [3,2] view of a row-major [2,3] buffer
        assert_eq!(strided_offsets(&[3, 2], &[1, 3]), vec![0, 3, 1, 4, 2, 5]);
    }
}
