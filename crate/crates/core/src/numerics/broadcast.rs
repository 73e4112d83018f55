//! Trailing-dimension broadcasting.

use crate::error::{FfmError, Result};

/// Output shape of broadcasting `a` against `b`, aligning trailing dims.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => {
                return Err(FfmError::Dimension(format!(
                    "cannot broadcast {a:?} with {b:?} (dims {x} and {y})"
                )))
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Strides of `src` expressed on the axes of `out`, zero on broadcast axes.
fn aligned_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for k in 0..src.len() {
        let dim = src[src.len() - 1 - k];
        if dim != 1 {
            strides[rank - 1 - k] = acc;
        }
        acc *= dim;
    }
    strides
}

/// Calls `f(i, ia, ib)` for every flat output index `i` in order, where `ia`
/// and `ib` index buffers of shapes `a` and `b` broadcast onto `out`.
pub fn for_each_pair(a: &[usize], b: &[usize], out: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let (sa, sb) = (aligned_strides(a, out), aligned_strides(b, out));
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let (mut ba, mut bb) = (0usize, 0usize);
    let mut i = 0;
    while i < total {
        for j in 0..inner {
            f(i + j, ba + j * ia_step, bb + j * ib_step);
        }
        i += inner;
        for axis in (0..rank - 1).rev() {
            counter[axis] += 1;
            ba += sa[axis];
            bb += sb[axis];
            if counter[axis] < out[axis] {
                break;
            }
            ba -= sa[axis] * counter[axis];
            bb -= sb[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
}

/// For every flat index of `out`, the flat index into a `src`-shaped buffer
/// that broadcasts onto it. `None` when the shapes are identical.
pub fn index_map(src: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if src == out {
        return None;
    }
    let mut map = Vec::with_capacity(out.iter().product());
    for_each_pair(src, src, out, |_, ia, _| map.push(ia));
    Some(map)
}
