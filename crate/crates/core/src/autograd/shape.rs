//! Index arithmetic for broadcasting, permutation and axis slicing.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    ensure!(a.len() == b.len(), "broadcast needs equal ranks, got {:?} and {:?}", a, b);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            ensure!(x == y || x == 1 || y == 1, "shapes {:?} and {:?} do not broadcast", a, b);
            Ok(x.max(y))
        })
        .collect()
}

/// Row-major strides of `shape` viewed inside `out`, with 0 on broadcast axes.
pub(crate) fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == out[d] && out[d] != 1 { s } else { 0 };
        s *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
pub(crate) fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let outer: usize = out[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    let mut o = 0;
    for _ in 0..outer {
        let base_a: usize = idx.iter().zip(sa).map(|(i, s)| i * s).sum();
        let base_b: usize = idx.iter().zip(sb).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            f(o, base_a + j * ia, base_b + j * ib);
            o += 1;
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// `(outer, len, inner)` split of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

/// For each output element of `x.permute(perm)`, the flat input index.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut res = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        res.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_channel_gate() {
        let out = broadcast_shape(&[2, 3, 4, 5], &[2, 3, 1, 1]).unwrap();
        assert_eq!(out, vec![2, 3, 4, 5]);
        assert!(broadcast_shape(&[2, 3], &[3, 3]).is_err());
        let sb = bcast_strides(&[2, 3, 1, 1], &out);
        assert_eq!(sb, vec![3, 1, 0, 0]);
        let sa = bcast_strides(&out, &out);
        let mut seen = 0;
        for_each_bcast(&out, &sa, &sb, |o, a, b| {
            assert_eq!(o, a);
            assert_eq!(b, o / 20);
            seen += 1;
        });
        assert_eq!(seen, 120);
    }

    #[test]
    fn permute_nchw_to_nhwc() {
        let idx = permute_index(&[1, 2, 2, 3], &[0, 2, 3, 1]);
        // out[0, y, x, c] = in[0, c, y, x]
        assert_eq!(idx[0], 0);
        assert_eq!(idx[1], 6);
        assert_eq!(idx[2], 1);
        assert_eq!(idx.len(), 12);
    }
}
