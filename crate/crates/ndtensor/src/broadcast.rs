//! Trailing-aligned broadcasting: shapes are compared from the last axis
//! backwards and an extent of 1 stretches to match the other operand.

/// Result shape of broadcasting `a` against `b`, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` laid over `out`, with zero stride on stretched axes.
pub(crate) fn strides_over(src: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - src.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[offset + i] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the
/// broadcast output, in row-major order.
pub(crate) fn for_each_pair(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    if a == out && b == out {
        (0..numel).for_each(|i| f(i, i, i));
        return;
    }
    let sa = strides_over(a, out);
    let sb = strides_over(b, out);
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    loop {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // advance the odometer over the outer axes
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}
