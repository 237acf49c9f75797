//! Shape arithmetic shared by plaintext tensors and ciphertext payloads.
//!
//! Everything here is generic over the element type so that the shadow and
//! fixed-point backends lay out slots exactly the way the plaintext kernels do.

use super::TensorError;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Numpy-style broadcast of two shapes, aligned on the trailing axis.
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

/// Row-major strides of `shape` expressed in the index space of `out`,
/// with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Applies `f` elementwise over the broadcast of `a` and `b`.
pub fn broadcast_zip<T: Copy, U>(
    op: &'static str,
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    mut f: impl FnMut(T, T) -> U,
) -> Result<(Vec<usize>, Vec<U>), TensorError> {
    if a_shape == b_shape {
        return Ok((a_shape.to_vec(), a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()));
    }
    let out_shape = broadcast_shape(a_shape, b_shape).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a_shape.to_vec(),
        rhs: b_shape.to_vec(),
    })?;
    let n = numel(&out_shape);
    let sa = broadcast_strides(a_shape, &out_shape);
    let sb = broadcast_strides(b_shape, &out_shape);
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok((out_shape, out));
    }
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(a[ia], b[ib]));
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok((out_shape, out))
}

/// Sums `grad` (shaped `from`) down to `to`, undoing a broadcast.
pub fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let strides = broadcast_strides(to, from);
    let mut out = vec![0.0; numel(to)];
    let rank = from.len();
    let mut idx = vec![0usize; rank];
    let mut it = 0usize;
    for &g in grad {
        out[it] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            it += strides[d];
            if idx[d] < from[d] {
                break;
            }
            it -= strides[d] * from[d];
            idx[d] = 0;
        }
    }
    out
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::BadAxis { axis, rank: shape.len() });
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

/// Reduces along `axis` with `f`, starting each lane from its first element.
pub fn reduce_axis<T: Copy>(
    data: &[T],
    shape: &[usize],
    axis: usize,
    keepdim: bool,
    mut f: impl FnMut(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>), TensorError> {
    let (outer, len, inner) = axis_split(shape, axis)?;
    if len == 0 {
        return Err(TensorError::ShapeMismatch { op: "reduce", lhs: shape.to_vec(), rhs: vec![] });
    }
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut acc = data[base + i];
            for k in 1..len {
                acc = f(acc, data[base + k * inner + i]);
            }
            out.push(acc);
        }
    }
    let mut out_shape = shape.to_vec();
    if keepdim {
        out_shape[axis] = 1;
    } else {
        out_shape.remove(axis);
    }
    Ok((out_shape, out))
}

pub fn expect_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::ShapeMismatch { op, lhs: shape.to_vec(), rhs: vec![] }),
    }
}

pub fn transpose2<T: Copy>(data: &[T], shape: &[usize]) -> Result<(Vec<usize>, Vec<T>), TensorError> {
    let (r, c) = expect_matrix("transpose", shape)?;
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(data[i * c + j]);
        }
    }
    Ok((vec![c, r], out))
}

pub fn slice_rows<T: Copy>(
    data: &[T],
    shape: &[usize],
    start: usize,
    end: usize,
) -> Result<(Vec<usize>, Vec<T>), TensorError> {
    let (r, c) = expect_matrix("slice_rows", shape)?;
    if start > end || end > r {
        return Err(TensorError::IndexOutOfRange { index: end, len: r });
    }
    Ok((vec![end - start, c], data[start * c..end * c].to_vec()))
}

pub fn slice_cols<T: Copy>(
    data: &[T],
    shape: &[usize],
    start: usize,
    end: usize,
) -> Result<(Vec<usize>, Vec<T>), TensorError> {
    let (r, c) = expect_matrix("slice_cols", shape)?;
    if start > end || end > c {
        return Err(TensorError::IndexOutOfRange { index: end, len: c });
    }
    let w = end - start;
    let mut out = Vec::with_capacity(r * w);
    for i in 0..r {
        out.extend_from_slice(&data[i * c + start..i * c + end]);
    }
    Ok((vec![r, w], out))
}

pub fn concat_rows<T: Copy>(parts: &[(&[usize], &[T])]) -> Result<(Vec<usize>, Vec<T>), TensorError> {
    let first = parts.first().ok_or(TensorError::Empty("concat_rows"))?;
    let (_, c) = expect_matrix("concat_rows", first.0)?;
    let mut rows = 0;
    let mut out = Vec::new();
    for (shape, data) in parts {
        let (r, cc) = expect_matrix("concat_rows", shape)?;
        if cc != c {
            return Err(TensorError::ShapeMismatch { op: "concat_rows", lhs: first.0.to_vec(), rhs: shape.to_vec() });
        }
        rows += r;
        out.extend_from_slice(data);
    }
    Ok((vec![rows, c], out))
}

pub fn concat_cols<T: Copy>(parts: &[(&[usize], &[T])]) -> Result<(Vec<usize>, Vec<T>), TensorError> {
    let first = parts.first().ok_or(TensorError::Empty("concat_cols"))?;
    let (r, _) = expect_matrix("concat_cols", first.0)?;
    let mut widths = Vec::with_capacity(parts.len());
    for (shape, _) in parts {
        let (rr, c) = expect_matrix("concat_cols", shape)?;
        if rr != r {
            return Err(TensorError::ShapeMismatch { op: "concat_cols", lhs: first.0.to_vec(), rhs: shape.to_vec() });
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(r * total);
    for i in 0..r {
        for ((_, data), &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&data[i * w..(i + 1) * w]);
        }
    }
    Ok((vec![r, total], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 4], &[4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[3, 2], &[3]), None);
    }

    #[test]
    fn zip_column_and_row() {
        let (shape, out) = broadcast_zip("t", &[1.0, 2.0], &[2, 1], &[10.0, 20.0, 30.0], &[1, 3], |a, b| a * b).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(out, vec![10.0, 20.0, 30.0, 20.0, 40.0, 60.0]);
    }

    #[test]
    fn reduce_undoes_broadcast() {
        let g = vec![1.0; 6];
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[3]), vec![2.0, 2.0, 2.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[2, 1]), vec![3.0, 3.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[]), vec![6.0]);
    }

    #[test]
    fn concat_then_slice() {
        let a = [1, 2, 3, 4];
        let b = [5, 6];
        let (shape, out) = concat_cols(&[(&[2, 2], &a), (&[2, 1], &b)]).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(out, vec![1, 2, 5, 3, 4, 6]);
        let (s2, back) = slice_cols(&out, &shape, 0, 2).unwrap();
        assert_eq!((s2, back), (vec![2, 2], a.to_vec()));
    }
}
