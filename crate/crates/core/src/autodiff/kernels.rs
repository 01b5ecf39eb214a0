//! Forward numeric kernels shared by recording and replay.

use ndarray::{ArrayD, Axis, Ix2, IxDyn};

use crate::error::{Error, Result};

pub(crate) fn matmul(a: &ArrayD<f64>, b: &ArrayD<f64>, trans_a: bool, trans_b: bool) -> Result<ArrayD<f64>> {
    let a2 = a
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::shape("matmul", a.shape(), b.shape()))?;
    let b2 = b
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::shape("matmul", a.shape(), b.shape()))?;
    let a2 = if trans_a { a2.reversed_axes() } else { a2 };
    let b2 = if trans_b { b2.reversed_axes() } else { b2 };
    if a2.ncols() != b2.nrows() {
        return Err(Error::shape("matmul", a2.shape(), b2.shape()));
    }
    Ok(a2.dot(&b2).into_dyn())
}

pub(crate) fn same_shape(op: &'static str, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Whether `from` broadcasts to `to` under right-aligned numpy rules.
pub(crate) fn broadcastable(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let offset = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(i, &d)| d == 1 || d == to[offset + i])
}

pub(crate) fn broadcast_to(a: &ArrayD<f64>, shape: &[usize]) -> Result<ArrayD<f64>> {
    a.broadcast(IxDyn(shape))
        .map(|v| v.to_owned())
        .ok_or_else(|| Error::shape("broadcast_to", a.shape(), shape))
}

/// Sums `a` down to `shape`, the inverse of [`broadcast_to`].
pub(crate) fn sum_to(a: &ArrayD<f64>, shape: &[usize]) -> Result<ArrayD<f64>> {
    if !broadcastable(shape, a.shape()) {
        return Err(Error::shape("sum_to", a.shape(), shape));
    }
    let mut out = a.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[axis] != 1 {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    Ok(out.as_standard_layout().into_owned())
}

pub(crate) fn reshape(a: &ArrayD<f64>, shape: &[usize]) -> Result<ArrayD<f64>> {
    let n: usize = shape.iter().product();
    if n != a.len() {
        return Err(Error::shape("reshape", a.shape(), shape));
    }
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(ArrayD::from_shape_vec(IxDyn(shape), data).expect("element count checked"))
}

/// Shape left after reducing the last axis.
pub(crate) fn leading_shape(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len().saturating_sub(1)].to_vec()
}

/// Applies `f` to each row of the last axis, producing one value per row.
pub(crate) fn reduce_last_axis(
    op: &'static str,
    a: &ArrayD<f64>,
    f: impl Fn(&[f64]) -> f64,
) -> Result<ArrayD<f64>> {
    if a.ndim() == 0 {
        return Err(Error::invalid(op, "needs at least one axis"));
    }
    let k = *a.shape().last().unwrap();
    if k == 0 {
        return Err(Error::invalid(op, "empty last axis"));
    }
    let standard = a.as_standard_layout();
    let data = standard.as_slice().expect("standard layout");
    let out: Vec<f64> = data.chunks(k).map(f).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&leading_shape(a.shape())), out).expect("row count"))
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn l2_norm_sq(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum()
}

pub(crate) fn gather(a: &ArrayD<f64>, index: &[usize]) -> Result<ArrayD<f64>> {
    if a.ndim() == 0 {
        return Err(Error::invalid("gather", "needs at least one axis"));
    }
    let k = *a.shape().last().unwrap();
    let rows = a.len() / k.max(1);
    if index.len() != rows {
        return Err(Error::invalid(
            "gather",
            format!("{} indices for {} rows of shape {:?}", index.len(), rows, a.shape()),
        ));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= k) {
        return Err(Error::invalid("gather", format!("index {bad} out of range for last axis {k}")));
    }
    let standard = a.as_standard_layout();
    let data = standard.as_slice().expect("standard layout");
    let out: Vec<f64> = index.iter().enumerate().map(|(r, &i)| data[r * k + i]).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&leading_shape(a.shape())), out).expect("row count"))
}

/// One-hot mask of `shape` with a 1 at `index[r]` in each last-axis row.
pub(crate) fn one_hot(shape: &[usize], index: &[usize]) -> ArrayD<f64> {
    let k = *shape.last().unwrap();
    let mut data = vec![0.0; shape.iter().product()];
    for (r, &i) in index.iter().enumerate() {
        data[r * k + i] = 1.0;
    }
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape product")
}

pub(crate) fn select_rows(a: &ArrayD<f64>, index: &[usize]) -> Result<ArrayD<f64>> {
    if a.ndim() == 0 {
        return Err(Error::invalid("select_rows", "needs at least one axis"));
    }
    let n = a.shape()[0];
    if let Some(&bad) = index.iter().find(|&&i| i >= n) {
        return Err(Error::invalid("select_rows", format!("row {bad} out of range for {n} rows")));
    }
    Ok(a.select(Axis(0), index))
}

pub(crate) fn scatter_rows(a: &ArrayD<f64>, index: &[usize], rows: usize) -> Result<ArrayD<f64>> {
    if a.ndim() == 0 || a.shape()[0] != index.len() {
        return Err(Error::invalid(
            "scatter_rows",
            format!("{} indices for input of shape {:?}", index.len(), a.shape()),
        ));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
        return Err(Error::invalid("scatter_rows", format!("row {bad} out of range for {rows} rows")));
    }
    let mut shape = a.shape().to_vec();
    shape[0] = rows;
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (src, &dst) in index.iter().enumerate() {
        let mut row = out.index_axis_mut(Axis(0), dst);
        row += &a.index_axis(Axis(0), src);
    }
    Ok(out)
}
